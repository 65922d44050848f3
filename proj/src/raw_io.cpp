#include "raw_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "defreg/error.hpp"

namespace defreg::detail {

namespace {

uint32_t to_little(uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

} // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& data_path) {
    auto p = data_path;
    p += ".json";
    return p;
}

void ensure_parent_dir(const std::filesystem::path& path) {
    const auto parent = path.parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

void write_header(const VolumeHeader& header, const std::filesystem::path& data_path) {
    const auto& g = header.grid;
    nlohmann::json j;
    j["dims"] = {g.dims.nx, g.dims.ny, g.dims.nz};
    j["spacing"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
    j["origin"] = {g.origin[0], g.origin[1], g.origin[2]};
    j["dtype"] = header.dtype;
    if (header.channels != 1) j["channels"] = header.channels;

    const auto path = sidecar_path(data_path);
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

VolumeHeader read_header(const std::filesystem::path& data_path) {
    const auto path = sidecar_path(data_path);
    std::ifstream in(path);
    if (!in) throw IoError("missing header " + path.string());

    VolumeHeader h;
    try {
        const auto j = nlohmann::json::parse(in);
        const auto dims = j.at("dims").get<std::vector<int64_t>>();
        const auto spacing = j.at("spacing").get<std::vector<double>>();
        const auto origin = j.value("origin", std::vector<double>{0.0, 0.0, 0.0});
        if (dims.size() != 3 || spacing.size() != 3 || origin.size() != 3) {
            throw FormatError("header triples must have three entries: " + path.string());
        }
        h.grid.dims = {dims[0], dims[1], dims[2]};
        h.grid.spacing = {spacing[0], spacing[1], spacing[2]};
        h.grid.origin = {origin[0], origin[1], origin[2]};
        h.dtype = j.value("dtype", std::string("f32le"));
        h.channels = j.value("channels", 1);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed header " + path.string() + ": " + e.what());
    }
    if (h.dtype != "f32le") throw FormatError("unsupported dtype '" + h.dtype + "' in " + path.string());
    try {
        h.grid.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("invalid header geometry: ") + e.what());
    }
    return h;
}

void write_f32le(std::span<const double> values, const std::filesystem::path& path) {
    std::vector<uint32_t> words(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw ValidationError("refusing to write non-finite value to " + path.string());
        const auto f = static_cast<float>(values[i]);
        if (!std::isfinite(f)) throw ValidationError("value outside f32 range in " + path.string());
        words[i] = to_little(std::bit_cast<uint32_t>(f));
    }
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<double> read_f32le(const std::filesystem::path& path, size_t expected_count) {
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) throw IoError("missing file " + path.string());
    const auto bytes = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string());
    if (bytes != expected_count * 4) {
        throw FormatError("length mismatch in " + path.string() + ": header implies " +
                          std::to_string(expected_count * 4) + " bytes, file has " + std::to_string(bytes));
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<uint32_t> words(expected_count);
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("read failed: " + path.string());

    std::vector<double> values(expected_count);
    for (size_t i = 0; i < expected_count; ++i) {
        const auto f = std::bit_cast<float>(to_little(words[i]));
        if (!std::isfinite(f)) throw FormatError("non-finite value at index " + std::to_string(i) + " in " + path.string());
        values[i] = static_cast<double>(f);
    }
    return values;
}

} // namespace defreg::detail
