#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "defreg/convnet.hpp"
#include "defreg/error.hpp"
#include "raw_io.hpp"

namespace defreg {

namespace {

constexpr char kMagic[4] = {'I', 'R', 'N', 'W'};
constexpr uint32_t kFormatVersion = 1;

uint32_t to_little(uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

void put_u32(std::ofstream& out, uint32_t v) {
    const uint32_t le = to_little(v);
    out.write(reinterpret_cast<const char*>(&le), 4);
}

uint32_t get_u32(std::ifstream& in, const std::filesystem::path& path) {
    uint32_t le = 0;
    in.read(reinterpret_cast<char*>(&le), 4);
    if (!in) throw FormatError("truncated checkpoint " + path.string());
    return to_little(le);
}

} // namespace

void save_checkpoint(const ConvNetParameters& params, const std::filesystem::path& path) {
    const auto& cfg = params.config();
    detail::ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());

    out.write(kMagic, 4);
    put_u32(out, kFormatVersion);
    put_u32(out, static_cast<uint32_t>(cfg.levels));
    put_u32(out, static_cast<uint32_t>(cfg.base_filters));
    put_u32(out, cfg.use_batchnorm ? 1u : 0u);
    put_u32(out, static_cast<uint32_t>(ConvNetConfig::kernel_size));
    put_u32(out, static_cast<uint32_t>(params.tensors().size()));
    for (const auto& t : params.tensors()) {
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (auto s : t.shape) put_u32(out, static_cast<uint32_t>(s));
        for (double v : t.values) {
            const auto f = static_cast<float>(v);
            if (!std::isfinite(f)) throw ValidationError("non-finite parameter in " + t.name);
            put_u32(out, std::bit_cast<uint32_t>(f));
        }
    }
    if (!out) throw IoError("write failed: " + path.string());
}

ConvNetParameters load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing checkpoint " + path.string());

    char magic[4] = {};
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, kMagic)) throw FormatError("not a network checkpoint: " + path.string());
    const uint32_t version = get_u32(in, path);
    if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));

    ConvNetConfig cfg;
    cfg.levels = static_cast<int>(get_u32(in, path));
    cfg.base_filters = static_cast<int>(get_u32(in, path));
    cfg.use_batchnorm = get_u32(in, path) != 0;
    const uint32_t kernel = get_u32(in, path);
    if (kernel != static_cast<uint32_t>(ConvNetConfig::kernel_size)) throw FormatError("unsupported kernel size in checkpoint");
    try {
        cfg.validate();
    } catch (const ValidationError& e) {
        throw FormatError(std::string("invalid checkpoint config: ") + e.what());
    }

    ConvNetParameters params = ConvNetParameters::zeros(cfg);
    const uint32_t count = get_u32(in, path);
    if (count != params.tensors().size()) throw FormatError("checkpoint tensor count does not match its config");
    for (auto& t : params.tensors()) {
        const uint32_t ndims = get_u32(in, path);
        if (ndims != t.shape.size()) throw FormatError("checkpoint rank mismatch for " + t.name);
        for (auto s : t.shape) {
            if (get_u32(in, path) != static_cast<uint32_t>(s)) throw FormatError("checkpoint shape mismatch for " + t.name);
        }
        for (auto& v : t.values) {
            const auto f = std::bit_cast<float>(get_u32(in, path));
            if (!std::isfinite(f)) throw FormatError("non-finite value in checkpoint tensor " + t.name);
            v = static_cast<double>(f);
        }
    }
    if (in.peek() != std::ifstream::traits_type::eof()) throw FormatError("trailing bytes in checkpoint " + path.string());
    return params;
}

} // namespace defreg
