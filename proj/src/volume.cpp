#include "defreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "defreg/error.hpp"
#include "defreg/parallel.hpp"
#include "raw_io.hpp"

namespace defreg {

void Grid::validate() const {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw ValidationError("grid dims must be positive");
    for (int a = 0; a < 3; ++a) {
        if (!std::isfinite(spacing[a]) || spacing[a] <= 0.0) throw ValidationError("grid spacing must be positive and finite");
        if (!std::isfinite(origin[a])) throw ValidationError("grid origin must be finite");
    }
}

double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

Volume::Volume(Grid grid, std::vector<double> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != grid_.count()) {
        throw ValidationError("volume data length " + std::to_string(data_.size()) + " does not match dims (" +
                              std::to_string(grid_.count()) + ")");
    }
    for (double v : data_) {
        if (!std::isfinite(v)) throw ValidationError("volume intensities must be finite");
    }
}

Volume Volume::filled(const Grid& grid, double value) {
    grid.validate();
    return Volume(grid, std::vector<double>(grid.count(), value));
}

Volume load_volume(const std::filesystem::path& path) {
    const auto header = detail::read_header(path);
    if (header.channels != 1) throw FormatError(path.string() + " is not a scalar volume");
    auto data = detail::read_f32le(path, header.grid.count());
    return Volume(header.grid, std::move(data));
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
    VolumeHeader header;
    header.grid = v.grid();
    detail::write_f32le(v.data(), path);
    detail::write_header(header, path);
}

Volume center_crop(const Volume& v, const Dims& target) {
    const auto& d = v.dims();
    if (target.nx <= 0 || target.ny <= 0 || target.nz <= 0) throw ValidationError("crop dims must be positive");
    if (target.nx > d.nx || target.ny > d.ny || target.nz > d.nz) throw ValidationError("crop dims exceed volume dims");

    const int64_t ox = (d.nx - target.nx) / 2;
    const int64_t oy = (d.ny - target.ny) / 2;
    const int64_t oz = (d.nz - target.nz) / 2;

    Grid g = v.grid();
    g.dims = target;
    g.origin = v.grid().world(ox, oy, oz);

    std::vector<double> out(g.count());
    for (int64_t k = 0; k < target.nz; ++k)
        for (int64_t j = 0; j < target.ny; ++j)
            for (int64_t i = 0; i < target.nx; ++i) out[g.index(i, j, k)] = v(i + ox, j + oy, k + oz);
    return Volume(g, std::move(out));
}

double volume_mean(const Volume& v) {
    const auto data = v.data();
    return deterministic_sum(data.size(), [&](size_t i) { return data[i]; }) / static_cast<double>(data.size());
}

Volume zscore_normalize(const Volume& v) {
    const auto data = v.data();
    const size_t n = data.size();
    if (n == 0) throw ValidationError("cannot normalize an empty volume");
    const double mean = volume_mean(v);
    const double var = deterministic_sum(n, [&](size_t i) {
                           const double d = data[i] - mean;
                           return d * d;
                       }) /
                       static_cast<double>(n);
    const double sd = std::sqrt(var);

    std::vector<double> out(n, 0.0);
    // Constant input (up to summation rounding) has no scale to normalize by.
    if (sd > 1e-12 * std::max(1.0, std::abs(mean))) {
        const double inv = 1.0 / sd;
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) out[i] = (data[i] - mean) * inv;
    }
    return Volume(v.grid(), std::move(out));
}

void export_slice(const Volume& v, Axis axis, int64_t index, const std::filesystem::path& path) {
    const auto& d = v.dims();
    const int a = static_cast<int>(axis);
    if (index < 0 || index >= d[a]) {
        throw ValidationError("slice index " + std::to_string(index) + " out of range [0, " + std::to_string(d[a]) + ")");
    }
    // In-plane axes in increasing order: (y,z) for x, (x,z) for y, (x,y) for z.
    const int u = a == 0 ? 1 : 0;
    const int w = a == 2 ? 1 : 2;
    const int64_t width = d[u];
    const int64_t height = d[w];

    std::vector<double> slice(static_cast<size_t>(width * height));
    for (int64_t r = 0; r < height; ++r) {
        for (int64_t c = 0; c < width; ++c) {
            int64_t ijk[3];
            ijk[a] = index;
            ijk[u] = c;
            ijk[w] = r;
            slice[static_cast<size_t>(r * width + c)] = v(ijk[0], ijk[1], ijk[2]);
        }
    }
    const auto [lo_it, hi_it] = std::minmax_element(slice.begin(), slice.end());
    const double lo = *lo_it;
    const double hi = *hi_it;

    std::vector<unsigned char> pixels(slice.size(), 128);
    if (hi > lo) {
        for (size_t i = 0; i < slice.size(); ++i) {
            pixels[i] = static_cast<unsigned char>(std::lround((slice[i] - lo) / (hi - lo) * 255.0));
        }
    }

    detail::ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace defreg
