#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace defreg {

using Vec3 = std::array<double, 3>;

struct Dims {
    int64_t nx = 0;
    int64_t ny = 0;
    int64_t nz = 0;

    int64_t operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    int64_t count() const { return nx * ny * nz; }
    bool operator==(const Dims&) const = default;
};

// Regular voxel lattice. Voxel (i,j,k) has its center at origin + (i,j,k)*spacing;
// the physical extent of an axis is n*spacing (voxel edges), which is the convention
// used when grids are resampled.
struct Grid {
    Dims dims;
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    size_t count() const { return static_cast<size_t>(dims.count()); }

    size_t index(int64_t i, int64_t j, int64_t k) const {
        return static_cast<size_t>(i + dims.nx * (j + dims.ny * k));
    }

    Vec3 world(int64_t i, int64_t j, int64_t k) const {
        return {origin[0] + static_cast<double>(i) * spacing[0],
                origin[1] + static_cast<double>(j) * spacing[1],
                origin[2] + static_cast<double>(k) * spacing[2]};
    }

    // Continuous voxel coordinates of a world point (no clamping).
    Vec3 to_voxel(const Vec3& p) const {
        return {(p[0] - origin[0]) / spacing[0],
                (p[1] - origin[1]) / spacing[1],
                (p[2] - origin[2]) / spacing[2]};
    }

    // Throws ValidationError on non-positive dims or non-finite/non-positive spacing.
    void validate() const;

    bool operator==(const Grid&) const = default;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double norm(const Vec3& a);

} // namespace defreg
