#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "defreg/grid.hpp"
#include "defreg/volume.hpp"

namespace defreg {

// Dense displacement field in mm, three interleaved components per voxel (ux,uy,uz),
// x-fastest. Maps a point x of its own grid to x + u(x) in moving space.
class DisplacementField {
  public:
    DisplacementField() = default;
    explicit DisplacementField(const Grid& grid);  // zero field
    DisplacementField(const Grid& grid, std::vector<double> components);

    static DisplacementField constant(const Grid& grid, const Vec3& value);

    const Grid& grid() const { return grid_; }
    const Dims& dims() const { return grid_.dims; }
    size_t size() const { return grid_.count(); }

    Vec3 operator[](size_t i) const { return {data_[3 * i], data_[3 * i + 1], data_[3 * i + 2]}; }
    Vec3 operator()(int64_t i, int64_t j, int64_t k) const { return (*this)[grid_.index(i, j, k)]; }
    void set(size_t i, const Vec3& u) {
        data_[3 * i] = u[0];
        data_[3 * i + 1] = u[1];
        data_[3 * i + 2] = u[2];
    }

    std::span<double> components() { return data_; }
    std::span<const double> components() const { return data_; }

    bool operator==(const DisplacementField&) const = default;

  private:
    Grid grid_;
    std::vector<double> data_;
};

struct JacobianMap {
    Grid grid;
    std::vector<double> data;

    Volume to_volume() const { return Volume(grid, data); }
};

struct SampleGradient {
    double value = 0.0;
    Vec3 gradient{0.0, 0.0, 0.0};  // d value / d p, per mm
};

// Trilinear interpolation at a world point; coordinates are clamped into the grid.
double sample_trilinear(const Volume& v, const Vec3& p);

// Value plus derivative w.r.t. the world point. Clamped axes have zero derivative;
// at exact interior nodes the derivative comes from the cell on the lower-index side.
SampleGradient sample_trilinear_gradient(const Volume& v, const Vec3& p);

// Continuous voxel coordinates, in `target`, of world(i,j,k) + u on `source`. When the two
// grids coincide this is index + u / spacing, so a zero displacement lands exactly on a node.
Vec3 displaced_voxel(const Grid& source, const Grid& target, int64_t i, int64_t j, int64_t k, const Vec3& u);

// Same as above but at continuous voxel coordinates; the gradient is still per mm.
double sample_trilinear_voxel(const Volume& v, const Vec3& c);
SampleGradient sample_trilinear_gradient_voxel(const Volume& v, const Vec3& c);

// Trilinear interpolation of each field component at a world point (clamped).
Vec3 sample_field(const DisplacementField& field, const Vec3& p);

// Pull-back warp: output(x) = moving(world(x) + u(x)) on the field's grid.
Volume warp_volume(const Volume& moving, const DisplacementField& field);

// det(I + grad u) per voxel; central differences inside, one-sided on faces, in mm.
JacobianMap jacobian_determinant(const DisplacementField& field);

// Share of voxels with determinant <= 0.
double folding_fraction(const JacobianMap& jmap);

// Trilinear resampling onto a grid with the same physical extent. Values stay in mm.
DisplacementField resample_field(const DisplacementField& field, const Dims& new_dims);
DisplacementField resample_field_onto(const DisplacementField& field, const Grid& target);

// Grid of new_dims covering the same physical extent as `grid`.
Grid rescaled_grid(const Grid& grid, const Dims& new_dims);

DisplacementField load_field(const std::filesystem::path& path);
void save_field(const DisplacementField& field, const std::filesystem::path& path);

} // namespace defreg
