#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "defreg/grid.hpp"

namespace defreg {

// Dense scalar volume, x-fastest linear order. Intensities are always finite.
class Volume {
  public:
    Volume() = default;
    Volume(Grid grid, std::vector<double> data);

    static Volume filled(const Grid& grid, double value);

    const Grid& grid() const { return grid_; }
    const Dims& dims() const { return grid_.dims; }
    const Vec3& spacing() const { return grid_.spacing; }
    const Vec3& origin() const { return grid_.origin; }

    size_t size() const { return data_.size(); }
    std::span<const double> data() const { return data_; }
    double operator[](size_t i) const { return data_[i]; }
    double operator()(int64_t i, int64_t j, int64_t k) const { return data_[grid_.index(i, j, k)]; }

    bool operator==(const Volume&) const = default;

  private:
    Grid grid_;
    std::vector<double> data_;
};

// Sidecar metadata of the raw on-disk format.
struct VolumeHeader {
    Grid grid;
    std::string dtype = "f32le";
    int channels = 1;
};

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

// Sub-volume centered on the input; odd remainders drop the extra voxel on the high side.
// The origin moves so that world coordinates of retained voxels are unchanged.
Volume center_crop(const Volume& v, const Dims& target);

// Mean 0, population std 1. Constant volumes map to all zeros.
Volume zscore_normalize(const Volume& v);

enum class Axis { x = 0, y = 1, z = 2 };

// 8-bit binary PGM of one slice, rescaled per slice from [min,max] to [0,255].
void export_slice(const Volume& v, Axis axis, int64_t index, const std::filesystem::path& path);

double volume_mean(const Volume& v);

} // namespace defreg
