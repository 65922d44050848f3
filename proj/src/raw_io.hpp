#pragma once

// Shared plumbing for the raw f32le + JSON sidecar formats.

#include <filesystem>
#include <span>
#include <vector>

#include "defreg/volume.hpp"

namespace defreg::detail {

std::filesystem::path sidecar_path(const std::filesystem::path& data_path);

void write_header(const VolumeHeader& header, const std::filesystem::path& data_path);
VolumeHeader read_header(const std::filesystem::path& data_path);

// Values are narrowed to f32; non-finite values are rejected before anything is written.
void write_f32le(std::span<const double> values, const std::filesystem::path& path);
std::vector<double> read_f32le(const std::filesystem::path& path, size_t expected_count);

void ensure_parent_dir(const std::filesystem::path& path);

} // namespace defreg::detail
