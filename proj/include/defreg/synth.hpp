#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "defreg/eval.hpp"
#include "defreg/volume.hpp"
#include "defreg/warp.hpp"

namespace defreg {

struct SynthConfig {
    Dims dims{48, 48, 48};
    Vec3 spacing{1.0, 1.0, 1.0};
    uint64_t seed = 0;
    int num_blobs = 12;
    int field_bumps = 4;
    double max_displacement = 5.0;  // mm
    int num_landmarks = 20;
    double noise_sigma = 0.02;
    bool cavity = false;  // resection-like dropout in the moving image

    void validate() const;
};

// Ground truth: warp_volume(moving, true_field) ~= fixed and
// moving_landmarks = fixed_landmarks + true_field(fixed_landmarks).
struct SynthCase {
    Volume fixed;
    Volume moving;
    DisplacementField true_field;
    LandmarkSet fixed_landmarks;
    LandmarkSet moving_landmarks;
};

SynthCase generate_case(const SynthConfig& cfg);

// Interior margin (voxels) that keeps clamped border samples out of the comparison.
Dims oracle_margin(const SynthConfig& cfg);

// Mean |field - true_field| (mm) over voxels at least `margin` away from every face.
double oracle_error(const DisplacementField& field, const DisplacementField& true_field, const Dims& margin);

nlohmann::json synth_config_to_json(const SynthConfig& cfg);

// fixed.vol, moving.vol, true_field.dfield, fixed_landmarks.csv, moving_landmarks.csv, manifest.json
void write_case(const SynthCase& c, const SynthConfig& cfg, const std::filesystem::path& dir);

} // namespace defreg
