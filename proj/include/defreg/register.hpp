#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "defreg/convnet.hpp"
#include "defreg/loss.hpp"
#include "defreg/volume.hpp"
#include "defreg/warp.hpp"

namespace defreg {

enum class Mode { freeform, convnet };
enum class StopReason { max_iters, converged, budget };

std::string to_string(Mode m);
std::string to_string(StopReason r);
Mode parse_mode(const std::string& s);

// Inputs are assumed affinely pre-aligned; only the non-linear residual is optimized.
struct RegistrationConfig {
    Mode mode = Mode::freeform;
    int pyramid_levels = 3;
    int iterations_per_level = 200;
    LossConfig loss;
    double learning_rate = 1.0;
    double convergence_tol = 1e-6;
    std::optional<double> max_seconds;
    ConvNetConfig net;
    uint64_t seed = 0;  // network initialization

    // Mode-specific defaults: freeform 3 levels / 200 iterations / lr 1.0,
    // convnet 1 level / 100 iterations / lr 1e-4.
    static RegistrationConfig defaults(Mode mode);

    void validate() const;
};

struct LevelTrace {
    Dims dims;
    std::vector<LossValue> losses;  // initial evaluation followed by one entry per iteration
    int64_t iterations = 0;
    StopReason stop = StopReason::max_iters;
};

struct RegistrationReport {
    DisplacementField field;  // best iterate of the finest level, on the fixed grid
    std::vector<LevelTrace> levels;  // coarsest first
    double wall_seconds = 0.0;
    int64_t iterations = 0;
    StopReason stop_reason = StopReason::max_iters;
    Dims input_dims;
    Dims padded_dims;  // equals input_dims when no padding was needed
    std::optional<ConvNetParameters> network;
};

RegistrationReport register_pair(const Volume& fixed, const Volume& moving, const RegistrationConfig& cfg);

// 2x2x2 block mean; odd trailing voxels average over the truncated block. Spacing doubles.
Volume downsample_volume(const Volume& v);

// Edge-replicating pad on the high side so every dim is a multiple of `multiple`.
Volume pad_to_multiple(const Volume& v, int64_t multiple);

} // namespace defreg
