#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "defreg/warp.hpp"

namespace defreg {

// The displacement field is its own parameter vector.
struct FreeFormModel {
    DisplacementField field;
};

// Identity parameterization; the parameter gradient is the field gradient unchanged.
inline const DisplacementField& freeform_apply(const FreeFormModel& model) { return model.field; }

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    int64_t t = 0;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    AdamState(size_t parameter_count, double lr) : m(parameter_count, 0.0), v(parameter_count, 0.0), learning_rate(lr) {}
};

// One bias-corrected Adam update, in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

} // namespace defreg
