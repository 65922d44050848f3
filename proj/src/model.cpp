#include "defreg/model.hpp"

#include <cmath>

#include "defreg/error.hpp"

namespace defreg {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
        throw ValidationError("adam_step: parameter, gradient and moment sizes differ");
    }
    state.t += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    const double lr = state.learning_rate, eps = state.epsilon;
    double* m = state.m.data();
    double* v = state.v.data();

#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < static_cast<int64_t>(params.size()); ++i) {
        const double g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

} // namespace defreg
