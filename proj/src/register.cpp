#include "defreg/register.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <functional>

#include "defreg/error.hpp"
#include "defreg/model.hpp"

namespace defreg {

std::string to_string(Mode m) { return m == Mode::freeform ? "freeform" : "convnet"; }

std::string to_string(StopReason r) {
    switch (r) {
    case StopReason::max_iters: return "max_iters";
    case StopReason::converged: return "converged";
    case StopReason::budget: return "budget";
    }
    return "unknown";
}

Mode parse_mode(const std::string& s) {
    if (s == "freeform") return Mode::freeform;
    if (s == "convnet") return Mode::convnet;
    throw ValidationError("unknown mode '" + s + "' (expected freeform or convnet)");
}

RegistrationConfig RegistrationConfig::defaults(Mode mode) {
    RegistrationConfig cfg;
    cfg.mode = mode;
    if (mode == Mode::convnet) {
        cfg.pyramid_levels = 1;
        cfg.iterations_per_level = 100;
        cfg.learning_rate = 1e-4;
    }
    return cfg;
}

void RegistrationConfig::validate() const {
    loss.validate();
    if (pyramid_levels < 1) throw ValidationError("pyramid_levels must be >= 1");
    if (iterations_per_level < 0) throw ValidationError("iterations_per_level must be >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be > 0");
    if (!(convergence_tol >= 0.0)) throw ValidationError("convergence_tol must be >= 0");
    if (max_seconds && !(*max_seconds >= 0.0)) throw ValidationError("max_seconds must be >= 0");
    if (mode == Mode::convnet) net.validate();
}

Volume downsample_volume(const Volume& v) {
    const Dims& d = v.dims();
    if (d.nx < 2 && d.ny < 2 && d.nz < 2) throw ValidationError("downsample_volume: nothing to downsample in a single voxel");
    const Dims od{(d.nx + 1) / 2, (d.ny + 1) / 2, (d.nz + 1) / 2};
    Grid g = v.grid();
    g.dims = od;
    for (int a = 0; a < 3; ++a) {
        g.origin[a] += 0.5 * g.spacing[a];
        g.spacing[a] *= 2.0;
    }
    std::vector<double> out(g.count());
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < od.nz; ++k) {
        for (int64_t j = 0; j < od.ny; ++j) {
            for (int64_t i = 0; i < od.nx; ++i) {
                double sum = 0.0;
                int count = 0;
                for (int64_t z = 2 * k; z < std::min(2 * k + 2, d.nz); ++z)
                    for (int64_t y = 2 * j; y < std::min(2 * j + 2, d.ny); ++y)
                        for (int64_t x = 2 * i; x < std::min(2 * i + 2, d.nx); ++x) {
                            sum += v(x, y, z);
                            ++count;
                        }
                out[g.index(i, j, k)] = sum / count;
            }
        }
    }
    return Volume(g, std::move(out));
}

Volume pad_to_multiple(const Volume& v, int64_t multiple) {
    const Dims& d = v.dims();
    auto up = [&](int64_t n) { return (n + multiple - 1) / multiple * multiple; };
    const Dims pd{up(d.nx), up(d.ny), up(d.nz)};
    if (pd == d) return v;
    Grid g = v.grid();
    g.dims = pd;
    std::vector<double> out(g.count());
    for (int64_t k = 0; k < pd.nz; ++k)
        for (int64_t j = 0; j < pd.ny; ++j)
            for (int64_t i = 0; i < pd.nx; ++i)
                out[g.index(i, j, k)] = v(std::min(i, d.nx - 1), std::min(j, d.ny - 1), std::min(k, d.nz - 1));
    return Volume(g, std::move(out));
}

namespace {

using Clock = std::chrono::steady_clock;

struct Evaluation {
    LossValue loss;
    std::vector<double> grad;  // d total / d params
};

struct LevelOutcome {
    LevelTrace trace;
    std::vector<double> best_params;
    bool out_of_budget = false;
};

// Adam on a flat parameter vector, keeping the lowest-loss iterate.
// `evaluate` computes loss and gradient at the given parameters.
LevelOutcome optimize_level(std::vector<double> params, const Dims& dims, const RegistrationConfig& cfg,
                            const std::function<Evaluation(const std::vector<double>&)>& evaluate,
                            Clock::time_point start) {
    LevelOutcome out;
    out.trace.dims = dims;

    auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };
    auto over_budget = [&] { return cfg.max_seconds && elapsed() > *cfg.max_seconds; };

    Evaluation current = evaluate(params);
    out.trace.losses.push_back(current.loss);
    double best_total = current.loss.total;
    out.best_params = params;

    AdamState adam(params.size(), cfg.learning_rate);
    for (int it = 0; it < cfg.iterations_per_level; ++it) {
        if (over_budget()) {
            out.trace.stop = StopReason::budget;
            out.out_of_budget = true;
            break;
        }
        adam_step(params, current.grad, adam);
        current = evaluate(params);
        out.trace.losses.push_back(current.loss);
        out.trace.iterations += 1;
        if (current.loss.total < best_total) {
            best_total = current.loss.total;
            out.best_params = params;
        }

        const auto& losses = out.trace.losses;
        if (losses.size() > 10) {
            const double past = losses[losses.size() - 11].total;
            const double now = losses.back().total;
            if (std::abs(now - past) / std::max(std::abs(past), 1e-12) < cfg.convergence_tol) {
                out.trace.stop = StopReason::converged;
                break;
            }
        }
    }
    if (!out.out_of_budget && over_budget()) {
        out.trace.stop = StopReason::budget;
        out.out_of_budget = true;
    }
    return out;
}

void finish_report(RegistrationReport& report, Clock::time_point start) {
    report.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    report.iterations = 0;
    for (const auto& l : report.levels) report.iterations += l.iterations;
    report.stop_reason = report.levels.empty() ? StopReason::max_iters : report.levels.back().stop;
}

DisplacementField run_freeform(const Volume& fixed, const Volume& moving, const RegistrationConfig& cfg,
                               RegistrationReport& report, Clock::time_point start) {
    std::vector<Volume> fixed_pyr{fixed};
    std::vector<Volume> moving_pyr{moving};
    for (int l = 1; l < cfg.pyramid_levels; ++l) {
        fixed_pyr.push_back(downsample_volume(fixed_pyr.back()));
        moving_pyr.push_back(downsample_volume(moving_pyr.back()));
    }

    DisplacementField field(fixed_pyr.back().grid());
    bool stop = false;
    for (int l = cfg.pyramid_levels - 1; l >= 0; --l) {
        const Volume& f = fixed_pyr[static_cast<size_t>(l)];
        const Volume& m = moving_pyr[static_cast<size_t>(l)];
        if (!(field.grid() == f.grid())) field = resample_field_onto(field, f.grid());
        if (stop) continue;

        auto evaluate = [&](const std::vector<double>& params) {
            DisplacementField u(f.grid(), params);
            auto r = overall_loss(f, m, u, cfg.loss);
            const auto g = r.grad.components();
            return Evaluation{r.value, std::vector<double>(g.begin(), g.end())};
        };
        const auto c = field.components();
        auto outcome = optimize_level(std::vector<double>(c.begin(), c.end()), f.dims(), cfg, evaluate, start);
        field = DisplacementField(f.grid(), std::move(outcome.best_params));
        report.levels.push_back(std::move(outcome.trace));
        stop = outcome.out_of_budget;
    }
    return field;
}

DisplacementField run_convnet(const Volume& fixed, const Volume& moving, const RegistrationConfig& cfg,
                              RegistrationReport& report, Clock::time_point start) {
    ConvNetParameters net = ConvNetParameters::initialize(cfg.net, cfg.seed);
    DisplacementField best_field(fixed.grid());

    for (int l = 0; l < cfg.pyramid_levels; ++l) {
        DisplacementField level_best = best_field;
        double level_best_total = std::numeric_limits<double>::infinity();
        ConvNetParameters level_best_net = net;

        auto evaluate = [&](const std::vector<double>& params) {
            net.unpack_trainable(params);
            auto fwd = convnet_forward(net, fixed, moving, BatchNormMode::train);
            auto r = overall_loss(fixed, moving, fwd.field, cfg.loss);
            auto grads = convnet_backward(net, fwd.cache, r.grad);
            update_running_stats(net, fwd.cache);
            if (r.value.total < level_best_total) {
                level_best_total = r.value.total;
                level_best = fwd.field;
                level_best_net = net;
            }
            return Evaluation{r.value, grads.pack_trainable(net)};
        };
        auto outcome = optimize_level(net.pack_trainable(), fixed.dims(), cfg, evaluate, start);
        net = level_best_net;
        best_field = level_best;
        report.levels.push_back(std::move(outcome.trace));
        if (outcome.out_of_budget) break;
    }
    report.network = std::move(net);
    return best_field;
}

} // namespace

RegistrationReport register_pair(const Volume& fixed, const Volume& moving, const RegistrationConfig& cfg) {
    cfg.validate();
    if (!(fixed.dims() == moving.dims())) throw ValidationError("register: fixed and moving dims differ");
    const auto start = Clock::now();

    const int64_t multiple = cfg.mode == Mode::freeform ? (int64_t{1} << (cfg.pyramid_levels - 1))
                                                        : (int64_t{1} << cfg.net.levels);
    const Volume f = pad_to_multiple(zscore_normalize(fixed), multiple);
    const Volume m = pad_to_multiple(zscore_normalize(moving), multiple);

    RegistrationReport report;
    report.input_dims = fixed.dims();
    report.padded_dims = f.dims();

    if (cfg.mode == Mode::freeform) {
        const Dims& d = f.dims();
        const int64_t coarsest = int64_t{1} << (cfg.pyramid_levels - 1);
        if (d.nx / coarsest < 2 || d.ny / coarsest < 2 || d.nz / coarsest < 2) {
            throw ValidationError("too many pyramid levels for the volume size");
        }
    }

    DisplacementField padded = cfg.mode == Mode::freeform ? run_freeform(f, m, cfg, report, start)
                                                          : run_convnet(f, m, cfg, report, start);

    // Crop back onto the caller's fixed grid (padding was appended on the high side).
    const Grid& out_grid = fixed.grid();
    std::vector<double> comps(3 * out_grid.count());
    for (int64_t k = 0; k < out_grid.dims.nz; ++k)
        for (int64_t j = 0; j < out_grid.dims.ny; ++j)
            for (int64_t i = 0; i < out_grid.dims.nx; ++i) {
                const Vec3 u = padded(i, j, k);
                const size_t idx = out_grid.index(i, j, k);
                for (int c = 0; c < 3; ++c) comps[3 * idx + static_cast<size_t>(c)] = u[static_cast<size_t>(c)];
            }
    report.field = DisplacementField(out_grid, std::move(comps));
    finish_report(report, start);
    return report;
}

} // namespace defreg
