#include "defreg/loss.hpp"

#include <cmath>
#include <vector>

#include "defreg/error.hpp"
#include "defreg/parallel.hpp"

namespace defreg {

void LossConfig::validate() const {
    if (ncc_window < 1 || ncc_window % 2 == 0) throw ValidationError("ncc_window must be odd and >= 1");
    if (!(reg_weight >= 0.0) || !std::isfinite(reg_weight)) throw ValidationError("reg_weight must be >= 0");
    if (!(variance_floor > 0.0) || !std::isfinite(variance_floor)) throw ValidationError("variance_floor must be > 0");
}

namespace {

// In-place moving-sum box filter along one axis; windows are clipped at the borders.
void box_axis(std::vector<double>& data, const Dims& d, int axis, int64_t radius) {
    const int64_t n = d[axis];
    const int64_t stride = axis == 0 ? 1 : (axis == 1 ? d.nx : d.nx * d.ny);
    const int64_t lines = d.count() / n;
    const int64_t a1 = axis == 0 ? d.ny : d.nx;  // enumerate line starts over the two other axes

#pragma omp parallel
    {
        std::vector<double> line(static_cast<size_t>(n));
#pragma omp for schedule(static)
        for (int64_t l = 0; l < lines; ++l) {
            int64_t base = 0;
            if (axis == 0) {
                base = l * d.nx;
            } else if (axis == 1) {
                base = (l % a1) + (l / a1) * d.nx * d.ny;
            } else {
                base = l;
            }
            for (int64_t t = 0; t < n; ++t) line[t] = data[base + t * stride];
            double acc = 0.0;
            for (int64_t t = 0; t <= std::min(radius, n - 1); ++t) acc += line[t];
            for (int64_t t = 0; t < n; ++t) {
                data[base + t * stride] = acc;
                const int64_t add = t + radius + 1;
                const int64_t drop = t - radius;
                if (add < n) acc += line[add];
                if (drop >= 0) acc -= line[drop];
            }
        }
    }
}

std::vector<double> box_sum(std::vector<double> data, const Dims& d, int64_t radius) {
    for (int axis = 0; axis < 3; ++axis) box_axis(data, d, axis, radius);
    return data;
}

int64_t clipped_extent(int64_t pos, int64_t n, int64_t radius) {
    return std::min(pos + radius, n - 1) - std::max(pos - radius, int64_t{0}) + 1;
}

// Per-window statistics of fixed (f) and warped (w).
struct WindowStats {
    std::vector<double> count, mean_f, mean_w, cov, var_f, var_w;
};

WindowStats window_stats(const Volume& fixed, const Volume& warped, int64_t radius) {
    const Dims& d = fixed.dims();
    const size_t n = fixed.size();
    const auto f = fixed.data();
    const auto w = warped.data();

    std::vector<double> sf(f.begin(), f.end()), sw(w.begin(), w.end()), sff(n), sww(n), sfw(n);
    for (size_t i = 0; i < n; ++i) {
        sff[i] = f[i] * f[i];
        sww[i] = w[i] * w[i];
        sfw[i] = f[i] * w[i];
    }
    sf = box_sum(std::move(sf), d, radius);
    sw = box_sum(std::move(sw), d, radius);
    sff = box_sum(std::move(sff), d, radius);
    sww = box_sum(std::move(sww), d, radius);
    sfw = box_sum(std::move(sfw), d, radius);

    WindowStats s;
    s.count.resize(n);
    s.mean_f.resize(n);
    s.mean_w.resize(n);
    s.cov.resize(n);
    s.var_f.resize(n);
    s.var_w.resize(n);
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < d.nz; ++k) {
        const int64_t ez = clipped_extent(k, d.nz, radius);
        for (int64_t j = 0; j < d.ny; ++j) {
            const int64_t ey = clipped_extent(j, d.ny, radius);
            for (int64_t i = 0; i < d.nx; ++i) {
                const size_t idx = fixed.grid().index(i, j, k);
                const double cnt = static_cast<double>(clipped_extent(i, d.nx, radius) * ey * ez);
                const double mf = sf[idx] / cnt;
                const double mw = sw[idx] / cnt;
                s.count[idx] = cnt;
                s.mean_f[idx] = mf;
                s.mean_w[idx] = mw;
                s.cov[idx] = sfw[idx] / cnt - mf * mw;
                s.var_f[idx] = std::max(sff[idx] / cnt - mf * mf, 0.0);
                s.var_w[idx] = std::max(sww[idx] / cnt - mw * mw, 0.0);
            }
        }
    }
    return s;
}

double correlation(const WindowStats& s, size_t idx, double floor) {
    const double denom = std::max(std::sqrt(s.var_f[idx] * s.var_w[idx]), floor);
    return s.cov[idx] / denom;
}

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
    if (!(a == b)) throw ValidationError(std::string(what) + ": dims mismatch");
}

// d(mean local NCC) / d(warped intensity) per voxel.
std::vector<double> ncc_intensity_gradient(const Volume& fixed, const Volume& warped, const WindowStats& s,
                                           const LossConfig& cfg) {
    const Dims& d = fixed.dims();
    const size_t n = fixed.size();
    const int64_t radius = cfg.ncc_window / 2;

    // dr_p/dw_j = A_p * f_j + B_p * w_j + C_p for every j in window p.
    std::vector<double> A(n), B(n), C(n);
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < static_cast<int64_t>(n); ++p) {
        const double cnt = s.count[p];
        const double sd = std::sqrt(s.var_f[p] * s.var_w[p]);
        if (sd < cfg.variance_floor) {
            const double inv = 1.0 / (cnt * cfg.variance_floor);
            A[p] = inv;
            B[p] = 0.0;
            C[p] = -s.mean_f[p] * inv;
        } else {
            const double inv = 1.0 / (cnt * sd);
            const double ratio = s.cov[p] / s.var_w[p];
            A[p] = inv;
            B[p] = -ratio * inv;
            C[p] = (-s.mean_f[p] + ratio * s.mean_w[p]) * inv;
        }
    }
    // Windows containing voxel j are exactly the clipped box around j.
    A = box_sum(std::move(A), d, radius);
    B = box_sum(std::move(B), d, radius);
    C = box_sum(std::move(C), d, radius);

    const auto f = fixed.data();
    const auto w = warped.data();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> g(n);
#pragma omp parallel for schedule(static)
    for (int64_t j = 0; j < static_cast<int64_t>(n); ++j) g[j] = (A[j] * f[j] + B[j] * w[j] + C[j]) * inv_n;
    return g;
}

} // namespace

double ncc(const Volume& fixed, const Volume& warped, const LossConfig& cfg) {
    cfg.validate();
    require_same_dims(fixed.dims(), warped.dims(), "ncc");
    const auto s = window_stats(fixed, warped, cfg.ncc_window / 2);
    const size_t n = fixed.size();
    return deterministic_sum(n, [&](size_t i) { return correlation(s, i, cfg.variance_floor); }) /
           static_cast<double>(n);
}

FieldLoss similarity_loss(const Volume& fixed, const Volume& moving, const DisplacementField& field,
                          const LossConfig& cfg) {
    cfg.validate();
    require_same_dims(fixed.dims(), field.dims(), "similarity_loss");

    const Grid& g = field.grid();
    const size_t n = g.count();

    // Warp and keep the sampling derivative for the chain rule.
    std::vector<double> warped_data(n);
    std::vector<Vec3> sample_grad(n);
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < g.dims.nz; ++k) {
        for (int64_t j = 0; j < g.dims.ny; ++j) {
            for (int64_t i = 0; i < g.dims.nx; ++i) {
                const size_t idx = g.index(i, j, k);
                const auto sg = sample_trilinear_gradient_voxel(moving, displaced_voxel(g, moving.grid(), i, j, k, field[idx]));
                warped_data[idx] = sg.value;
                sample_grad[idx] = sg.gradient;
            }
        }
    }
    const Volume warped(fixed.grid(), std::move(warped_data));
    const auto stats = window_stats(fixed, warped, cfg.ncc_window / 2);
    const double value =
        -deterministic_sum(n, [&](size_t i) { return correlation(stats, i, cfg.variance_floor); }) /
        static_cast<double>(n);

    const auto dncc = ncc_intensity_gradient(fixed, warped, stats, cfg);
    FieldLoss out{value, DisplacementField(g)};
    auto gc = out.grad.components();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) {
        for (int c = 0; c < 3; ++c) gc[3 * i + c] = -dncc[i] * sample_grad[i][c];
    }
    return out;
}

FieldLoss smoothness_loss(const DisplacementField& field) {
    const Grid& g = field.grid();
    const Dims& d = g.dims;
    if (d.nx < 2 || d.ny < 2 || d.nz < 2) throw ValidationError("smoothness_loss requires at least 2 voxels per axis");

    const size_t n = g.count();
    const auto u = field.components();
    const int64_t strides[3] = {1, d.nx, d.nx * d.ny};
    const double inv_n = 1.0 / static_cast<double>(n);

    auto voxel_term = [&](size_t idx) {
        const int64_t pos[3] = {static_cast<int64_t>(idx) % d.nx, (static_cast<int64_t>(idx) / d.nx) % d.ny,
                                static_cast<int64_t>(idx) / (d.nx * d.ny)};
        double s = 0.0;
        for (int a = 0; a < 3; ++a) {
            if (pos[a] + 1 >= d[a]) continue;
            const size_t nb = idx + static_cast<size_t>(strides[a]);
            for (int c = 0; c < 3; ++c) {
                const double diff = (u[3 * nb + c] - u[3 * idx + c]) / g.spacing[a];
                s += diff * diff;
            }
        }
        return s;
    };
    const double value = deterministic_sum(n, voxel_term) * inv_n;

    // Each forward difference D = (u[x+e] - u[x]) / h contributes 2 D / (h N) to u[x+e]
    // and the negative to u[x]. Gathered per voxel to keep writes disjoint.
    FieldLoss out{value, DisplacementField(g)};
    auto gc = out.grad.components();
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < d.nz; ++k) {
        for (int64_t j = 0; j < d.ny; ++j) {
            for (int64_t i = 0; i < d.nx; ++i) {
                const size_t idx = g.index(i, j, k);
                const int64_t pos[3] = {i, j, k};
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        const double h2 = g.spacing[a] * g.spacing[a];
                        if (pos[a] + 1 < d[a]) {
                            const size_t nb = idx + static_cast<size_t>(strides[a]);
                            acc -= 2.0 * (u[3 * nb + c] - u[3 * idx + c]) / h2;
                        }
                        if (pos[a] > 0) {
                            const size_t pb = idx - static_cast<size_t>(strides[a]);
                            acc += 2.0 * (u[3 * idx + c] - u[3 * pb + c]) / h2;
                        }
                    }
                    gc[3 * idx + c] = acc * inv_n;
                }
            }
        }
    }
    return out;
}

OverallLoss overall_loss(const Volume& fixed, const Volume& moving, const DisplacementField& field,
                         const LossConfig& cfg) {
    auto sim = similarity_loss(fixed, moving, field, cfg);
    auto smooth = smoothness_loss(field);

    OverallLoss out;
    out.value.similarity = sim.value;
    out.value.smoothness = smooth.value;
    out.value.total = sim.value + cfg.reg_weight * smooth.value;
    out.grad = std::move(sim.grad);
    if (cfg.reg_weight != 0.0) {
        auto gc = out.grad.components();
        const auto sc = smooth.grad.components();
        for (size_t i = 0; i < gc.size(); ++i) gc[i] += cfg.reg_weight * sc[i];
    }
    return out;
}

} // namespace defreg
