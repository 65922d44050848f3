#include "defreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "defreg/error.hpp"
#include "defreg/parallel.hpp"
#include "defreg/random.hpp"
#include "raw_io.hpp"

namespace defreg {

namespace {

constexpr int kInverseIterations = 20;
constexpr double kInverseTolerance = 1e-3;  // voxels
constexpr int kFoldRetries = 8;
// Largest Frobenius norm of grad u accepted; keeps x -> y - u(x) a contraction.
constexpr double kMaxGradient = 0.5;

struct Blob {
    Vec3 center;
    double sigma;
    double amplitude;
};

struct Bump {
    Vec3 center;
    double radius;
    Vec3 direction;
};

double intensity(const std::vector<Blob>& blobs, const Vec3& p) {
    double s = 0.0;
    for (const auto& b : blobs) {
        const Vec3 d = p - b.center;
        const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        s += b.amplitude * std::exp(-0.5 * r2 / (b.sigma * b.sigma));
    }
    return s;
}

// Sum of compactly supported (1 - r^2/R^2)^3 vector bumps, times `scale`.
Vec3 displacement(const std::vector<Bump>& bumps, double scale, const Vec3& p) {
    Vec3 u{0.0, 0.0, 0.0};
    for (const auto& b : bumps) {
        const Vec3 d = p - b.center;
        const double q = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (b.radius * b.radius);
        if (q >= 1.0) continue;
        const double w = (1.0 - q) * (1.0 - q) * (1.0 - q);
        u = u + (scale * w) * b.direction;
    }
    return u;
}

// Max over voxels of |grad u|_F, central differences inside and one-sided on faces.
double max_gradient_norm(const DisplacementField& u) {
    const Grid& g = u.grid();
    const Dims& d = g.dims;
    double worst = 0.0;
    for (int64_t k = 0; k < d.nz; ++k)
        for (int64_t j = 0; j < d.ny; ++j)
            for (int64_t i = 0; i < d.nx; ++i) {
                const int64_t p[3] = {i, j, k};
                double sq = 0.0;
                for (int a = 0; a < 3; ++a) {
                    int64_t lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    lo[a] = std::max<int64_t>(p[a] - 1, 0);
                    hi[a] = std::min<int64_t>(p[a] + 1, d[a] - 1);
                    const double h = static_cast<double>(hi[a] - lo[a]) * g.spacing[a];
                    const Vec3 diff = u(hi[0], hi[1], hi[2]) - u(lo[0], lo[1], lo[2]);
                    for (int c = 0; c < 3; ++c) sq += diff[c] * diff[c] / (h * h);
                }
                worst = std::max(worst, std::sqrt(sq));
            }
    return worst;
}

Vec3 extent(const SynthConfig& cfg) {
    return {static_cast<double>(cfg.dims.nx - 1) * cfg.spacing[0], static_cast<double>(cfg.dims.ny - 1) * cfg.spacing[1],
            static_cast<double>(cfg.dims.nz - 1) * cfg.spacing[2]};
}

Vec3 random_point(SplitMix64& rng, const Vec3& ext, double lo, double hi) {
    return {rng.uniform(lo, hi) * ext[0], rng.uniform(lo, hi) * ext[1], rng.uniform(lo, hi) * ext[2]};
}

Vec3 random_direction(SplitMix64& rng) {
    for (;;) {
        const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = norm(v);
        if (n > 1e-6) return (1.0 / n) * v;
    }
}

} // namespace

void SynthConfig::validate() const {
    Grid{dims, spacing, {0, 0, 0}}.validate();
    if (dims.nx < 2 || dims.ny < 2 || dims.nz < 2) throw ValidationError("synth dims must be >= 2 per axis");
    if (num_blobs < 1 || field_bumps < 1 || num_landmarks < 1) throw ValidationError("synth counts must be positive");
    if (!(max_displacement >= 0.0) || !std::isfinite(max_displacement)) throw ValidationError("max_displacement must be >= 0");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ValidationError("noise_sigma must be >= 0");
}

Dims oracle_margin(const SynthConfig& cfg) {
    auto m = [&](int a) { return static_cast<int64_t>(std::ceil(cfg.max_displacement / cfg.spacing[a])); };
    return {m(0), m(1), m(2)};
}

SynthCase generate_case(const SynthConfig& cfg) {
    cfg.validate();
    SplitMix64 root(cfg.seed);
    SplitMix64 blob_rng = root.split();
    SplitMix64 field_rng = root.split();
    SplitMix64 landmark_rng = root.split();
    SplitMix64 noise_rng = root.split();
    SplitMix64 cavity_rng = root.split();

    const Grid grid{cfg.dims, cfg.spacing, {0.0, 0.0, 0.0}};
    const Vec3 ext = extent(cfg);
    const double min_ext = std::min({ext[0], ext[1], ext[2]});
    const size_t n = grid.count();

    std::vector<Blob> blobs;
    for (int b = 0; b < cfg.num_blobs; ++b) {
        Blob blob;
        blob.center = random_point(blob_rng, ext, 0.1, 0.9);
        blob.sigma = blob_rng.uniform(0.1, 0.25) * min_ext;
        blob.amplitude = blob_rng.uniform(0.5, 1.5) * (blob_rng.uniform() < 0.3 ? -1.0 : 1.0);
        blobs.push_back(blob);
    }

    std::vector<Bump> bumps;
    for (int b = 0; b < cfg.field_bumps; ++b) {
        Bump bump;
        bump.center = random_point(field_rng, ext, 0.3, 0.7);
        bump.radius = field_rng.uniform(0.25, 0.4) * min_ext;
        bump.direction = random_direction(field_rng);
        bumps.push_back(bump);
    }

    // Scale to the requested peak magnitude; widen the bumps while the field folds or is
    // too steep for the fixed-point inverse below.
    DisplacementField true_field(grid);
    double scale = 0.0;
    for (int attempt = 0;; ++attempt) {
        DisplacementField unit(grid);
        double peak = 0.0;
        for (int64_t k = 0; k < cfg.dims.nz; ++k)
            for (int64_t j = 0; j < cfg.dims.ny; ++j)
                for (int64_t i = 0; i < cfg.dims.nx; ++i) {
                    const Vec3 u = displacement(bumps, 1.0, grid.world(i, j, k));
                    unit.set(grid.index(i, j, k), u);
                    peak = std::max(peak, norm(u));
                }
        scale = (peak > 0.0 && cfg.max_displacement > 0.0) ? cfg.max_displacement / peak : 0.0;
        std::vector<double> comps(unit.components().begin(), unit.components().end());
        for (auto& c : comps) c *= scale;
        true_field = DisplacementField(grid, std::move(comps));

        const auto jac = jacobian_determinant(true_field);
        if (*std::min_element(jac.data.begin(), jac.data.end()) > 0.0 && max_gradient_norm(true_field) < kMaxGradient)
            break;
        if (attempt + 1 >= kFoldRetries) {
            throw ValidationError("max_displacement " + std::to_string(cfg.max_displacement) +
                                  " is too large for the grid even after widening the field bumps");
        }
        for (auto& b : bumps) b.radius *= 1.25;
    }

    // fixed: blob sum, z-scored with the statistics of the grid samples.
    std::vector<double> raw(n);
    for (int64_t k = 0; k < cfg.dims.nz; ++k)
        for (int64_t j = 0; j < cfg.dims.ny; ++j)
            for (int64_t i = 0; i < cfg.dims.nx; ++i) raw[grid.index(i, j, k)] = intensity(blobs, grid.world(i, j, k));
    const double mean = deterministic_sum(n, [&](size_t i) { return raw[i]; }) / static_cast<double>(n);
    const double var =
        deterministic_sum(n, [&](size_t i) { return (raw[i] - mean) * (raw[i] - mean); }) / static_cast<double>(n);
    const double inv_sd = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
    std::vector<double> fixed_data(n);
    for (size_t i = 0; i < n; ++i) fixed_data[i] = (raw[i] - mean) * inv_sd;

    // moving(y) = fixed(x) where x + u(x) = y; x found by fixed-point iteration on the analytic field.
    std::vector<double> moving_data(n);
    const double min_spacing = std::min({cfg.spacing[0], cfg.spacing[1], cfg.spacing[2]});
    double worst_residual = 0.0;
    for (int64_t k = 0; k < cfg.dims.nz; ++k)
        for (int64_t j = 0; j < cfg.dims.ny; ++j)
            for (int64_t i = 0; i < cfg.dims.nx; ++i) {
                const Vec3 y = grid.world(i, j, k);
                Vec3 x = y;
                for (int it = 0; it < kInverseIterations; ++it) x = y - displacement(bumps, scale, x);
                worst_residual = std::max(worst_residual, norm(x + displacement(bumps, scale, x) - y));
                moving_data[grid.index(i, j, k)] = (intensity(blobs, x) - mean) * inv_sd;
            }
    if (worst_residual > kInverseTolerance * min_spacing) {
        throw ValidationError("synthetic field inversion did not converge (residual " + std::to_string(worst_residual) + " mm)");
    }

    if (cfg.cavity) {
        const Vec3 center = random_point(cavity_rng, ext, 0.35, 0.65);
        const double radius = 0.12 * min_ext;
        const double rim = 1.5 * min_spacing;
        for (int64_t k = 0; k < cfg.dims.nz; ++k)
            for (int64_t j = 0; j < cfg.dims.ny; ++j)
                for (int64_t i = 0; i < cfg.dims.nx; ++i) {
                    const double r = norm(grid.world(i, j, k) - center);
                    auto& v = moving_data[grid.index(i, j, k)];
                    if (r < radius) {
                        v = 0.0;
                    } else if (r < radius + rim) {
                        v += 1.0;
                    }
                }
    }
    if (cfg.noise_sigma > 0.0) {
        for (auto& v : moving_data) v += cfg.noise_sigma * noise_rng.normal();
    }

    // Landmarks on distinct interior grid nodes.
    const Dims margin = oracle_margin(cfg);
    int64_t lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(margin[a] + 1, (cfg.dims[a] - 1) / 2);
        hi[a] = std::max(cfg.dims[a] - 1 - lo[a], lo[a]);
    }
    const int64_t available = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    if (available < cfg.num_landmarks) throw ValidationError("grid too small for the requested landmark count");
    std::set<size_t> used;
    std::vector<Landmark> fixed_lms, moving_lms;
    while (static_cast<int>(fixed_lms.size()) < cfg.num_landmarks) {
        int64_t ijk[3];
        for (int a = 0; a < 3; ++a) ijk[a] = lo[a] + static_cast<int64_t>(landmark_rng.below(static_cast<uint64_t>(hi[a] - lo[a] + 1)));
        const size_t idx = grid.index(ijk[0], ijk[1], ijk[2]);
        if (!used.insert(idx).second) continue;
        const int64_t id = static_cast<int64_t>(fixed_lms.size()) + 1;
        const Vec3 p = grid.world(ijk[0], ijk[1], ijk[2]);
        fixed_lms.push_back({id, p});
        moving_lms.push_back({id, p + true_field[idx]});
    }

    return SynthCase{Volume(grid, std::move(fixed_data)), Volume(grid, std::move(moving_data)), std::move(true_field),
                     LandmarkSet(std::move(fixed_lms)), LandmarkSet(std::move(moving_lms))};
}

double oracle_error(const DisplacementField& field, const DisplacementField& true_field, const Dims& margin) {
    if (!(field.dims() == true_field.dims())) throw ValidationError("oracle_error: dims mismatch");
    const Dims& d = field.dims();
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t k = margin.nz; k < d.nz - margin.nz; ++k)
        for (int64_t j = margin.ny; j < d.ny - margin.ny; ++j)
            for (int64_t i = margin.nx; i < d.nx - margin.nx; ++i) {
                const size_t idx = field.grid().index(i, j, k);
                sum += norm(field[idx] - true_field[idx]);
                ++count;
            }
    if (count == 0) throw ValidationError("oracle_error: margin leaves no interior voxels");
    return sum / static_cast<double>(count);
}

nlohmann::json synth_config_to_json(const SynthConfig& cfg) {
    return {{"dims", {cfg.dims.nx, cfg.dims.ny, cfg.dims.nz}},
            {"spacing", {cfg.spacing[0], cfg.spacing[1], cfg.spacing[2]}},
            {"seed", cfg.seed},
            {"num_blobs", cfg.num_blobs},
            {"field_bumps", cfg.field_bumps},
            {"max_displacement", cfg.max_displacement},
            {"num_landmarks", cfg.num_landmarks},
            {"noise_sigma", cfg.noise_sigma},
            {"cavity", cfg.cavity}};
}

void write_case(const SynthCase& c, const SynthConfig& cfg, const std::filesystem::path& dir) {
    save_volume(c.fixed, dir / "fixed.vol");
    save_volume(c.moving, dir / "moving.vol");
    save_field(c.true_field, dir / "true_field.dfield");
    save_landmarks(c.fixed_landmarks, dir / "fixed_landmarks.csv");
    save_landmarks(c.moving_landmarks, dir / "moving_landmarks.csv");

    nlohmann::json manifest;
    manifest["config"] = synth_config_to_json(cfg);
    manifest["files"] = {{"fixed", "fixed.vol"},
                         {"moving", "moving.vol"},
                         {"true_field", "true_field.dfield"},
                         {"fixed_landmarks", "fixed_landmarks.csv"},
                         {"moving_landmarks", "moving_landmarks.csv"}};
    const auto path = dir / "manifest.json";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << manifest.dump(2) << '\n';
}

} // namespace defreg
