#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "defreg/error.hpp"
#include "defreg/register.hpp"
#include "defreg/synth.hpp"
#include "oracles.hpp"

using namespace defreg;

namespace {

SynthCase synth_case(int64_t n, double max_disp, uint64_t seed) {
    SynthConfig cfg;
    cfg.dims = {n, n, n};
    cfg.seed = seed;
    cfg.max_displacement = max_disp;
    cfg.noise_sigma = 0.0;
    return generate_case(cfg);
}

double max_norm(const DisplacementField& u) {
    double m = 0;
    for (size_t i = 0; i < u.size(); ++i) m = std::max(m, norm(u[i]));
    return m;
}

// Mean |a - b| over every grid point.
double mean_distance(const DisplacementField& a, const DisplacementField& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += norm(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

double final_total(const Volume& fixed, const Volume& moving, const RegistrationReport& r, const LossConfig& lc) {
    return overall_loss(zscore_normalize(fixed), zscore_normalize(moving), r.field, lc).value.total;
}

} // namespace

TEST_CASE("downsample_volume") {
    const auto five = downsample_volume(Volume::filled(oracle::cube(2), 5.0));
    CHECK(five.dims() == Dims{1, 1, 1});
    CHECK(five[0] == 5.0);

    const auto pair = downsample_volume(Volume(Grid{{2, 1, 1}}, {0.0, 2.0}));
    CHECK(pair.dims() == Dims{1, 1, 1});
    CHECK(pair[0] == 1.0);

    // Ramp in world x stays the same ramp in world x after downsampling.
    std::vector<double> ramp(64);
    const auto g = oracle::cube(4);
    for (int64_t k = 0; k < 4; ++k)
        for (int64_t j = 0; j < 4; ++j)
            for (int64_t i = 0; i < 4; ++i) ramp[g.index(i, j, k)] = 3.0 * static_cast<double>(i) - 1.0;
    const auto half = downsample_volume(Volume(g, ramp));
    CHECK(half.dims() == Dims{2, 2, 2});
    CHECK(half.spacing() == Vec3{2, 2, 2});
    for (int64_t k = 0; k < 2; ++k)
        for (int64_t j = 0; j < 2; ++j)
            for (int64_t i = 0; i < 2; ++i) CHECK(half(i, j, k) == doctest::Approx(3.0 * half.grid().world(i, j, k)[0] - 1.0));

    const auto odd = downsample_volume(Volume(Grid{{3, 1, 1}}, {1.0, 3.0, 8.0}));
    CHECK(odd.dims() == Dims{2, 1, 1});
    CHECK(odd[0] == 2.0);
    CHECK(odd[1] == 8.0);

    CHECK_THROWS_AS(downsample_volume(Volume::filled(oracle::cube(1), 1.0)), ValidationError);

    // Block means preserve the overall mean on even grids.
    const auto v = oracle::random_volume(Grid{{8, 6, 4}}, 3);
    CHECK(volume_mean(downsample_volume(v)) == doctest::Approx(volume_mean(v)).epsilon(1e-12));
}

TEST_CASE("pad_to_multiple replicates the high edge") {
    const auto v = oracle::random_volume(Grid{{5, 4, 3}}, 1);
    const auto p = pad_to_multiple(v, 4);
    CHECK(p.dims() == Dims{8, 4, 4});
    CHECK(p.spacing() == v.spacing());
    for (int64_t k = 0; k < 4; ++k)
        for (int64_t j = 0; j < 4; ++j)
            for (int64_t i = 0; i < 8; ++i) CHECK(p(i, j, k) == v(std::min<int64_t>(i, 4), j, std::min<int64_t>(k, 2)));
    CHECK(pad_to_multiple(v, 1) == v);
}

TEST_CASE("identity pair stays at zero") {
    const auto c = synth_case(32, 3.0, 4);
    const auto r = register_pair(c.fixed, c.fixed, RegistrationConfig{});
    CHECK(max_norm(r.field) < 0.05);
    CHECK(ncc(c.fixed, warp_volume(c.fixed, r.field), LossConfig{}) > 0.999);
}

TEST_CASE("zero iterations return the zero field and the initial loss") {
    const auto c = synth_case(16, 2.0, 1);
    RegistrationConfig cfg;
    cfg.iterations_per_level = 0;
    const auto r = register_pair(c.fixed, c.moving, cfg);
    CHECK(max_norm(r.field) == 0.0);
    CHECK(r.iterations == 0);
    REQUIRE(r.levels.size() == 3);
    for (const auto& l : r.levels) {
        CHECK(l.losses.size() == 1);
        CHECK(l.iterations == 0);
    }
    CHECK(r.levels.back().losses[0].total ==
          doctest::Approx(final_total(c.fixed, c.moving, r, cfg.loss)).epsilon(1e-12));
}

TEST_CASE("trace shape, best iterate and determinism") {
    const auto c = synth_case(24, 3.0, 2);
    RegistrationConfig cfg;
    cfg.iterations_per_level = 40;
    const auto a = register_pair(c.fixed, c.moving, cfg);

    REQUIRE(a.levels.size() == 3);
    CHECK(a.levels[0].dims == Dims{6, 6, 6});
    CHECK(a.levels[2].dims == Dims{24, 24, 24});
    int64_t total = 0;
    for (const auto& l : a.levels) {
        CHECK(l.losses.size() == static_cast<size_t>(l.iterations) + 1);
        total += l.iterations;
        double best = l.losses[0].total;
        for (const auto& v : l.losses) {
            const double next = std::min(best, v.total);
            CHECK(next <= best);
            best = next;
            CHECK(v.total == doctest::Approx(v.similarity + cfg.loss.reg_weight * v.smoothness).epsilon(1e-12));
        }
    }
    CHECK(total == a.iterations);
    CHECK(a.stop_reason == a.levels.back().stop);

    // Returned field is the lowest-loss iterate of the finest level.
    const auto& fine = a.levels.back().losses;
    const double best = std::min_element(fine.begin(), fine.end(), [](auto& x, auto& y) { return x.total < y.total; })->total;
    CHECK(final_total(c.fixed, c.moving, a, cfg.loss) == doctest::Approx(best).epsilon(1e-12));

    const auto b = register_pair(c.fixed, c.moving, cfg);
    CHECK(a.field == b.field);
    REQUIRE(a.levels.size() == b.levels.size());
    for (size_t l = 0; l < a.levels.size(); ++l) CHECK(a.levels[l].losses == b.levels[l].losses);
}

TEST_CASE("wall-clock budget") {
    const auto c = synth_case(48, 5.0, 3);
    RegistrationConfig cfg;
    cfg.pyramid_levels = 1;
    cfg.convergence_tol = 0.0;
    cfg.iterations_per_level = 10;
    const auto probe = register_pair(c.fixed, c.moving, cfg);
    const double per_iteration = probe.wall_seconds / static_cast<double>(probe.iterations);

    cfg.iterations_per_level = 1000000;
    cfg.max_seconds = 0.5;
    const auto r = register_pair(c.fixed, c.moving, cfg);
    CHECK(r.stop_reason == StopReason::budget);
    CHECK(r.wall_seconds - *cfg.max_seconds <= per_iteration);

    cfg.max_seconds = 0.0;
    const auto none = register_pair(c.fixed, c.moving, cfg);
    CHECK(none.stop_reason == StopReason::budget);
    CHECK(none.iterations == 0);
    CHECK(max_norm(none.field) == 0.0);
}

TEST_CASE("stronger regularization never roughens the field") {
    const auto c = synth_case(32, 4.0, 5);
    double previous = std::numeric_limits<double>::infinity();
    for (double lambda : {0.1, 1.0, 10.0}) {
        RegistrationConfig cfg;
        cfg.loss.reg_weight = lambda;
        const auto r = register_pair(c.fixed, c.moving, cfg);
        const double s = smoothness_loss(r.field).value;
        MESSAGE("lambda " << lambda << " smoothness " << s);
        CHECK(s <= previous);
        previous = s;
    }
}

TEST_CASE("pyramid beats a single level at equal iteration budget") {
    const auto c = synth_case(48, 8.0, 6);
    RegistrationConfig multi;
    multi.convergence_tol = 0.0;
    multi.iterations_per_level = 100;
    RegistrationConfig single = multi;
    single.pyramid_levels = 1;
    single.iterations_per_level = 300;
    const double l3 = final_total(c.fixed, c.moving, register_pair(c.fixed, c.moving, multi), multi.loss);
    const double l1 = final_total(c.fixed, c.moving, register_pair(c.fixed, c.moving, single), single.loss);
    MESSAGE("3-level " << l3 << " single " << l1);
    CHECK(l3 <= l1);
}

TEST_CASE("recovers a known synthetic deformation") {
    const auto c = synth_case(48, 5.0, 0);
    RegistrationConfig cfg;
    cfg.loss.reg_weight = 0.01;
    const auto r = register_pair(c.fixed, c.moving, cfg);
    const double before = mean_distance(DisplacementField(c.true_field.grid()), c.true_field);
    const double after = mean_distance(r.field, c.true_field);
    MESSAGE("grid-point error " << before << " -> " << after);
    CHECK(after <= 0.3 * before);
}

TEST_CASE("convnet mode") {
    const auto c = synth_case(12, 2.0, 7);
    auto cfg = RegistrationConfig::defaults(Mode::convnet);
    cfg.net = ConvNetConfig{2, 4, true};
    cfg.iterations_per_level = 5;
    const auto r = register_pair(c.fixed, c.moving, cfg);
    CHECK(r.padded_dims == Dims{12, 12, 12});
    CHECK(r.field.grid() == c.fixed.grid());
    REQUIRE(r.network.has_value());
    CHECK(r.levels.size() == 1);
    CHECK(r.levels[0].losses.size() == 6);

    // Zero head: the first evaluation is the loss of the zero field.
    auto ff = RegistrationConfig::defaults(Mode::freeform);
    ff.pyramid_levels = 1;
    ff.iterations_per_level = 0;
    CHECK(register_pair(c.fixed, c.moving, ff).levels[0].losses[0] == r.levels[0].losses[0]);

    // 10 is not a multiple of 2^3: padded for the network, cropped back afterwards.
    const auto v = oracle::random_volume(Grid{{10, 8, 9}}, 1);
    const auto w = oracle::random_volume(Grid{{10, 8, 9}}, 2);
    cfg.net = ConvNetConfig{3, 2, true};
    cfg.iterations_per_level = 2;
    const auto padded = register_pair(v, w, cfg);
    CHECK(padded.padded_dims == Dims{16, 8, 16});
    CHECK(padded.input_dims == Dims{10, 8, 9});
    CHECK(padded.field.grid() == v.grid());
}

TEST_CASE("register validation") {
    const auto a = oracle::random_volume(oracle::cube(8), 1);
    const auto b = oracle::random_volume(oracle::cube(6), 2);
    CHECK_THROWS_AS(register_pair(a, b, RegistrationConfig{}), ValidationError);

    RegistrationConfig cfg;
    cfg.pyramid_levels = 0;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);
    cfg = RegistrationConfig{};
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);
    cfg = RegistrationConfig{};
    cfg.iterations_per_level = -1;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);
    cfg = RegistrationConfig{};
    cfg.loss.ncc_window = 4;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);
    cfg = RegistrationConfig{};
    cfg.pyramid_levels = 4;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);
    cfg = RegistrationConfig{};
    cfg.max_seconds = -1.0;
    CHECK_THROWS_AS(register_pair(a, a, cfg), ValidationError);

    CHECK(parse_mode("convnet") == Mode::convnet);
    CHECK_THROWS_AS(parse_mode("affine"), ValidationError);
    CHECK(to_string(StopReason::converged) == "converged");
}
