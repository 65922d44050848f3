#include <doctest.h>

#include <cmath>

#include "defreg/error.hpp"
#include "defreg/loss.hpp"
#include "defreg/model.hpp"
#include "oracles.hpp"

using namespace defreg;

TEST_CASE("adam_step first step") {
    std::vector<double> p(5, 0.25);
    const std::vector<double> g(5, 1.0);
    AdamState s(5, 1e-4);
    adam_step(p, g, s);
    CHECK(s.t == 1);
    for (double x : p) CHECK(x == doctest::Approx(0.25 - 1e-4 / (1.0 + 1e-8)).epsilon(1e-15));

    std::vector<double> q(3, -2.0);
    AdamState z(3, 1e-4);
    adam_step(q, std::vector<double>(3, 0.0), z);
    for (double x : q) CHECK(x == -2.0);
}

TEST_CASE("adam_step follows the published recurrence") {
    const double alpha = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const std::vector<double> grads{0.5, -1.25, 3.0, 0.0, 2.0};
    double theta = 1.0, m = 0.0, v = 0.0;
    std::vector<double> p{1.0};
    AdamState s(1, alpha);
    for (size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, static_cast<double>(t)));
        const double vh = v / (1 - std::pow(b2, static_cast<double>(t)));
        theta -= alpha * mh / (std::sqrt(vh) + eps);
        adam_step(p, std::vector<double>{g}, s);
        CHECK(p[0] == doctest::Approx(theta).epsilon(1e-13));
    }
    CHECK(s.t == 5);
}

TEST_CASE("adam step size approaches the learning rate under constant gradients") {
    for (double g : {1e-3, 1.0, 250.0}) {
        std::vector<double> p{0.0};
        AdamState s(1, 1e-4);
        double before = 0.0;
        for (int t = 0; t < 50; ++t) {
            before = p[0];
            adam_step(p, std::vector<double>{g}, s);
        }
        CHECK(std::abs(std::abs(p[0] - before) - 1e-4) <= 1e-6);
    }
}

TEST_CASE("adam_step rejects mismatched shapes") {
    std::vector<double> p(3, 0.0);
    AdamState s(3, 1e-3);
    CHECK_THROWS_AS(adam_step(p, std::vector<double>(2, 0.0), s), ValidationError);
    AdamState wrong(4, 1e-3);
    CHECK_THROWS_AS(adam_step(p, std::vector<double>(3, 0.0), wrong), ValidationError);
}

TEST_CASE("freeform parameterization is the identity") {
    const auto g = oracle::cube(4);
    FreeFormModel zero{DisplacementField(g)};
    for (double x : freeform_apply(zero).components()) CHECK(x == 0.0);
    CHECK(freeform_apply(zero).components().size() == 3 * g.count());

    const FreeFormModel c{DisplacementField::constant(g, {1, 2, 3})};
    for (size_t i = 0; i < g.count(); ++i) CHECK(freeform_apply(c)[i] == Vec3{1, 2, 3});

    // The parameter gradient is the field gradient, bit for bit.
    const auto f = oracle::random_volume(g, 1), m = oracle::random_volume(g, 2);
    const FreeFormModel model{oracle::random_field(g, 3, 1.0)};
    const auto direct = overall_loss(f, m, model.field, LossConfig{});
    const auto via = overall_loss(f, m, freeform_apply(model), LossConfig{});
    CHECK(direct.grad == via.grad);
    CHECK(&freeform_apply(model) == &model.field);
}
