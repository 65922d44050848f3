#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "defreg/error.hpp"
#include "defreg/volume.hpp"
#include "oracles.hpp"

using namespace defreg;

namespace {

Volume line(std::vector<double> values) {
    const auto n = static_cast<int64_t>(values.size());
    return Volume(Grid{{n, 1, 1}}, std::move(values));
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double mean_of(const Volume& v) {
    double s = 0;
    for (double x : v.data()) s += x;
    return s / static_cast<double>(v.size());
}

double pop_std(const Volume& v) {
    const double m = mean_of(v);
    double s = 0;
    for (double x : v.data()) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

} // namespace

TEST_CASE("volume construction enforces invariants") {
    CHECK_THROWS_AS(Volume(Grid{{2, 2, 2}}, std::vector<double>(7)), ValidationError);
    CHECK_THROWS_AS(Volume(Grid{{1, 1, 1}}, std::vector<double>{NAN}), ValidationError);
    CHECK_THROWS_AS(Volume(Grid{{1, 1, 1}, {0.0, 1.0, 1.0}}, std::vector<double>{1.0}), ValidationError);
}

TEST_CASE("load and save raw volumes") {
    const auto dir = oracle::temp_dir("volume_io");

    SUBCASE("2x2x2 values 0..7 round-trip in x-fastest order") {
        std::vector<double> vals{0, 1, 2, 3, 4, 5, 6, 7};
        const Volume v(Grid{{2, 2, 2}}, vals);
        save_volume(v, dir / "a.vol");
        CHECK(std::filesystem::file_size(dir / "a.vol") == 32);
        const auto back = load_volume(dir / "a.vol");
        CHECK(std::vector<double>(back.data().begin(), back.data().end()) == vals);
        CHECK(back(1, 0, 0) == 1.0);
        CHECK(back(0, 1, 0) == 2.0);
        CHECK(back(0, 0, 1) == 4.0);
    }

    SUBCASE("payload shorter than the header implies is a length mismatch") {
        const Volume v(Grid{{3, 3, 3}}, std::vector<double>(27, 1.0));
        save_volume(v, dir / "b.vol");
        std::filesystem::resize_file(dir / "b.vol", 26 * 4);
        CHECK_THROWS_AS(load_volume(dir / "b.vol"), FormatError);
    }

    SUBCASE("missing files") {
        CHECK_THROWS_AS(load_volume(dir / "nope.vol"), IoError);
        const Volume v(Grid{{1, 1, 1}}, std::vector<double>{1.0});
        save_volume(v, dir / "c.vol");
        std::filesystem::remove(dir / "c.vol");
        CHECK_THROWS_AS(load_volume(dir / "c.vol"), IoError);
    }

    SUBCASE("non-finite payload is rejected on load") {
        const Volume v(Grid{{2, 1, 1}}, std::vector<double>{1.0, 2.0});
        save_volume(v, dir / "d.vol");
        std::fstream f(dir / "d.vol", std::ios::in | std::ios::out | std::ios::binary);
        const float bad = NAN;
        f.write(reinterpret_cast<const char*>(&bad), 4);
        f.close();
        CHECK_THROWS_AS(load_volume(dir / "d.vol"), FormatError);
    }

    SUBCASE("sidecar carries the documented fields") {
        const Volume v(Grid{{2, 3, 4}, {0.5, 1.0, 2.0}, {1.0, -2.0, 3.0}}, std::vector<double>(24, 0.0));
        save_volume(v, dir / "e.vol");
        std::ifstream in(dir / "e.vol.json");
        const auto j = nlohmann::json::parse(in);
        CHECK(j["dims"] == nlohmann::json({2, 3, 4}));
        CHECK(j["spacing"] == nlohmann::json({0.5, 1.0, 2.0}));
        CHECK(j["origin"] == nlohmann::json({1.0, -2.0, 3.0}));
        CHECK(j["dtype"] == "f32le");
        CHECK(load_volume(dir / "e.vol").grid() == v.grid());
    }

    SUBCASE("random f32-valued volumes round-trip bit-exactly") {
        for (uint64_t seed = 0; seed < 5; ++seed) {
            const auto g = oracle::cube(seed % 2 == 0 ? 8 : 16);
            const auto v = oracle::random_f32_volume(g, seed);
            save_volume(v, dir / "r.vol");
            CHECK(std::filesystem::file_size(dir / "r.vol") == 4 * g.count());
            CHECK(load_volume(dir / "r.vol") == v);
        }
    }
}

TEST_CASE("center_crop") {
    const auto v = oracle::random_volume(oracle::cube(4), 3);
    CHECK(center_crop(v, {4, 4, 4}) == v);

    const auto five = center_crop(line({0, 1, 2, 3, 4}), {3, 1, 1});
    CHECK(std::vector<double>(five.data().begin(), five.data().end()) == std::vector<double>{1, 2, 3});

    const auto six = center_crop(line({0, 1, 2, 3, 4, 5}), {3, 1, 1});
    CHECK(std::vector<double>(six.data().begin(), six.data().end()) == std::vector<double>{1, 2, 3});
    CHECK(six.origin()[0] == 1.0);
    CHECK(six.spacing() == line({0}).spacing());

    CHECK_THROWS_AS(center_crop(v, {5, 4, 4}), ValidationError);
}

TEST_CASE("zscore_normalize") {
    const auto two = zscore_normalize(line({0, 2}));
    CHECK(two[0] == doctest::Approx(-1.0));
    CHECK(two[1] == doctest::Approx(1.0));

    const auto flat = zscore_normalize(Volume(Grid{{2, 2, 1}}, std::vector<double>(4, 5.0)));
    for (double x : flat.data()) CHECK(x == 0.0);

    const auto flat_odd = zscore_normalize(Volume(Grid{{7, 3, 1}}, std::vector<double>(21, 0.1)));
    for (double x : flat_odd.data()) CHECK(x == 0.0);

    for (uint64_t seed = 0; seed < 4; ++seed) {
        const auto v = oracle::random_volume(oracle::cube(8), seed, -3.0, 11.0);
        const auto z = zscore_normalize(v);
        CHECK(std::abs(mean_of(z)) < 1e-6);
        CHECK(std::abs(pop_std(z) - 1.0) < 1e-6);

        // Idempotent.
        const auto zz = zscore_normalize(z);
        for (size_t i = 0; i < z.size(); ++i) CHECK(std::abs(zz[i] - z[i]) <= 1e-6);

        // Invariant under positive affine intensity maps.
        std::vector<double> scaled(v.data().begin(), v.data().end());
        for (auto& x : scaled) x = 3.7 * x - 12.0;
        const auto za = zscore_normalize(Volume(v.grid(), scaled));
        for (size_t i = 0; i < z.size(); ++i) CHECK(std::abs(za[i] - z[i]) <= 1e-6);
    }
}

TEST_CASE("export_slice writes rescaled binary PGM") {
    const auto dir = oracle::temp_dir("slices");
    const Volume v(Grid{{2, 2, 1}}, std::vector<double>{0, 1, 2, 3});
    export_slice(v, Axis::z, 0, dir / "s.pgm");
    const auto bytes = read_bytes(dir / "s.pgm");
    const std::string header = "P5\n2 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 3) == "P5\n");
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
    CHECK(std::vector<unsigned char>(bytes.end() - 4, bytes.end()) == std::vector<unsigned char>{0, 85, 170, 255});

    const Volume flat(Grid{{3, 2, 2}}, std::vector<double>(12, -4.0));
    export_slice(flat, Axis::y, 1, dir / "flat.pgm");
    const auto fb = read_bytes(dir / "flat.pgm");
    for (size_t i = fb.size() - 6; i < fb.size(); ++i) CHECK(fb[i] == 128);

    CHECK_THROWS_AS(export_slice(v, Axis::z, 1, dir / "bad.pgm"), ValidationError);
    CHECK_THROWS_AS(export_slice(v, Axis::x, -1, dir / "bad.pgm"), ValidationError);
}
