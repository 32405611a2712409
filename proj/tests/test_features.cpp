#include <cmath>

#include "doctest.h"
#include "psm/features.hpp"
#include "psm/synth.hpp"
#include "test_util.hpp"

using namespace psm;
using features::extract_features;

namespace {

enum F { Total, CopRow, CopCol, SpreadRow, SpreadCol, Active, Asym, Upper, Lower };

PressureFrame random_frame(Rng& rng, int rows, int cols, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(rows * cols));
    for (auto& x : v) x = scale * rng.uniform();
    return {0.0, rows, cols, std::move(v)};
}

PressureFrame mirror(const PressureFrame& f) {
    std::vector<double> v(f.size());
    for (int r = 0; r < f.rows(); ++r)
        for (int c = 0; c < f.cols(); ++c) v[static_cast<std::size_t>(r * f.cols() + c)] = f.at(r, f.cols() - 1 - c);
    return {f.timestamp(), f.rows(), f.cols(), std::move(v)};
}

}  // namespace

TEST_CASE("feature names are fixed") {
    CHECK(features::feature_names().size() == 9);
    CHECK(features::feature_names()[0] == "total_pressure");
}

TEST_CASE("uniform frame: centre of pressure at the geometric centre") {
    const PressureFrame f(0, 18, 18, std::vector<double>(324, 0.5));
    const auto v = extract_features(f, 9);
    CHECK(v[Total] == doctest::Approx(162.0));
    CHECK(v[CopRow] == doctest::Approx(8.5));
    CHECK(v[CopCol] == doctest::Approx(8.5));
    CHECK(v[Active] == 1.0);
    CHECK(v[Asym] == doctest::Approx(0.0));
    CHECK(v[Upper] == doctest::Approx(0.5));
    CHECK(v[Lower] == doctest::Approx(0.5));
}

TEST_CASE("point mass: cop at the sensel, zero spread") {
    std::vector<double> v(18 * 8, 0.0);
    v[5 * 8 + 2] = 0.9;
    const auto f = extract_features(PressureFrame(0, 18, 8, v), 9);
    CHECK(f[CopRow] == 5.0);
    CHECK(f[CopCol] == 2.0);
    CHECK(f[SpreadRow] == 0.0);
    CHECK(f[SpreadCol] == 0.0);
    CHECK(f[Active] == doctest::Approx(1.0 / 144.0));
    CHECK(f[Asym] == 1.0);
    CHECK(f[Upper] == 1.0);
    CHECK(f[Lower] == 0.0);
}

TEST_CASE("all-zero frame follows the zero-total convention") {
    const auto f = extract_features(PressureFrame(0, 18, 8, std::vector<double>(144, 0.0)), 9);
    CHECK(f[Total] == 0.0);
    CHECK(f[CopRow] == 8.5);
    CHECK(f[CopCol] == 3.5);
    CHECK(f[SpreadRow] == 0.0);
    CHECK(f[SpreadCol] == 0.0);
    CHECK(f[Asym] == 0.0);
    CHECK(f[Upper] == 0.0);
    CHECK(f[Lower] == 0.0);
}

TEST_CASE("spread matches a direct weighted standard deviation") {
    std::vector<double> v(4 * 3, 0.0);
    v[0 * 3 + 1] = 0.2;
    v[3 * 3 + 1] = 0.6;
    const auto f = extract_features(PressureFrame(0, 4, 3, v), 2);
    // rows 0 and 3 with weights 0.25, 0.75: mean 2.25, variance 0.25*2.25^2 + 0.75*0.75^2
    CHECK(f[CopRow] == doctest::Approx(2.25));
    CHECK(f[SpreadRow] == doctest::Approx(std::sqrt(0.25 * 2.25 * 2.25 + 0.75 * 0.75 * 0.75)));
    CHECK(f[Upper] == doctest::Approx(0.25));
    CHECK(f[Lower] == doctest::Approx(0.75));
}

TEST_CASE("mirror property over random frames") {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const auto f = random_frame(rng, 18, 8);
        const auto a = extract_features(f, 9);
        const auto b = extract_features(mirror(f), 9);
        CHECK(b[Asym] == doctest::Approx(-a[Asym]));
        CHECK(b[CopCol] == doctest::Approx(7.0 - a[CopCol]));
        CHECK(b[CopRow] == doctest::Approx(a[CopRow]));
        CHECK(a[Asym] >= -1.0);
        CHECK(a[Asym] <= 1.0);
    }
}

TEST_CASE("scale invariance of shape features") {
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        const auto f = random_frame(rng, 18, 18, 0.5);
        std::vector<double> v(f.values().begin(), f.values().end());
        for (auto& x : v) x *= 1.7;
        const auto a = extract_features(f, 9);
        const auto b = extract_features(PressureFrame(0, 18, 18, v), 9);
        CHECK(b[Total] == doctest::Approx(1.7 * a[Total]));
        for (int k : {CopRow, CopCol, SpreadRow, SpreadCol, Asym, Upper, Lower}) CHECK(b[k] == doctest::Approx(a[k]));
    }
}

TEST_CASE("feature table csv round trip") {
    testutil::TempDir tmp("feat");
    synth::StaticSetConfig c;
    c.geometry = {18, 8, 9};
    c.n_subjects = 2;
    c.frames_per_subject = 10;
    c.seed = 2;
    const auto ds = synth::generate_static_dataset(c);
    const auto t = features::extract_table(ds);
    REQUIRE(t.rows.size() == 20);
    features::write_features(t, tmp.path / "features.csv");
    const auto back = features::read_features(tmp.path / "features.csv");
    CHECK(back.rows == t.rows);
    CHECK(back.labels == t.labels);
    CHECK(back.patients == t.patients);
    CHECK(back.timestamps == t.timestamps);
}
