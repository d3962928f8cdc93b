#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctseg/metrics.hpp"
#include "ctseg/rng.hpp"
#include "oracle_metrics.hpp"

using namespace ctseg;
using metrics::evaluate_case;
using vol::Mask3D;
using vol::Shape3;
using vol::Spacing3;

namespace {

Mask3D make_mask(Shape3 dims, Spacing3 sp, const std::vector<std::array<int, 3>>& fg) {
    std::vector<uint8_t> lab(dims.numel(), 0);
    for (const auto& v : fg) lab[(size_t(v[0]) * dims.h + v[1]) * dims.w + v[2]] = 1;
    return Mask3D(dims, sp, std::move(lab));
}

Mask3D random_mask(Rng& rng, Shape3 dims, Spacing3 sp, double fg_prob) {
    std::vector<uint8_t> lab(dims.numel());
    for (auto& v : lab) v = rng.bernoulli(fg_prob) ? 1 : 0;
    return Mask3D(dims, sp, std::move(lab));
}

}  // namespace

TEST_CASE("dice and jaccard on constructed masks") {
    const Shape3 d{4, 4, 4};
    const Spacing3 sp{1, 1, 1};

    auto a = make_mask(d, sp, {{0, 0, 0}, {0, 0, 1}, {1, 1, 1}, {2, 2, 2}});
    auto [dice_same, jac_same] = metrics::dice_jaccard(a, a);
    CHECK(dice_same == doctest::Approx(1.0));
    CHECK(jac_same == doctest::Approx(1.0));

    auto b = make_mask(d, sp, {{3, 3, 3}, {3, 3, 2}});
    auto [dice_disj, jac_disj] = metrics::dice_jaccard(a, b);
    CHECK(dice_disj == doctest::Approx(0.0));
    CHECK(jac_disj == doctest::Approx(0.0));

    // |P|=|G|=4, |P n G|=2 -> dice 0.5, jaccard 1/3
    auto p = make_mask(d, sp, {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}, {0, 0, 3}});
    auto g = make_mask(d, sp, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}});
    auto [dice, jac] = metrics::dice_jaccard(p, g);
    CHECK(dice == doctest::Approx(0.5));
    CHECK(jac == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("surface extraction") {
    const Spacing3 sp{1, 1, 1};
    auto single = make_mask({5, 5, 5}, sp, {{2, 2, 2}});
    CHECK(metrics::extract_surface(single).voxels.size() == 1);

    // solid 3x3x3 cube: all 27 voxels except the centre are surface
    std::vector<std::array<int, 3>> cube;
    for (int z = 1; z <= 3; ++z)
        for (int y = 1; y <= 3; ++y)
            for (int x = 1; x <= 3; ++x) cube.push_back({z, y, x});
    auto solid = make_mask({5, 5, 5}, sp, cube);
    CHECK(metrics::extract_surface(solid).voxels.size() == 26);

    auto empty = make_mask({5, 5, 5}, sp, {});
    CHECK(metrics::extract_surface(empty).voxels.empty());

    // a mask voxel on the image border is surface even if fully surrounded inside
    std::vector<std::array<int, 3>> all;
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) all.push_back({z, y, x});
    auto full = make_mask({3, 3, 3}, sp, all);
    CHECK(metrics::extract_surface(full).voxels.size() == 26);  // centre interior
}

TEST_CASE("nsd basics") {
    const Shape3 d{8, 8, 8};
    const Spacing3 sp{1, 1, 1};
    auto a = make_mask(d, sp, {{2, 2, 2}, {2, 2, 3}, {2, 3, 2}, {2, 3, 3}});
    CHECK(metrics::nsd(a, a, 1.0) == doctest::Approx(1.0));

    // one-voxel shift with 1 mm spacing is within a 3 mm tolerance everywhere
    auto b = make_mask(d, sp, {{2, 2, 3}, {2, 2, 4}, {2, 3, 3}, {2, 3, 4}});
    CHECK(metrics::nsd(a, b, 3.0) == doctest::Approx(1.0));
}

TEST_CASE("adb and hd95 basics") {
    const Shape3 d{8, 8, 8};
    const Spacing3 sp{1, 1, 1};
    auto a = make_mask(d, sp, {{1, 1, 1}});
    auto b = make_mask(d, sp, {{1, 1, 5}});
    CHECK(metrics::adb(a, a) == doctest::Approx(0.0));
    CHECK(metrics::adb(a, b) == doctest::Approx(4.0));
    CHECK(metrics::hd95(a, a) == doctest::Approx(0.0));
    CHECK(metrics::hd95(a, b) == doctest::Approx(4.0));

    auto empty = make_mask(d, sp, {});
    CHECK_THROWS_AS(metrics::adb(a, empty), DegenerateCase);
    CHECK_THROWS_AS(metrics::hd95(empty, a), DegenerateCase);
}

TEST_CASE("evaluate_case degenerate conventions") {
    const Shape3 d{6, 6, 6};
    const Spacing3 sp{1, 1, 1};
    auto empty = make_mask(d, sp, {});
    auto some = make_mask(d, sp, {{1, 1, 1}, {1, 1, 2}});

    auto both = evaluate_case(empty, empty, 3.0);
    CHECK(both.dice == 1.0);
    CHECK(both.jaccard == 1.0);
    CHECK(both.nsd == 1.0);
    CHECK(both.adb_mm == 0.0);
    CHECK(both.hd95_mm == 0.0);
    CHECK(both.both_empty);
    CHECK(!both.distances_degenerate);

    auto one = evaluate_case(empty, some, 3.0);
    CHECK(one.dice == 0.0);
    CHECK(one.jaccard == 0.0);
    CHECK(one.nsd == 0.0);
    CHECK(one.distances_degenerate);
    CHECK(std::isnan(one.adb_mm));

    auto perfect = evaluate_case(some, some, 3.0);
    CHECK(perfect.dice == doctest::Approx(1.0));
    CHECK(perfect.jaccard == doctest::Approx(1.0));
    CHECK(perfect.nsd == doctest::Approx(1.0));
    CHECK(perfect.adb_mm == doctest::Approx(0.0));
    CHECK(perfect.hd95_mm == doctest::Approx(0.0));
}

TEST_CASE("random masks match the brute-force oracle") {
    Rng rng(20240811);
    const Shape3 dims{8, 8, 8};
    int degenerate_seen = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const Spacing3 sp = (trial % 3 == 0) ? Spacing3{1.25, 0.8, 0.6} : Spacing3{1, 1, 1};
        const double prob = rng.uniform(0.02, 0.4);
        auto p = random_mask(rng, dims, sp, prob);
        auto g = random_mask(rng, dims, sp, prob);
        const auto want = oracle::evaluate(p, g, 3.0);
        const auto got = evaluate_case(p, g, 3.0);
        CHECK(got.dice == doctest::Approx(want.dice).epsilon(1e-12));
        CHECK(got.jaccard == doctest::Approx(want.jaccard).epsilon(1e-12));
        CHECK(std::abs(got.nsd - want.nsd) < 1e-9);
        if (want.distances_defined && !got.both_empty) {
            CHECK(!got.distances_degenerate);
            CHECK(std::abs(got.adb_mm - want.adb) < 1e-9);
            CHECK(std::abs(got.hd95_mm - want.hd95) < 1e-9);
        } else {
            ++degenerate_seen;
        }
    }
    (void)degenerate_seen;
}

TEST_CASE("metric symmetry on random pairs") {
    Rng rng(7);
    const Shape3 dims{8, 8, 8};
    const Spacing3 sp{1.1, 0.9, 0.7};
    for (int trial = 0; trial < 10; ++trial) {
        auto p = random_mask(rng, dims, sp, 0.15);
        auto g = random_mask(rng, dims, sp, 0.15);
        if (p.empty_mask() || g.empty_mask()) continue;
        CHECK(metrics::nsd(p, g, 2.0) == doctest::Approx(metrics::nsd(g, p, 2.0)).epsilon(1e-12));
        CHECK(metrics::adb(p, g) == doctest::Approx(metrics::adb(g, p)).epsilon(1e-12));
        CHECK(metrics::hd95(p, g) == doctest::Approx(metrics::hd95(g, p)).epsilon(1e-12));
        auto [d1, j1] = metrics::dice_jaccard(p, g);
        auto [d2, j2] = metrics::dice_jaccard(g, p);
        CHECK(d1 == d2);
        CHECK(j1 == j2);
        // algebraic identity jaccard = dice / (2 - dice)
        CHECK(std::abs(j1 - d1 / (2.0 - d1)) < 1e-12);
    }
}

TEST_CASE("doubling the spacing doubles the distances and rescales nsd") {
    Rng rng(99);
    const Shape3 dims{8, 8, 8};
    for (int trial = 0; trial < 8; ++trial) {
        auto p1 = random_mask(rng, dims, {1, 1, 1}, 0.2);
        auto g1 = random_mask(rng, dims, {1, 1, 1}, 0.2);
        if (p1.empty_mask() || g1.empty_mask()) continue;
        Mask3D p2(dims, {2, 2, 2}, std::vector<uint8_t>(p1.labels()));
        Mask3D g2(dims, {2, 2, 2}, std::vector<uint8_t>(g1.labels()));
        CHECK(metrics::adb(p2, g2) == doctest::Approx(2.0 * metrics::adb(p1, g1)).epsilon(1e-12));
        CHECK(metrics::hd95(p2, g2) ==
              doctest::Approx(2.0 * metrics::hd95(p1, g1)).epsilon(1e-12));
        // doubled spacing with tolerance tau behaves like unit spacing with tau/2
        CHECK(metrics::nsd(p2, g2, 3.0) == doctest::Approx(metrics::nsd(p1, g1, 1.5)));
    }
}

TEST_CASE("translation invariance") {
    Rng rng(123);
    const Shape3 dims{10, 10, 10};
    const Spacing3 sp{1, 1, 1};
    auto base_fg = std::vector<std::array<int, 3>>{{2, 2, 2}, {2, 3, 2}, {3, 2, 4}};
    auto other_fg = std::vector<std::array<int, 3>>{{2, 2, 3}, {4, 4, 4}};
    auto shift = [&](const std::vector<std::array<int, 3>>& v) {
        std::vector<std::array<int, 3>> out;
        for (auto a : v) out.push_back({a[0] + 3, a[1] + 2, a[2] + 1});
        return out;
    };
    auto p = make_mask(dims, sp, base_fg), g = make_mask(dims, sp, other_fg);
    auto ps = make_mask(dims, sp, shift(base_fg)), gs = make_mask(dims, sp, shift(other_fg));
    const auto a = evaluate_case(p, g, 2.0);
    const auto b = evaluate_case(ps, gs, 2.0);
    CHECK(a.dice == b.dice);
    CHECK(a.jaccard == b.jaccard);
    CHECK(a.nsd == b.nsd);
    CHECK(a.adb_mm == doctest::Approx(b.adb_mm).epsilon(1e-12));
    CHECK(a.hd95_mm == doctest::Approx(b.hd95_mm).epsilon(1e-12));
}

TEST_CASE("aggregate mean and population variance") {
    metrics::MetricsReport a, b;
    a.dice = 0.6;
    b.dice = 0.8;
    a.jaccard = b.jaccard = 0.5;
    a.nsd = b.nsd = 1.0;
    a.adb_mm = 1.0;
    b.adb_mm = 3.0;
    a.hd95_mm = b.hd95_mm = 2.0;

    auto agg = metrics::aggregate({a, b});
    CHECK(agg.dice.mean == doctest::Approx(0.7));
    CHECK(agg.dice.variance == doctest::Approx(0.01));
    CHECK(agg.adb_mm.mean == doctest::Approx(2.0));

    auto agg2 = metrics::aggregate({b, a});  // permutation invariant
    CHECK(agg.dice.mean == agg2.dice.mean);
    CHECK(agg.dice.variance == agg2.dice.variance);

    auto single = metrics::aggregate({a});
    CHECK(single.dice.mean == 0.6);
    CHECK(single.dice.variance == 0.0);

    metrics::MetricsReport degen;
    degen.dice = 0.0;
    degen.distances_degenerate = true;
    degen.adb_mm = std::nan("");
    degen.hd95_mm = std::nan("");
    auto agg3 = metrics::aggregate({a, b, degen});
    CHECK(agg3.adb_mm.count == 2);
    CHECK(agg3.adb_mm.excluded == 1);
    CHECK(agg3.dice.count == 3);

    CHECK_THROWS_AS(metrics::aggregate({}), EmptyInput);
}

TEST_CASE("shape and spacing mismatches are rejected") {
    auto a = make_mask({4, 4, 4}, {1, 1, 1}, {{0, 0, 0}});
    auto b = make_mask({4, 4, 5}, {1, 1, 1}, {{0, 0, 0}});
    CHECK_THROWS_AS(metrics::dice_jaccard(a, b), ShapeError);
    auto c = make_mask({4, 4, 4}, {2, 1, 1}, {{0, 0, 0}});
    CHECK_THROWS_AS(metrics::nsd(a, c, 1.0), ShapeError);
}
