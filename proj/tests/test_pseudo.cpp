#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support.hpp"
#include "zal3d/pseudo.hpp"

using namespace zal3d;

namespace {

OrderedPointMap plane(std::size_t n, std::uint64_t seed) {
    SynthParams p;
    p.height = p.width = n;
    return synth_object(ObjectKind::wavy_plane, p, seed);
}

std::multiset<Point> as_set(const std::vector<Point>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(InterestPoints, SelectionArithmetic) {
    std::mt19937_64 rng(30);
    const auto full = test::random_map(8, 8, rng, 0.0);
    EXPECT_EQ(extract_interest_points(full, GroundTruthMask(8, 8, 1)).size(), 64u);

    // 51 masked pixels, 3 of them sentinels
    std::vector<Point> pts = full.points();
    GroundTruthMask mask(8, 8, 0);
    for (std::size_t i = 0; i < 51; ++i) mask[i] = 1;
    pts[4] = pts[9] = pts[50] = Point{0, 0, 0};
    const OrderedPointMap holes(8, 8, pts);
    const auto got = extract_interest_points(holes, mask);
    EXPECT_EQ(got.size(), 48u);
    for (const auto& p : got) EXPECT_NE(std::find(pts.begin(), pts.end(), p), pts.end());

    EXPECT_THROW(extract_interest_points(OrderedPointMap(8, 8, std::vector<Point>(64)), mask), SynthesisError);
    EXPECT_THROW(extract_interest_points(full, GroundTruthMask(4, 4, 1)), ArgumentError);
}

TEST(AddingPatch, MixesBothSources) {
    const auto m = plane(64, 1);
    SynthesisConfig cfg;
    std::vector<Point> interest{{0.1f, 0.2f, 3.0f}, {0.12f, 0.2f, 3.01f}, {0.1f, 0.23f, 3.02f}, {0.09f, 0.21f, 2.99f}};
    const NormalSurface surface(m);
    const std::set<Point> surface_pts(m.points().begin(), m.points().end());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = make_adding_patch(surface, interest, cfg, seed);
        ASSERT_EQ(p.points.size(), 64u);
        EXPECT_EQ(p.label, 1);
        EXPECT_EQ(p.kind, PseudoKind::adding);
        std::size_t from_surface = 0;
        for (const auto& q : p.points) from_surface += surface_pts.count(q);
        EXPECT_GE(from_surface, 1u);
        EXPECT_LE(from_surface, 63u);
        EXPECT_EQ(as_set(make_adding_patch(surface, interest, cfg, seed).points), as_set(p.points));
    }
}

TEST(AddingPatch, SinglePointWithoutSurroundingOracle) {
    const auto m = plane(64, 2);
    SynthesisConfig cfg;
    cfg.surrounding = 0;
    const std::vector<Point> interest{{5.0f, 5.0f, 5.0f}};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_adding_patch(m, interest, cfg, seed);
        const Point site = m[p.provenance.anchor_pixel];
        // linear scan: the 63 surface points nearest the site, ties by pixel order
        std::vector<std::pair<double, std::size_t>> d;
        for (auto px : m.foreground_indices()) d.push_back({squared_distance(to_vec3(m[px]), to_vec3(site)), px});
        std::sort(d.begin(), d.end());
        std::vector<Point> want{site};
        for (std::size_t i = 0; i < 63; ++i) want.push_back(m[d[i].second]);
        EXPECT_EQ(as_set(p.points), as_set(want));
    }
}

TEST(AddingPatch, PreconditionsAndRetryExhaustion) {
    const auto m = plane(64, 3);
    SynthesisConfig cfg;
    EXPECT_THROW(make_adding_patch(m, {}, cfg, 1), ArgumentError);
    std::vector<Point> tiny(20, Point{1, 1, 1});
    EXPECT_THROW(make_adding_patch(OrderedPointMap(4, 5, tiny), tiny, cfg, 1), ArgumentError);
    // attached points land far from the anchor, so every candidate patch is pure surface
    const std::vector<Point> wide{{-10, 0, 0}, {10, 0, 0}};
    cfg.surrounding = 0;
    cfg.max_site_retries = 3;
    EXPECT_THROW(make_adding_patch(m, wide, cfg, 1), SynthesisError);
}

TEST(RemovingPatch, HalfRatioArithmetic) {
    const auto m = plane(64, 4);
    SynthesisConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto p = make_removing_patch(m, cfg, seed, 0.5);
        ASSERT_EQ(p.points.size(), 64u);
        EXPECT_EQ(std::set<Point>(p.points.begin(), p.points.end()).size(), 32u);
        EXPECT_EQ(p.label, 1);
        EXPECT_EQ(p.kind, PseudoKind::removing);
    }
}

TEST(RemovingPatch, ZeroRatioIsTheNeighbourhood) {
    const auto m = plane(64, 5);
    SynthesisConfig cfg;
    const auto p = make_removing_patch(m, cfg, 9, 0.0);
    const Point anchor = m[p.provenance.anchor_pixel];
    std::vector<std::pair<double, std::size_t>> d;
    for (auto px : m.foreground_indices()) d.push_back({squared_distance(to_vec3(m[px]), to_vec3(anchor)), px});
    std::sort(d.begin(), d.end());
    std::vector<Point> want;
    for (std::size_t i = 0; i < 64; ++i) want.push_back(m[d[i].second]);
    EXPECT_EQ(as_set(p.points), as_set(want));
    EXPECT_EQ(p.label, 1);
}

TEST(RemovingPatch, Deterministic) {
    const auto m = plane(64, 6);
    SynthesisConfig cfg;
    EXPECT_EQ(make_removing_patch(m, cfg, 3).points, make_removing_patch(m, cfg, 3).points);
}

class TrainingSetTest : public ::testing::Test {
protected:
    void SetUp() override {
        SynthParams p;
        p.height = p.width = 64;
        normals.push_back({"box", synth_object(ObjectKind::box, p, 1)});
        irrelevant.push_back({"cylinder", synth_object(ObjectKind::cylinder, p, 2)});
        irrelevant.push_back({"sphere", synth_object(ObjectKind::sphere, p, 3)});
        irrelevant.push_back({"wavy-plane", synth_object(ObjectKind::wavy_plane, p, 4)});
        cfg.max_positives_per_map = 4;
        cfg.tau = 0.02;  // small maps need more than a handful of interest pixels
        cfg.seed = 77;
    }
    std::vector<LabeledMap> normals, irrelevant;
    SynthesisConfig cfg;
    RandNetParams net = init_randnet(1, 0.25);
};

TEST_F(TrainingSetTest, RatiosAndLabels) {
    const auto set = build_training_set(normals, irrelevant, "torus", net, 8, cfg);
    ASSERT_EQ(set.positives.size(), 4u);
    ASSERT_EQ(set.negatives.size(), 64u);
    std::size_t adding = 0, removing = 0;
    for (const auto& n : set.negatives) {
        EXPECT_EQ(n.points.size(), 64u);
        EXPECT_EQ(n.label, 1);
        adding += n.kind == PseudoKind::adding;
        removing += n.kind == PseudoKind::removing;
        if (n.kind == PseudoKind::adding) EXPECT_TRUE(n.provenance.irrelevant_sample.has_value());
    }
    EXPECT_EQ(adding, 32u);
    EXPECT_EQ(removing, 32u);
    for (const auto& p : set.positives) {
        EXPECT_EQ(p.label, 0);
        EXPECT_EQ(p.kind, PseudoKind::none);
        const auto fg = std::count_if(p.points.begin(), p.points.end(), [](const Point& q) { return !is_sentinel(q); });
        EXPECT_GE(fg, 32);
    }
}

TEST_F(TrainingSetTest, AddingNegativesContainBothSources) {
    const auto set = build_training_set(normals, irrelevant, "torus", net, 8, cfg);
    const auto& surface = normals[0].map.points();
    const std::set<Point> host(surface.begin(), surface.end());
    for (const auto& n : set.negatives) {
        if (n.kind != PseudoKind::adding) continue;
        std::size_t from_host = 0;
        for (const auto& q : n.points) from_host += host.count(q);
        EXPECT_GE(from_host, 1u);
        EXPECT_LT(from_host, 64u);
    }
}

TEST_F(TrainingSetTest, Deterministic) {
    const auto a = build_training_set(normals, irrelevant, "torus", net, 8, cfg);
    const auto b = build_training_set(normals, irrelevant, "torus", net, 8, cfg);
    ASSERT_EQ(a.negatives.size(), b.negatives.size());
    for (std::size_t i = 0; i < a.negatives.size(); ++i) EXPECT_EQ(a.negatives[i].points, b.negatives[i].points);
}

TEST_F(TrainingSetTest, ZeroShotConstraint) {
    EXPECT_THROW(build_training_set(normals, irrelevant, "cylinder", net, 8, cfg), ConfigError);
    EXPECT_THROW(build_training_set(normals, irrelevant, "box", net, 8, cfg), ConfigError);
    EXPECT_THROW(build_training_set(normals, {}, "torus", net, 8, cfg), ConfigError);
}

TEST(SynthesisConfig, Validation) {
    SynthesisConfig c;
    EXPECT_NO_THROW(c.validate());
    c.removal_max = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.tau = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}
