#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "zal3d/geometry.hpp"

using namespace zal3d;

namespace {

std::vector<Neighbor> linear_scan(const std::vector<Vec3>& pts, const Vec3& q, std::size_t k) {
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < pts.size(); ++i) all.push_back({i, squared_distance(pts[i], q)});
    std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
    all.resize(k);
    for (auto& n : all) n.distance = std::sqrt(n.distance);
    return all;
}

// Height field z = 0.3 x^2 - 0.2 y^2 + 0.1 x y on a jittered grid.
std::vector<Vec3> saddle(std::size_t side, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> j(-0.3, 0.3);
    std::vector<Vec3> out;
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const double x = (c + j(rng)) / side - 0.5, y = (r + j(rng)) / side - 0.5;
            out.emplace_back(x, y, 0.3 * x * x - 0.2 * y * y + 0.1 * x * y);
        }
    return out;
}

}  // namespace

TEST(KdTree, SinglePoint) {
    const KdTree t({Vec3(1, 2, 3)});
    const auto r = knn(t, Vec3(1, 2, 3), 1);
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].index, 0u);
    EXPECT_EQ(r[0].distance, 0.0);
}

TEST(KdTree, EmptyAndOversizedQueriesThrow) {
    EXPECT_THROW(KdTree(std::vector<Vec3>{}), ArgumentError);
    const KdTree t({Vec3(0, 0, 0), Vec3(1, 0, 0)});
    EXPECT_THROW(knn(t, Vec3(0, 0, 0), 3), ArgumentError);
    EXPECT_THROW(knn(t, Vec3(0, 0, 0), 0), ArgumentError);
}

TEST(KdTree, MatchesLinearScan) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 30; ++trial) {
        const auto pts = test::random_points(100 + 30 * trial, rng);
        const KdTree t(pts);
        for (int q = 0; q < 20; ++q) {
            const Vec3 query = test::random_points(1, rng, 1.5)[0];
            for (std::size_t k : {1, 5, 16}) {
                const auto got = knn(t, query, k);
                const auto want = linear_scan(pts, query, k);
                ASSERT_EQ(got.size(), k);
                for (std::size_t i = 0; i < k; ++i) {
                    EXPECT_EQ(got[i].index, want[i].index);
                    EXPECT_EQ(got[i].distance, want[i].distance);
                }
            }
        }
    }
}

TEST(KdTree, DuplicatesKeepDistinctIndicesInOrder) {
    std::vector<Vec3> pts(40, Vec3(0.5, 0.5, 0.5));
    pts.push_back(Vec3(3, 3, 3));
    const KdTree t(pts);
    const auto r = knn(t, Vec3(0.5, 0.5, 0.5), 40);
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(r[i].index, i);
}

TEST(KdTree, FullQueryIsSorted) {
    std::mt19937_64 rng(11);
    const auto pts = test::random_points(57, rng);
    const auto r = knn(KdTree(pts), Vec3::Zero(), pts.size());
    ASSERT_EQ(r.size(), pts.size());
    for (std::size_t i = 1; i < r.size(); ++i) EXPECT_LE(r[i - 1].distance, r[i].distance);
}

TEST(Normals, PlaneGivesUpwardNormals) {
    std::vector<Vec3> pts;
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 10; ++c) pts.emplace_back(0.1 * c, 0.1 * r + 0.013 * c, 0.0);
    const auto n = estimate_normals(pts, 16);
    for (const auto& v : n.normals) {
        EXPECT_NEAR(v.x(), 0.0, 1e-9);
        EXPECT_NEAR(v.y(), 0.0, 1e-9);
        EXPECT_NEAR(v.z(), 1.0, 1e-9);
    }
}

TEST(Normals, SphereNormalsAreRadial) {
    std::mt19937_64 rng(12);
    std::vector<Vec3> pts;
    for (auto p : test::random_points(3000, rng)) {
        p.normalize();
        if (p.z() > 0.05) pts.push_back(p);
    }
    const auto n = estimate_normals(pts, 16);
    std::size_t good = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_NEAR(n.normals[i].norm(), 1.0, 1e-6);
        good += n.normals[i].dot(pts[i]) >= std::cos(5.0 * M_PI / 180.0);
    }
    EXPECT_GE(static_cast<double>(good), 0.99 * static_cast<double>(pts.size()));
}

TEST(Normals, CollinearNeighbourhoodFallsBack) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 20; ++i) pts.emplace_back(0.1 * i, 0, 0);
    const auto n = estimate_normals(pts, 5);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_EQ(n.degenerate[i], 1);
        EXPECT_EQ(n.normals[i], Vec3(0, 0, 1));
    }
}

TEST(Fpfh, BlocksSumToOne) {
    std::mt19937_64 rng(13);
    const auto cloud = SurfaceCloud::build(saddle(20, rng), 16);
    std::vector<std::size_t> members(50);
    std::iota(members.begin(), members.end(), 100);
    const auto d = fpfh_patch(cloud, members);
    EXPECT_FALSE(d.degenerate);
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0;
        for (std::size_t i = 0; i < kFpfhBins; ++i) {
            EXPECT_GE(d.bins[b * kFpfhBins + i], 0.0);
            s += d.bins[b * kFpfhBins + i];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Fpfh, EmptyPatchIsDegenerateZero) {
    std::mt19937_64 rng(14);
    const auto cloud = SurfaceCloud::build(saddle(8, rng), 16);
    const auto d = fpfh_patch(cloud, {});
    EXPECT_TRUE(d.degenerate);
    for (double v : d.bins) EXPECT_EQ(v, 0.0);
}

TEST(Fpfh, DeterministicAndTranslationInvariant) {
    std::mt19937_64 rng(15);
    const auto pts = saddle(16, rng);
    std::vector<std::size_t> members(pts.size());
    std::iota(members.begin(), members.end(), 0);
    const auto a = fpfh_patch(SurfaceCloud::build(pts, 16), members);
    const auto b = fpfh_patch(SurfaceCloud::build(pts, 16), members);
    EXPECT_EQ(a.bins, b.bins);
    auto moved = pts;
    for (auto& p : moved) p += Vec3(0.25, -0.5, 0.125);
    const auto c = fpfh_patch(SurfaceCloud::build(moved, 16), members);
    for (std::size_t i = 0; i < kFpfhWidth; ++i) EXPECT_NEAR(a.bins[i], c.bins[i], 1e-9);
}

TEST(Fpfh, RotationInvariantWithinBinning) {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 5; ++trial) {
        const auto pts = saddle(16, rng);
        std::vector<std::size_t> members(pts.size());
        std::iota(members.begin(), members.end(), 0);
        std::normal_distribution<double> g;
        const Eigen::Quaterniond q = Eigen::Quaterniond(g(rng), g(rng), g(rng), g(rng)).normalized();
        const Eigen::Matrix3d R = q.toRotationMatrix();
        std::vector<Vec3> rotated;
        for (const auto& p : pts) rotated.push_back(R * p);
        const auto a = fpfh_patch(SurfaceCloud::build(pts, 16), members);
        const auto b = fpfh_patch(SurfaceCloud::build(rotated, 16, R * Vec3(0, 0, 1)), members);
        double l1 = 0;
        for (std::size_t i = 0; i < kFpfhWidth; ++i) l1 += std::abs(a.bins[i] - b.bins[i]);
        EXPECT_LT(l1, 0.05);
    }
}

TEST(Fpfh, MapDescriptorsPerPatch) {
    SynthParams p;
    p.height = p.width = 64;
    const auto m = synth_object(ObjectKind::sphere, p, 3);
    const auto d = map_patch_fpfh(m, 8, 16);
    ASSERT_EQ(d.size(), 64u);
    const auto grid = partition(m, 8);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const bool empty = std::all_of(grid.patches[i].points.begin(), grid.patches[i].points.end(), is_sentinel);
        EXPECT_EQ(d[i].degenerate, empty);
    }
}
