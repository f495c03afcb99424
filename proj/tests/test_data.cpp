#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "support.hpp"
#include "zal3d/data.hpp"

using namespace zal3d;
using zal3d::test::TempDir;

namespace {

SynthParams small_params(std::size_t n = 64) {
    SynthParams p;
    p.height = p.width = n;
    return p;
}

}  // namespace

TEST(OrderedPointMap, RejectsNonFiniteAndWrongSize) {
    std::vector<Point> pts(4, Point{1, 2, 3});
    pts[2][1] = std::nanf("");
    EXPECT_THROW(OrderedPointMap(2, 2, pts), ValidationError);
    EXPECT_THROW(OrderedPointMap(2, 3, std::vector<Point>(4)), ArgumentError);
}

TEST(Opm, RoundTripIsBitExact) {
    TempDir dir("opm");
    std::mt19937_64 rng(1);
    const auto m = test::random_map(16, 24, rng);
    save_opm(m, dir / "a.opm");
    EXPECT_EQ(load_opm(dir / "a.opm"), m);
}

TEST(Opm, FileSizeFollowsFormat) {
    TempDir dir("opm");
    std::mt19937_64 rng(2);
    save_opm(test::random_map(224, 224, rng), dir / "a.opm");
    EXPECT_EQ(std::filesystem::file_size(dir / "a.opm"), 602124u);
}

TEST(Opm, HeaderLayout) {
    TempDir dir("opm");
    OrderedPointMap m(1, 2, {Point{1.5f, 0, 0}, Point{0, 0, -2}});
    save_opm(m, dir / "a.opm");
    const auto bytes = test::read_bytes(dir / "a.opm");
    ASSERT_EQ(bytes.size(), 12u + 24u);
    EXPECT_EQ(bytes.substr(0, 4), "OPM1");
    std::uint32_t h, w;
    std::memcpy(&h, bytes.data() + 4, 4);
    std::memcpy(&w, bytes.data() + 8, 4);
    EXPECT_EQ(h, 1u);
    EXPECT_EQ(w, 2u);
    float x;
    std::memcpy(&x, bytes.data() + 12, 4);
    EXPECT_EQ(x, 1.5f);
}

TEST(Opm, BadMagicTruncationAndNaN) {
    TempDir dir("opm");
    std::mt19937_64 rng(3);
    save_opm(test::random_map(4, 4, rng), dir / "a.opm");
    auto bytes = test::read_bytes(dir / "a.opm");

    auto bad = bytes;
    bad.replace(0, 4, "XXXX");
    test::write_bytes(dir / "magic.opm", bad);
    EXPECT_THROW(load_opm(dir / "magic.opm"), FormatError);

    test::write_bytes(dir / "short.opm", bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(load_opm(dir / "short.opm"), IoError);

    auto nan = bytes;
    const float q = std::nanf("");
    std::memcpy(nan.data() + 12, &q, 4);
    test::write_bytes(dir / "nan.opm", nan);
    EXPECT_THROW(load_opm(dir / "nan.opm"), ValidationError);
}

TEST(Msk, RoundTripAndMagic) {
    TempDir dir("msk");
    GroundTruthMask m(3, 5, 0);
    m(1, 2) = 1;
    m(2, 4) = 1;
    save_msk(m, dir / "a.msk");
    EXPECT_EQ(load_msk(dir / "a.msk"), m);
    const auto bytes = test::read_bytes(dir / "a.msk");
    EXPECT_EQ(bytes.substr(0, 4), "MSK1");
    EXPECT_EQ(bytes.size(), 12u + 15u);
}

TEST(Partition, DefaultPatchCount) {
    std::mt19937_64 rng(4);
    const auto grid = partition(test::random_map(224, 224, rng), 8);
    EXPECT_EQ(grid.layout.rows, 28u);
    EXPECT_EQ(grid.layout.cols, 28u);
    EXPECT_EQ(grid.patches.size(), 784u);
    for (const auto& p : grid.patches) EXPECT_EQ(p.points.size(), 64u);
}

TEST(Partition, IndivisibleSizeThrows) {
    std::mt19937_64 rng(5);
    EXPECT_THROW(partition(test::random_map(224, 224, rng), 9), ArgumentError);
}

TEST(Partition, WindowContentsAreRowMajor) {
    std::mt19937_64 rng(6);
    const auto m = test::random_map(16, 24, rng);
    const auto grid = partition(m, 4);
    const auto& p = grid.patches[1 * 6 + 2];
    EXPECT_EQ(p.grid_row, 1u);
    EXPECT_EQ(p.grid_col, 2u);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(p.points[r * 4 + c], m.at(4 + r, 8 + c));
}

TEST(Partition, RealignIsInverseForEveryDivisor) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const auto m = test::random_map(24, 36, rng);
        for (std::size_t ps : {1, 2, 3, 4, 6, 12}) EXPECT_EQ(realign(partition(m, ps)), m);
    }
}

TEST(Realign, ScalarsLandAtPatchPositions) {
    const auto layout = PatchLayout::for_map(224, 224, 8);
    std::vector<double> v(784);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    const auto g = realign<double>(v, layout);
    EXPECT_EQ(g.height(), 28u);
    EXPECT_EQ(g(3, 5), 3 * 28 + 5);
    EXPECT_THROW(realign<double>(std::span<const double>(v).first(783), layout), ArgumentError);
    const std::vector<double> c(784, 2.5);
    const auto flat = realign<double>(c, layout);
    for (double x : flat.values()) EXPECT_EQ(x, 2.5);
}

TEST(Synth, SphereSurfaceIsAnalytic) {
    const auto p = small_params(96);
    SynthParams q = p;
    q.noise = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto m = synth_object(ObjectKind::sphere, q, seed);
        const auto g = sphere_geometry(q, seed);
        ASSERT_GT(m.foreground_count(), 0u);
        for (const auto& pt : m.points()) {
            if (is_sentinel(pt)) continue;
            const double dx = pt[0] - g.center[0], dy = pt[1] - g.center[1], dz = pt[2] - g.center[2];
            EXPECT_NEAR(std::sqrt(dx * dx + dy * dy + dz * dz), g.radius, 1e-6);
        }
    }
}

TEST(Synth, DeterministicAndHasBackground) {
    const auto p = small_params();
    for (const char* k : {"sphere", "box", "cylinder", "wavy-plane"}) {
        const auto a = synth_object(k, p, 11), b = synth_object(k, p, 11);
        EXPECT_EQ(a, b) << k;
        EXPECT_GT(a.foreground_count(), 0u) << k;
        EXPECT_NE(synth_object(k, p, 12), a) << k;
    }
    EXPECT_LT(synth_object("sphere", p, 1).foreground_count(), p.height * p.width);
    EXPECT_THROW(synth_object("torus", p, 1), ArgumentError);
}

TEST(Inject, ChangesOnlyMaskedPixels) {
    const auto p = small_params(96);
    for (auto kind : {AnomalyKind::bump, AnomalyKind::dent, AnomalyKind::blob_add, AnomalyKind::hole}) {
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            const auto base = synth_object(ObjectKind::sphere, p, seed);
            AnomalyParams ap;
            ap.radius_px = 6;
            const auto s = inject_anomaly(base, kind, ap, seed + 100);
            std::size_t set = 0;
            for (std::size_t i = 0; i < base.size(); ++i) {
                set += s.mask[i] != 0;
                if (!s.mask[i]) EXPECT_EQ(s.map[i], base[i]);
                if (kind == AnomalyKind::hole && s.mask[i]) EXPECT_TRUE(is_sentinel(s.map[i]));
            }
            EXPECT_GE(set, 1u);
            EXPECT_NE(s.map, base);
            const auto again = inject_anomaly(base, kind, ap, seed + 100);
            EXPECT_EQ(again.map, s.map);
            EXPECT_EQ(again.mask, s.mask);
        }
    }
}

TEST(Inject, EmptyForegroundThrows) {
    OrderedPointMap empty(8, 8, std::vector<Point>(64, Point{0, 0, 0}));
    EXPECT_THROW(inject_anomaly(empty, AnomalyKind::bump, {}, 1), ArgumentError);
}

TEST(Manifest, RejectsTestClassReuse) {
    std::vector<ManifestEntry> e{{SampleRole::test_normal, "sphere", "a.opm", std::nullopt},
                                 {SampleRole::task_irrelevant, "sphere", "b.opm", std::nullopt}};
    EXPECT_THROW(DatasetManifest(e, 0), ConfigError);
    e[1].role = SampleRole::train;
    EXPECT_THROW(DatasetManifest(e, 0), ConfigError);
    e[1].class_label = "box";
    EXPECT_NO_THROW(DatasetManifest(e, 0));
}

TEST(Manifest, SaveLoadResolvesRelativePaths) {
    TempDir dir("manifest");
    std::vector<ManifestEntry> e{{SampleRole::train, "box", dir / "train/a.opm", std::nullopt},
                                 {SampleRole::test_anomalous, "sphere", dir / "test/b.opm", dir / "test/b.msk"}};
    DatasetManifest(e, 42).save(dir / "manifest.json");
    const auto m = DatasetManifest::load(dir / "manifest.json");
    ASSERT_EQ(m.entries().size(), 2u);
    EXPECT_EQ(m.seed(), 42u);
    EXPECT_EQ(std::filesystem::weakly_canonical(m.entries()[1].sample_path),
              std::filesystem::weakly_canonical(dir / "test/b.opm"));
    EXPECT_TRUE(m.entries()[1].gt_path.has_value());
    EXPECT_EQ(m.entries()[0].role, SampleRole::train);
}
