#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "zal3d/imgproc.hpp"
#include "zal3d/randnet.hpp"

using namespace zal3d;

namespace {

// Straight-line bilinear resize (half-pixel centres, clamped edges).
std::vector<long double> oracle_resize(const std::vector<long double>& src, std::size_t h, std::size_t w,
                                       std::size_t oh, std::size_t ow) {
    std::vector<long double> out(oh * ow);
    for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
            long double y = (r + 0.5L) * h / oh - 0.5L, x = (c + 0.5L) * w / ow - 0.5L;
            y = std::clamp(y, 0.0L, static_cast<long double>(h - 1));
            x = std::clamp(x, 0.0L, static_cast<long double>(w - 1));
            const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
            const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const long double fy = y - y0, fx = x - x0;
            out[r * ow + c] = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                              fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
        }
    return out;
}

}  // namespace

TEST(Randnet, DeterministicParameters) {
    const auto a = init_randnet(5, 0.25), b = init_randnet(5, 0.25);
    EXPECT_EQ(a.stem.weight, b.stem.weight);
    EXPECT_EQ(a.stages[2][3].spatial.weight, b.stages[2][3].spatial.weight);
    EXPECT_NE(init_randnet(6, 0.25).stem.weight, a.stem.weight);
    EXPECT_THROW(init_randnet(1, 0.0), ArgumentError);
    EXPECT_THROW(init_randnet(1, 1.5), ArgumentError);
}

TEST(Randnet, HeVarianceOfSpatialConv) {
    // stage 1 bottleneck spatial conv at full width: 3x3x64 -> 64
    const auto p = init_randnet(7, 1.0);
    const auto& conv = p.stages[0][1].spatial;
    ASSERT_EQ(conv.in_channels, 64u);
    ASSERT_EQ(conv.kernel, 3u);
    double s = 0, s2 = 0;
    for (float w : conv.weight) s += w, s2 += static_cast<double>(w) * w;
    const double n = static_cast<double>(conv.weight.size());
    ASSERT_GE(n, 1e4);
    const double var = s2 / n - (s / n) * (s / n);
    EXPECT_NEAR(var / (2.0 / (3 * 3 * 64)), 1.0, 0.1);
    for (float b : conv.bias) EXPECT_EQ(b, 0.0f);
    for (float g : p.stages[0][1].spatial_norm.scale) EXPECT_EQ(g, 1.0f);
}

TEST(Randnet, WidthMultiplierQuartersChannels) {
    const auto full = init_randnet(1, 1.0), quarter = init_randnet(1, 0.25);
    EXPECT_EQ(quarter.stem_channels() * 4, full.stem_channels());
    for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(quarter.stage_channels(s) * 4, full.stage_channels(s));
    EXPECT_EQ(full.stage_channels(3), 2048u);
}

TEST(Randnet, StageShapes) {
    const auto p = init_randnet(1, 0.25);
    SynthParams sp;
    const auto m = synth_object(ObjectKind::sphere, sp, 1);
    const auto s = forward_stages(p, m);
    EXPECT_EQ(s.stages[0].height, 56u);
    EXPECT_EQ(s.stages[1].height, 28u);
    EXPECT_EQ(s.stages[2].height, 14u);
    std::mt19937_64 rng(1);
    EXPECT_THROW(forward_stages(p, test::random_map(100, 100, rng)), ArgumentError);
}

TEST(Randnet, StageShapesScaleWithInput) {
    const auto p = init_randnet(2, 0.25);
    SynthParams sp;
    sp.height = sp.width = 448;
    const auto s = forward_stages(p, synth_object(ObjectKind::box, sp, 1));
    EXPECT_EQ(s.stages[0].width, 112u);
    EXPECT_EQ(s.stages[1].width, 56u);
    EXPECT_EQ(s.stages[2].width, 28u);
}

TEST(Randnet, ForwardIsDeterministic) {
    const auto p = init_randnet(3, 0.25);
    SynthParams sp;
    sp.height = sp.width = 64;
    const auto m = synth_object(ObjectKind::cylinder, sp, 4);
    const auto a = forward_stages(p, m), b = forward_stages(p, m);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.stages[i].data, b.stages[i].data);
}

TEST(Fuse, ConstantStagesGiveZero) {
    StageMaps s;
    s.stages[0] = FeatureTensor(2, 8, 8, 1.5f);
    s.stages[1] = FeatureTensor(3, 4, 4, 0.5f);
    s.stages[2] = FeatureTensor(4, 2, 2, 2.0f);
    const auto fused = fuse_activations(s, 32, 32);
    for (double v : fused.values()) EXPECT_EQ(v, 0.0);
}

TEST(Fuse, MismatchedProvenanceThrows) {
    StageMaps s;
    s.stages[0] = FeatureTensor(1, 8, 8);
    s.stages[1] = FeatureTensor(1, 4, 4);
    s.stages[2] = FeatureTensor(1, 2, 2);
    s.source_ids = {1, 1, 2};
    EXPECT_THROW(fuse_activations(s, 32, 32), ArgumentError);
}

TEST(Fuse, MatchesStepByStepOracle) {
    std::mt19937_64 rng(20);
    std::uniform_real_distribution<float> u(0, 3);
    for (int trial = 0; trial < 20; ++trial) {
        StageMaps s;
        const std::size_t sizes[3] = {16, 8, 4};
        for (std::size_t i = 0; i < 3; ++i) {
            s.stages[i] = FeatureTensor(3 + i, sizes[i], sizes[i]);
            for (auto& v : s.stages[i].data) v = u(rng);
        }
        const auto got = fuse_activations(s, 64, 64);
        std::vector<long double> acc(16 * 16, 0.0L);
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t n = sizes[i] * sizes[i];
            std::vector<long double> sum(n, 0.0L);
            for (std::size_t c = 0; c < s.stages[i].channels; ++c)
                for (std::size_t p = 0; p < n; ++p) sum[p] += s.stages[i].data[c * n + p];
            const auto [lo, hi] = std::minmax_element(sum.begin(), sum.end());
            const long double a = *lo, b = *hi;
            for (auto& v : sum) v = b > a ? (v - a) / (b - a) : 0.0L;
            const auto up = oracle_resize(sum, sizes[i], sizes[i], 16, 16);
            for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += up[p];
        }
        for (auto& v : acc) v /= 3;
        const auto want = oracle_resize(acc, 16, 16, 64, 64);
        for (std::size_t p = 0; p < want.size(); ++p) {
            ASSERT_NEAR(got[p], static_cast<double>(want[p]), 1e-6);
            ASSERT_GE(got[p], 0.0);
            ASSERT_LE(got[p], 1.0);
        }
    }
}

TEST(InterestMask, PopcountLaw) {
    RealGrid a(224, 224);
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u;
    for (auto& v : a.values()) v = u(rng);
    const auto m = interest_mask(a, 0.001);
    EXPECT_EQ(std::count(m.mask.values().begin(), m.mask.values().end(), 1), 51);
    EXPECT_EQ(interest_count(50176, 0.001), 51u);
    for (double tau : {0.0005, 0.01, 0.37}) {
        const auto k = interest_mask(a, tau);
        EXPECT_EQ(static_cast<std::size_t>(std::count(k.mask.values().begin(), k.mask.values().end(), 1)),
                  static_cast<std::size_t>(std::ceil(tau * 50176 - 1e-9)));
    }
}

TEST(InterestMask, FullAndSingleMaximum) {
    RealGrid a(10, 10, 0.25);
    const auto all = interest_mask(a, 1.0);
    for (auto v : all.mask.values()) EXPECT_EQ(v, 1);
    a(3, 7) = 0.9;
    const auto m = interest_mask(a, 0.01);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.mask[i], i == 37 ? 1 : 0);
    EXPECT_THROW(interest_mask(a, 0.0), ArgumentError);
    EXPECT_THROW(interest_mask(a, 1.1), ArgumentError);
}

TEST(InterestMask, TiesGoToEarlierPixels) {
    RealGrid a(4, 4, 1.0);
    const auto m = interest_mask(a, 3.0 / 16);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(m.mask[i], i < 3 ? 1 : 0);
}

TEST(Imgproc, ResizeAndBlurPreserveConstants) {
    RealGrid c(7, 9, 3.25);
    const auto resized = resize_bilinear(c, 31, 17);
    const auto blurred = gaussian_blur(c, 4.0);
    const auto normalized = minmax_normalize(c);
    for (double v : resized.values()) EXPECT_NEAR(v, 3.25, 1e-12);
    for (double v : blurred.values()) EXPECT_NEAR(v, 3.25, 1e-12);
    for (double v : normalized.values()) EXPECT_EQ(v, 0.0);
}
