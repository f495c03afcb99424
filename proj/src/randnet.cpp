#include "zal3d/randnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "zal3d/rng.hpp"

namespace zal3d {

namespace {

constexpr std::array<std::size_t, 4> kBlocksPerStage{3, 4, 6, 3};
constexpr std::array<std::size_t, 4> kStageWidths{64, 128, 256, 512};
constexpr std::size_t kExpansion = 4;
constexpr float kNormEps = 1e-5f;

std::size_t scaled(std::size_t channels, double multiplier) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(channels) * multiplier)));
}

ConvLayer he_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, Rng& rng) {
    ConvLayer conv{in, out, k, stride, k / 2, std::vector<float>(out * in * k * k), std::vector<float>(out, 0.0f)};
    const double sigma = std::sqrt(2.0 / static_cast<double>(in * k * k));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (float& w : conv.weight) {
        double z;
        do z = gauss(rng);
        while (std::abs(z) > 4.0);
        w = static_cast<float>(sigma * z);
    }
    return conv;
}

NormLayer fresh_norm(std::size_t channels) {
    return NormLayer{std::vector<float>(channels, 1.0f), std::vector<float>(channels, 0.0f)};
}

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

FeatureTensor conv2d(const FeatureTensor& x, const ConvLayer& conv, PaddingMode padding) {
    const std::size_t k = conv.kernel, s = conv.stride, p = conv.padding;
    const std::size_t oh = (x.height + 2 * p - k) / s + 1;
    const std::size_t ow = (x.width + 2 * p - k) / s + 1;
    FeatureTensor y(conv.out_channels, oh, ow);
    Eigen::Map<const MatrixRM> w(conv.weight.data(), static_cast<Eigen::Index>(conv.out_channels),
                                 static_cast<Eigen::Index>(conv.in_channels * k * k));
    Eigen::Map<MatrixRM> out(y.data.data(), static_cast<Eigen::Index>(conv.out_channels),
                             static_cast<Eigen::Index>(oh * ow));
    if (k == 1 && s == 1) {
        Eigen::Map<const MatrixRM> in(x.data.data(), static_cast<Eigen::Index>(x.channels),
                                      static_cast<Eigen::Index>(x.height * x.width));
        out.noalias() = w * in;
    } else {
        MatrixRM cols(static_cast<Eigen::Index>(conv.in_channels * k * k), static_cast<Eigen::Index>(oh * ow));
        const long h = static_cast<long>(x.height), wd = static_cast<long>(x.width);
        for (std::size_t c = 0; c < conv.in_channels; ++c) {
            const float* src = x.channel(c);
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    float* row = cols.row(static_cast<Eigen::Index>((c * k + ky) * k + kx)).data();
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                        const bool y_in = iy >= 0 && iy < h;
                        iy = std::clamp(iy, 0L, h - 1);
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                            const bool inside = y_in && ix >= 0 && ix < wd;
                            ix = std::clamp(ix, 0L, wd - 1);
                            row[oy * ow + ox] = (inside || padding == PaddingMode::replicate)
                                                    ? src[static_cast<std::size_t>(iy * wd + ix)]
                                                    : 0.0f;
                        }
                    }
                }
        }
        out.noalias() = w * cols;
    }
    for (std::size_t c = 0; c < conv.out_channels; ++c)
        if (conv.bias[c] != 0.0f)
            for (std::size_t i = 0; i < oh * ow; ++i) y.channel(c)[i] += conv.bias[c];
    return y;
}

void normalize(FeatureTensor& x, const NormLayer& norm, NormMode mode) {
    const std::size_t n = x.height * x.width;
    for (std::size_t c = 0; c < x.channels; ++c) {
        float* v = x.channel(c);
        double mean = 0.0, var = 1.0;
        if (mode == NormMode::spatial) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += v[i];
            mean = s / static_cast<double>(n);
            double s2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) s2 += (v[i] - mean) * (v[i] - mean);
            var = s2 / static_cast<double>(n);
        }
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        const double a = norm.scale[c] * inv, b = norm.shift[c] - mean * a;
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(a * v[i] + b);
    }
}

void relu(FeatureTensor& x) {
    for (float& v : x.data) v = std::max(v, 0.0f);
}

FeatureTensor max_pool_3x3_s2(const FeatureTensor& x) {
    const std::size_t oh = (x.height + 2 - 3) / 2 + 1, ow = (x.width + 2 - 3) / 2 + 1;
    FeatureTensor y(x.channels, oh, ow);
    for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                float m = -std::numeric_limits<float>::infinity();
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long iy = static_cast<long>(2 * oy) + dy, ix = static_cast<long>(2 * ox) + dx;
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(x.height) || ix >= static_cast<long>(x.width))
                            continue;
                        m = std::max(m, x.channel(c)[static_cast<std::size_t>(iy) * x.width + static_cast<std::size_t>(ix)]);
                    }
                y.channel(c)[oy * ow + ox] = m;
            }
    return y;
}

FeatureTensor bottleneck(const FeatureTensor& x, const BottleneckBlock& b, const RandNetOptions& opt) {
    FeatureTensor out = conv2d(x, b.reduce, opt.padding);
    normalize(out, b.reduce_norm, opt.norm_mode);
    relu(out);
    out = conv2d(out, b.spatial, opt.padding);
    normalize(out, b.spatial_norm, opt.norm_mode);
    relu(out);
    out = conv2d(out, b.expand, opt.padding);
    normalize(out, b.expand_norm, opt.norm_mode);
    if (b.has_projection) {
        FeatureTensor id = conv2d(x, b.projection, opt.padding);
        normalize(id, b.projection_norm, opt.norm_mode);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += id.data[i];
    } else {
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
    }
    relu(out);
    return out;
}

std::uint64_t content_id(const RandNetParams& params, const OrderedPointMap& map, const RandNetOptions& opt) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
    };
    feed(map.points().data(), map.size() * sizeof(Point));
    feed(&params.seed, sizeof params.seed);
    feed(&params.width_multiplier, sizeof params.width_multiplier);
    const int modes[3] = {static_cast<int>(opt.norm_mode), static_cast<int>(opt.padding), opt.fill_background};
    feed(modes, sizeof modes);
    return h;
}

// Each sentinel pixel takes the value of the nearest measured pixel (breadth-first, 4-connected).
std::vector<Point> fill_sentinels(const OrderedPointMap& map) {
    std::vector<Point> pts = map.points();
    std::vector<std::uint8_t> done(pts.size(), 0);
    std::deque<std::size_t> queue;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (!is_sentinel(pts[i])) {
            done[i] = 1;
            queue.push_back(i);
        }
    const std::size_t w = map.width(), h = map.height();
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const std::size_t r = i / w, c = i % w;
        const std::size_t nb[4] = {r > 0 ? i - w : i, r + 1 < h ? i + w : i, c > 0 ? i - 1 : i, c + 1 < w ? i + 1 : i};
        for (std::size_t j : nb)
            if (!done[j]) {
                done[j] = 1;
                pts[j] = pts[i];
                queue.push_back(j);
            }
    }
    return pts;
}

}  // namespace

RandNetParams init_randnet(std::uint64_t seed, double width_multiplier) {
    if (!(width_multiplier > 0.0 && width_multiplier <= 1.0))
        throw ArgumentError("width multiplier must lie in (0, 1]");
    RandNetParams params;
    params.seed = seed;
    params.width_multiplier = width_multiplier;
    Rng rng = make_rng(seed);
    const std::size_t stem = scaled(64, width_multiplier);
    params.stem = he_conv(3, stem, 7, 2, rng);
    params.stem_norm = fresh_norm(stem);
    std::size_t in = stem;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t mid = scaled(kStageWidths[s], width_multiplier);
        const std::size_t out = scaled(kStageWidths[s] * kExpansion, width_multiplier);
        for (std::size_t b = 0; b < kBlocksPerStage[s]; ++b) {
            const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
            BottleneckBlock block;
            block.reduce = he_conv(in, mid, 1, 1, rng);
            block.spatial = he_conv(mid, mid, 3, stride, rng);
            block.expand = he_conv(mid, out, 1, 1, rng);
            block.reduce_norm = fresh_norm(mid);
            block.spatial_norm = fresh_norm(mid);
            block.expand_norm = fresh_norm(out);
            if (b == 0) {
                block.has_projection = true;
                block.projection = he_conv(in, out, 1, stride, rng);
                block.projection_norm = fresh_norm(out);
            }
            params.stages[s].push_back(std::move(block));
            in = out;
        }
    }
    return params;
}

StageMaps forward_stages(const RandNetParams& params, const OrderedPointMap& map, const RandNetOptions& options) {
    if (map.height() % 32 != 0 || map.width() % 32 != 0)
        throw ArgumentError("random network input must be divisible by 32, got " + std::to_string(map.height()) + "x" +
                            std::to_string(map.width()));
    const std::vector<Point> pts = options.fill_background ? fill_sentinels(map) : map.points();
    FeatureTensor x(3, map.height(), map.width());
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) x.channel(c)[i] = pts[i][c];

    FeatureTensor h = conv2d(x, params.stem, options.padding);
    normalize(h, params.stem_norm, options.norm_mode);
    relu(h);
    h = max_pool_3x3_s2(h);

    StageMaps maps;
    const std::uint64_t id = content_id(params, map, options);
    // The fourth stage (1/32) is not used by the attention fusion.
    for (std::size_t s = 0; s < 3; ++s) {
        for (const auto& block : params.stages[s]) h = bottleneck(h, block, options);
        maps.stages[s] = h;
        maps.source_ids[s] = id;
    }
    return maps;
}

RealGrid fuse_activations(const StageMaps& maps, std::size_t height, std::size_t width) {
    if (maps.source_ids[0] != maps.source_ids[1] || maps.source_ids[0] != maps.source_ids[2])
        throw ArgumentError("fuse_activations: stage maps come from different forward passes");
    std::array<RealGrid, 3> normed;
    for (std::size_t s = 0; s < 3; ++s) {
        const FeatureTensor& t = maps.stages[s];
        if (t.data.empty()) throw ArgumentError("fuse_activations: empty stage map");
        RealGrid sum(t.height, t.width, 0.0);
        for (std::size_t c = 0; c < t.channels; ++c)
            for (std::size_t i = 0; i < t.height * t.width; ++i) sum[i] += t.channel(c)[i];
        normed[s] = minmax_normalize(sum);
    }
    const std::size_t fh = normed[0].height(), fw = normed[0].width();
    RealGrid avg(fh, fw, 0.0);
    for (std::size_t s = 0; s < 3; ++s) {
        const RealGrid r = s == 0 ? normed[0] : resize_bilinear(normed[s], fh, fw);
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += r[i];
    }
    for (double& v : avg.values()) v /= 3.0;
    RealGrid out = resize_bilinear(avg, height, width);
    for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

std::size_t interest_count(std::size_t pixels, double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ArgumentError("tau must lie in (0, 1]");
    // guard against products such as 0.1 * 30 landing a hair above an integer
    const double raw = tau * static_cast<double>(pixels);
    const double n = std::ceil(raw - 1e-9 * std::max(1.0, raw));
    return std::clamp<std::size_t>(static_cast<std::size_t>(n), 1, pixels);
}

InterestMask interest_mask(const RealGrid& activation, double tau) {
    const std::size_t count = interest_count(activation.size(), tau);
    std::vector<std::size_t> order(activation.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(count), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          return activation[a] > activation[b] || (activation[a] == activation[b] && a < b);
                      });
    InterestMask m{GroundTruthMask(activation.height(), activation.width(), 0), tau};
    for (std::size_t i = 0; i < count; ++i) m.mask[order[i]] = 1;
    return m;
}

InterestMask attention_mask(const RandNetParams& params, const OrderedPointMap& map, double tau,
                            const RandNetOptions& options) {
    return interest_mask(fuse_activations(forward_stages(params, map, options), map.height(), map.width()), tau);
}

}  // namespace zal3d
