#include "zal3d/imgproc.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace zal3d {

namespace {

struct Tap {
    std::size_t i0, i1;
    double w1;
};

std::vector<Tap> linear_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = Tap{i0, i1, s - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

RealGrid resize_bilinear(const RealGrid& src, std::size_t height, std::size_t width) {
    if (src.size() == 0 || height == 0 || width == 0) throw ArgumentError("resize_bilinear: empty grid");
    const auto ty = linear_taps(src.height(), height);
    const auto tx = linear_taps(src.width(), width);
    RealGrid out(height, width);
    for (std::size_t r = 0; r < height; ++r) {
        const Tap& a = ty[r];
        for (std::size_t c = 0; c < width; ++c) {
            const Tap& b = tx[c];
            const double top = src(a.i0, b.i0) + b.w1 * (src(a.i0, b.i1) - src(a.i0, b.i0));
            const double bot = src(a.i1, b.i0) + b.w1 * (src(a.i1, b.i1) - src(a.i1, b.i0));
            out(r, c) = top + a.w1 * (bot - top);
        }
    }
    return out;
}

RealGrid gaussian_blur(const RealGrid& src, double sigma) {
    if (!(sigma > 0.0)) throw ArgumentError("gaussian_blur: sigma must be positive");
    const auto radius = static_cast<long>(std::ceil(4.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (long i = -radius; i <= radius; ++i)
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));

    const long h = static_cast<long>(src.height()), w = static_cast<long>(src.width());
    auto pass = [&](const RealGrid& in, bool horizontal) {
        RealGrid out(in.height(), in.width());
        for (long r = 0; r < h; ++r)
            for (long c = 0; c < w; ++c) {
                double acc = 0.0, norm = 0.0;
                for (long k = -radius; k <= radius; ++k) {
                    const long rr = horizontal ? r : r + k;
                    const long cc = horizontal ? c + k : c;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                    const double kw = kernel[static_cast<std::size_t>(k + radius)];
                    acc += kw * in(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
                    norm += kw;
                }
                out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc / norm;
            }
        return out;
    };
    return pass(pass(src, true), false);
}

RealGrid minmax_normalize(const RealGrid& src) {
    RealGrid out(src.height(), src.width(), 0.0);
    if (src.size() == 0) return out;
    const auto [lo, hi] = std::minmax_element(src.values().begin(), src.values().end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = (src[i] - *lo) / range;
    return out;
}

}  // namespace zal3d
