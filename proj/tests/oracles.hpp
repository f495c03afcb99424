#pragma once

// Straight-line extended-precision reference implementations used by the unit
// tests and the acceptance binary. They share no code with the library.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace zal3d::oracle {

using LD = long double;
using VecL = std::vector<LD>;

template <typename V>
VecL widen(const V& v) {
    VecL out;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(v.size()); ++i) out.push_back(static_cast<LD>(v[i]));
    return out;
}

inline LD dot(const VecL& a, const VecL& b) {
    LD s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline LD norm(const VecL& a) { return std::sqrt(dot(a, a)); }

inline LD cosine(const VecL& a, const VecL& b) { return dot(a, b) / (norm(a) * norm(b)); }

inline LD distance(std::span<const float> a, std::span<const float> b) {
    LD s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const LD d = static_cast<LD>(a[i]) - static_cast<LD>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

/// Contrastive loss with negatives-only denominator.
inline LD contrastive(const std::vector<VecL>& f, const std::vector<std::size_t>& anchors,
                      const std::vector<std::vector<std::size_t>>& pos, const std::vector<std::vector<std::size_t>>& neg,
                      LD t) {
    LD total = 0;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        LD denom = 0;
        for (auto n : neg[a]) denom += std::exp(cosine(f[anchors[a]], f[n]) / t);
        LD acc = 0;
        for (auto p : pos[a]) acc += -std::log(std::exp(cosine(f[anchors[a]], f[p]) / t) / denom);
        total += acc / static_cast<LD>(pos[a].size());
    }
    return total;
}

/// cos(P * fpfh, learned) with P given row-major (rows x cols).
inline LD disentangle(const std::vector<VecL>& projection, const VecL& fpfh, const VecL& learned) {
    VecL aligned;
    for (const auto& row : projection) aligned.push_back(dot(row, fpfh));
    return cosine(aligned, learned);
}

inline LD cross_entropy(const std::vector<double>& p, const std::vector<int>& y) {
    LD s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        LD q = std::clamp<LD>(p[i], 1e-7L, 1.0L - 1e-7L);
        s += y[i] ? std::log(q) : std::log(1.0L - q);
    }
    return -s / static_cast<LD>(p.size());
}

/// Most distant test row from the bank by brute force: {patch, bank row, distance}.
struct Top {
    std::size_t patch, row;
    LD score;
};

inline Top max_distance(const std::vector<std::vector<float>>& test, const std::vector<std::vector<float>>& bank) {
    Top best{0, 0, -1};
    for (std::size_t i = 0; i < test.size(); ++i) {
        std::size_t arg = 0;
        LD d = distance(test[i], bank[0]);
        for (std::size_t j = 1; j < bank.size(); ++j) {
            const LD e = distance(test[i], bank[j]);
            if (e < d) d = e, arg = j;
        }
        if (d > best.score) best = {i, arg, d};
    }
    return best;
}

/// (1 - e^{d(x*, f*)} / sum over the b rows nearest f* of e^{d(x*, f)}) * S*
inline LD reweighted(const std::vector<std::vector<float>>& test, const std::vector<std::vector<float>>& bank,
                     std::size_t b) {
    const Top top = max_distance(test, bank);
    std::vector<std::pair<LD, std::size_t>> order;
    for (std::size_t j = 0; j < bank.size(); ++j) order.push_back({distance(bank[top.row], bank[j]), j});
    std::sort(order.begin(), order.end());
    LD denom = 0;
    for (std::size_t k = 0; k < b; ++k) denom += std::exp(distance(test[top.patch], bank[order[k].second]));
    return (1 - std::exp(top.score) / denom) * top.score;
}

using GridL = std::vector<std::vector<LD>>;

/// Half-pixel bilinear resize with edge clamping.
inline GridL resize(const GridL& src, std::size_t h, std::size_t w) {
    const std::size_t sh = src.size(), sw = src[0].size();
    auto coord = [](std::size_t o, std::size_t in, std::size_t out) {
        LD s = (static_cast<LD>(o) + 0.5L) * static_cast<LD>(in) / static_cast<LD>(out) - 0.5L;
        return std::clamp<LD>(s, 0, static_cast<LD>(in - 1));
    };
    GridL out(h, std::vector<LD>(w));
    for (std::size_t r = 0; r < h; ++r) {
        const LD y = coord(r, sh, h);
        const auto y0 = static_cast<std::size_t>(std::floor(y));
        const auto y1 = std::min(y0 + 1, sh - 1);
        const LD fy = y - static_cast<LD>(y0);
        for (std::size_t c = 0; c < w; ++c) {
            const LD x = coord(c, sw, w);
            const auto x0 = static_cast<std::size_t>(std::floor(x));
            const auto x1 = std::min(x0 + 1, sw - 1);
            const LD fx = x - static_cast<LD>(x0);
            out[r][c] = (1 - fy) * ((1 - fx) * src[y0][x0] + fx * src[y0][x1]) +
                        fy * ((1 - fx) * src[y1][x0] + fx * src[y1][x1]);
        }
    }
    return out;
}

/// Direct 2-d Gaussian blur, kernel radius ceil(4 sigma), renormalised over in-bounds taps.
inline GridL blur(const GridL& src, LD sigma) {
    const long h = static_cast<long>(src.size()), w = static_cast<long>(src[0].size());
    const long rad = static_cast<long>(std::ceil(4 * sigma));
    GridL out(static_cast<std::size_t>(h), std::vector<LD>(static_cast<std::size_t>(w)));
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            LD acc = 0, nrm = 0;
            for (long i = std::max(0L, r - rad); i <= std::min(h - 1, r + rad); ++i)
                for (long j = std::max(0L, c - rad); j <= std::min(w - 1, c + rad); ++j) {
                    const LD k = std::exp(-static_cast<LD>((i - r) * (i - r) + (j - c) * (j - c)) / (2 * sigma * sigma));
                    acc += k * src[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                    nrm += k;
                }
            out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = acc / nrm;
        }
    return out;
}

/// Per-patch values in row-major grid order -> rows x cols -> resize -> blur.
inline GridL score_map(const std::vector<LD>& per_patch, std::size_t rows, std::size_t cols, std::size_t h,
                       std::size_t w, LD sigma) {
    GridL g(rows, std::vector<LD>(cols));
    for (std::size_t i = 0; i < per_patch.size(); ++i) g[i / cols][i % cols] = per_patch[i];
    return blur(resize(g, h, w), sigma);
}

/// Min-max normalisation over a whole pooled set; a constant set maps to 0.
inline std::vector<LD> minmax(const std::vector<LD>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<LD> out(v.size(), 0);
    if (*hi > *lo)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
    return out;
}

/// Pairwise Mann-Whitney AUROC, ties one half.
inline LD auroc(const std::vector<double>& s, const std::vector<int>& y) {
    LD num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                den += 1;
                num += s[i] > s[j] ? 1 : (s[i] == s[j] ? 0.5L : 0);
            }
    return num / den;
}

}  // namespace zal3d::oracle
