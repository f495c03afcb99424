#include "zal3d/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "zal3d/binary_io.hpp"
#include "zal3d/parallel.hpp"

namespace zal3d {

void ScoreConfig::validate() const {
    if (b < 1) throw ConfigError("b must be at least 1");
    if (!(eta >= 0)) throw ConfigError("eta must be non-negative");
    if (!(w_d >= 0) || !(w_c >= 0) || !(w_d + w_c > 0)) throw ConfigError("fusion weights must be non-negative with a positive sum");
    if (!(blur_sigma > 0)) throw ConfigError("blur sigma must be positive");
}

std::vector<BankHit> nearest_rows(const FeatureMatrix& test, const MemoryBank& bank) {
    std::vector<BankHit> hits(test.rows());
    parallel_for(test.rows(), [&](std::size_t i) { hits[i] = nn_query(bank, test.row(i)); });
    return hits;
}

MaxDistance max_distance(std::span<const BankHit> hits) {
    if (hits.empty()) throw ArgumentError("no test features");
    MaxDistance top{0, hits[0].row, hits[0].distance};
    for (std::size_t i = 1; i < hits.size(); ++i)
        if (hits[i].distance > top.score) top = {i, hits[i].row, hits[i].distance};
    return top;
}

MaxDistance max_distance(const FeatureMatrix& test, const MemoryBank& bank) {
    if (test.rows() == 0) throw ArgumentError("no test features");
    const auto hits = nearest_rows(test, bank);
    return max_distance(hits);
}

double dist_score(const FeatureMatrix& test, const MemoryBank& bank, const MaxDistance& top, const ScoreConfig& cfg) {
    const auto neighbours = knn_rows(bank, bank.features.row(top.bank_row), cfg.b);
    const auto x = test.row(top.patch);
    std::vector<double> d;
    for (const auto& n : neighbours) d.push_back(feature_distance(x, bank.features.row(n.row)));
    const double m = *std::max_element(d.begin(), d.end());
    double s = 0.0;
    for (double v : d) s += std::exp(v - m);
    const double lse = m + std::log(s);
    return (1.0 - std::exp(top.score - lse)) * top.score;
}

double dist_score(const FeatureMatrix& test, const MemoryBank& bank, const ScoreConfig& cfg) {
    return dist_score(test, bank, max_distance(test, bank), cfg);
}

RealGrid patch_score_map(std::span<const double> per_patch, const PatchLayout& layout, std::size_t height,
                         std::size_t width, double sigma) {
    const Grid<double> grid = realign(per_patch, layout);
    return gaussian_blur(resize_bilinear(grid, height, width), sigma);
}

RealGrid dist_score_map(const FeatureMatrix& test, const MemoryBank& bank, const PatchLayout& layout,
                        std::size_t height, std::size_t width, const ScoreConfig& cfg) {
    const auto hits = nearest_rows(test, bank);
    std::vector<double> d(hits.size());
    for (std::size_t i = 0; i < hits.size(); ++i) d[i] = hits[i].distance;
    return patch_score_map(d, layout, height, width, cfg.blur_sigma);
}

PatchPoints perturb(const PointNet& classifier, std::span<const Vec3> patch, double eta, std::size_t patch_id) {
    PatchPoints out(patch.begin(), patch.end());
    if (eta == 0.0) return out;
    const auto g = input_grad(classifier, patch);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!g[i].allFinite()) throw ScoringError("non-finite input gradient for patch " + std::to_string(patch_id));
        out[i] += eta * g[i];
    }
    return out;
}

std::vector<double> patch_probabilities(const PointNet& classifier, std::span<const PatchPoints> patches) {
    std::vector<double> p(patches.size());
    parallel_for(patches.size(), [&](std::size_t i) { p[i] = classify(classifier, patches[i]); });
    return p;
}

double cls_score(std::span<const double> probabilities) {
    if (probabilities.empty()) throw ArgumentError("no patch probabilities");
    return *std::max_element(probabilities.begin(), probabilities.end());
}

double cls_score(const PointNet& classifier, std::span<const PatchPoints> perturbed) {
    return cls_score(patch_probabilities(classifier, perturbed));
}

RealGrid cls_score_map(std::span<const double> probabilities, const PatchLayout& layout, std::size_t height,
                       std::size_t width, const ScoreConfig& cfg) {
    return patch_score_map(probabilities, layout, height, width, cfg.blur_sigma);
}

double fuse(double dist, double cls, const ScoreConfig& cfg) { return cfg.w_d * dist + cfg.w_c * cls; }

RealGrid fuse(const RealGrid& dist, const RealGrid& cls, const ScoreConfig& cfg) {
    if (dist.height() != cls.height() || dist.width() != cls.width()) throw ArgumentError("fused maps differ in shape");
    RealGrid out(dist.height(), dist.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fuse(dist[i], cls[i], cfg);
    return out;
}

namespace {

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) { lo = std::min(lo, v), hi = std::max(hi, v); }
    double apply(double v) const { return hi > lo ? (v - lo) / (hi - lo) : 0.0; }
};

}  // namespace

FusedScores fuse_test_set(const BranchScores& br, const ScoreConfig& cfg) {
    const std::size_t n = br.dist.size();
    const bool has_cls = !br.cls.empty();
    const bool has_maps = !br.dist_maps.empty();
    if (has_cls && br.cls.size() != n) throw ArgumentError("branch score counts differ");
    if (has_maps && br.dist_maps.size() != n) throw ArgumentError("one distance map per sample required");
    if (has_cls && has_maps && br.cls_maps.size() != n) throw ArgumentError("one classification map per sample required");

    Range ds, cs, dm, cm;
    if (cfg.normalize_before_fuse) {
        for (double v : br.dist) ds.add(v);
        for (double v : br.cls) cs.add(v);
        for (const auto& m : br.dist_maps)
            for (double v : m.values()) dm.add(v);
        for (const auto& m : br.cls_maps)
            for (double v : m.values()) cm.add(v);
    }
    auto norm = [&](const Range& r, double v) { return cfg.normalize_before_fuse ? r.apply(v) : v; };

    FusedScores out;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = has_cls ? norm(cs, br.cls[i]) : 0.0;
        out.scores.push_back(fuse(norm(ds, br.dist[i]), c, cfg));
    }
    if (has_maps) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& d = br.dist_maps[i];
            if (has_cls && (br.cls_maps[i].height() != d.height() || br.cls_maps[i].width() != d.width()))
                throw ArgumentError("fused maps differ in shape");
            RealGrid m(d.height(), d.width());
            for (std::size_t p = 0; p < m.size(); ++p) {
                const double c = has_cls ? norm(cm, br.cls_maps[i][p]) : 0.0;
                m[p] = fuse(norm(dm, d[p]), c, cfg);
            }
            out.maps.push_back(std::move(m));
        }
    }
    return out;
}

void save_score_map(const RealGrid& map, const std::filesystem::path& path) {
    io::Writer w;
    w.magic("ZALM");
    w.u32(static_cast<std::uint32_t>(map.height()));
    w.u32(static_cast<std::uint32_t>(map.width()));
    for (double v : map.values()) w.f32(static_cast<float>(v));
    w.write_file(path);
}

RealGrid load_score_map(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("ZALM");
    const std::size_t h = r.u32(), w = r.u32();
    if (h * w * 4 > r.remaining()) throw IoError(r.name() + ": truncated payload");
    if (h * w * 4 < r.remaining()) throw FormatError(r.name() + ": trailing bytes");
    const auto v = r.f32s(h * w);
    RealGrid out(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) throw FormatError(r.name() + ": non-finite score");
        out[i] = v[i];
    }
    return out;
}

void save_heatmap_pgm(const RealGrid& map, double lo, double hi, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "P5\n" << map.width() << ' ' << map.height() << "\n255\n";
    for (double v : map.values()) {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0))));
    }
}

}  // namespace zal3d
