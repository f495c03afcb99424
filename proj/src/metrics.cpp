#include "zal3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <numeric>

namespace zal3d {

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
    std::size_t pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ArgumentError("labels must be 0 or 1");
        pos += l == 1;
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw MetricError("AUROC needs both normal and anomalous samples");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over ties, 1-based
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum += avg;
        i = j;
    }
    const double p = static_cast<double>(pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

std::vector<Region> connected_components(const GroundTruthMask& mask) {
    const std::size_t h = mask.height(), w = mask.width();
    std::vector<char> seen(mask.size(), 0);
    std::vector<Region> out;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || seen[start]) continue;
        Region r;
        seen[start] = 1;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            r.pixels.push_back(p);
            const auto pr = static_cast<long>(p / w), pc = static_cast<long>(p % w);
            for (long dr = -1; dr <= 1; ++dr)
                for (long dc = -1; dc <= 1; ++dc) {
                    const long rr = pr + dr, cc = pc + dc;
                    if ((dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                    const auto q = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
                    if (mask[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
        }
        std::sort(r.pixels.begin(), r.pixels.end());
        out.push_back(std::move(r));
    }
    return out;
}

AuproResult aupro_curve(std::span<const RealGrid> maps, std::span<const GroundTruthMask> masks, double fpr_limit) {
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ArgumentError("fpr_limit must lie in (0, 1]");
    if (maps.size() != masks.size()) throw ArgumentError("one ground-truth mask per score map required");

    struct Pixel {
        double score;
        std::int64_t region;  // -1 for normal pixels
    };
    std::vector<Pixel> pixels;
    std::vector<double> region_weight;  // 1 / region size
    std::size_t normal = 0;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        const auto& m = maps[s];
        const auto& g = masks[s];
        if (m.height() != g.height() || m.width() != g.width())
            throw ArgumentError("score map " + std::to_string(s) + " and its mask differ in shape");
        std::vector<std::int64_t> label(g.size(), -1);
        for (const auto& r : connected_components(g)) {
            for (auto p : r.pixels) label[p] = static_cast<std::int64_t>(region_weight.size());
            region_weight.push_back(1.0 / static_cast<double>(r.pixels.size()));
        }
        for (std::size_t p = 0; p < m.size(); ++p) {
            if (!std::isfinite(m[p])) throw ArgumentError("non-finite score in map " + std::to_string(s));
            pixels.push_back({m[p], label[p]});
            normal += label[p] < 0;
        }
    }
    if (region_weight.empty()) throw MetricError("AUPRO needs at least one anomalous pixel");
    if (normal == 0) throw MetricError("AUPRO needs at least one normal pixel");

    std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
    const double regions = static_cast<double>(region_weight.size());
    AuproResult out;
    out.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t fp = 0;
    double overlap = 0.0;  // sum over regions of covered fraction
    double area = 0.0;
    for (std::size_t i = 0; i < pixels.size();) {
        const double t = pixels[i].score;
        for (; i < pixels.size() && pixels[i].score == t; ++i) {
            if (pixels[i].region < 0) ++fp;
            else overlap += region_weight[static_cast<std::size_t>(pixels[i].region)];
        }
        const CurvePoint prev = out.curve.back();
        CurvePoint cur{t, static_cast<double>(fp) / static_cast<double>(normal), std::min(1.0, overlap / regions)};
        if (cur.fpr >= fpr_limit) {
            const double span = cur.fpr - prev.fpr;
            const double frac = span > 0 ? (fpr_limit - prev.fpr) / span : 1.0;
            const double pro = prev.pro + frac * (cur.pro - prev.pro);
            area += 0.5 * (prev.pro + pro) * (fpr_limit - prev.fpr);
            out.curve.push_back({t, fpr_limit, pro});
            break;
        }
        area += 0.5 * (prev.pro + cur.pro) * (cur.fpr - prev.fpr);
        out.curve.push_back(cur);
    }
    out.value = area / fpr_limit;
    return out;
}

double aupro(std::span<const RealGrid> maps, std::span<const GroundTruthMask> masks, double fpr_limit) {
    return aupro_curve(maps, masks, fpr_limit).value;
}

EvalResult evaluate(std::span<const EvalSample> samples, double fpr_limit) {
    EvalResult out;
    out.fpr_limit = fpr_limit;
    auto compute = [&](const std::vector<const EvalSample*>& subset, ClassMetrics& cm, std::vector<CurvePoint>* curve) {
        std::vector<double> scores;
        std::vector<int> labels;
        std::vector<RealGrid> maps;
        std::vector<GroundTruthMask> masks;
        bool any_pos = false, any_neg = false;
        std::size_t gt_pixels = 0;
        for (const auto* s : subset) {
            if (s->map.height() != s->mask.height() || s->map.width() != s->mask.width())
                throw ArgumentError("score map and mask differ in shape for a sample");
            scores.push_back(s->score);
            labels.push_back(s->label);
            maps.push_back(s->map);
            masks.push_back(s->mask);
            any_pos |= s->label == 1;
            any_neg |= s->label == 0;
            for (auto v : s->mask.values()) gt_pixels += v != 0;
        }
        cm.samples = subset.size();
        if (any_pos && any_neg) cm.image_auroc = auroc(scores, labels);
        if (gt_pixels > 0) {
            auto r = aupro_curve(maps, masks, fpr_limit);
            cm.pixel_aupro = r.value;
            if (curve) *curve = std::move(r.curve);
        }
    };
    std::vector<const EvalSample*> all;
    if (!samples.empty()) {
        const auto h = samples[0].map.height(), w = samples[0].map.width();
        for (const auto& s : samples)
            if (s.map.height() != h || s.map.width() != w) throw ArgumentError("samples have mixed map sizes");
    }
    for (const auto& s : samples) all.push_back(&s);
    ClassMetrics overall;
    compute(all, overall, &out.curve);
    if (!overall.image_auroc) throw MetricError("AUROC needs both normal and anomalous samples");
    if (!overall.pixel_aupro) throw MetricError("AUPRO needs at least one anomalous pixel");
    out.image_auroc = *overall.image_auroc;
    out.pixel_aupro = *overall.pixel_aupro;

    std::map<std::string, std::vector<const EvalSample*>> by_class;
    for (const auto& s : samples) by_class[s.class_label].push_back(&s);
    for (const auto& [name, subset] : by_class) compute(subset, out.per_class[name], nullptr);
    return out;
}

std::vector<CurvePoint> thin_curve(std::span<const CurvePoint> curve, std::size_t max_points) {
    if (curve.size() <= max_points || max_points < 2) return {curve.begin(), curve.end()};
    std::vector<CurvePoint> out;
    const double step = static_cast<double>(curve.size() - 1) / static_cast<double>(max_points - 1);
    for (std::size_t i = 0; i < max_points; ++i)
        out.push_back(curve[static_cast<std::size_t>(std::llround(static_cast<double>(i) * step))]);
    return out;
}

void save_curve_csv(std::span<const CurvePoint> curve, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "threshold,fpr,pro\n";
    char buf[128];
    for (const auto& c : curve) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", c.threshold, c.fpr, c.pro);
        f << buf;
    }
}

}  // namespace zal3d
