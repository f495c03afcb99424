#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zal3d/data.hpp"
#include "zal3d/imgproc.hpp"

namespace zal3d {

/// Mann-Whitney AUROC; ties count one half. Throws MetricError unless both classes occur.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct Region {
    std::vector<std::size_t> pixels;  // row-major indices, ascending
};

/// 8-connected components of the non-zero pixels, in order of their first pixel.
std::vector<Region> connected_components(const GroundTruthMask& mask);

struct CurvePoint {
    double threshold;
    double fpr;
    double pro;
};

struct AuproResult {
    double value = 0.0;
    std::vector<CurvePoint> curve;  // starts at (0, 0), ends at fpr_limit
};

/// Area under mean per-region overlap vs false-positive rate on [0, fpr_limit],
/// divided by fpr_limit. Every distinct pooled score is a threshold. Throws
/// MetricError without anomalous or without normal pixels, ArgumentError on
/// misaligned inputs.
AuproResult aupro_curve(std::span<const RealGrid> maps, std::span<const GroundTruthMask> masks, double fpr_limit = 0.3);
double aupro(std::span<const RealGrid> maps, std::span<const GroundTruthMask> masks, double fpr_limit = 0.3);

struct ClassMetrics {
    std::optional<double> image_auroc;
    std::optional<double> pixel_aupro;
    std::size_t samples = 0;
};

struct EvalResult {
    double image_auroc = 0.0;
    double pixel_aupro = 0.0;
    double fpr_limit = 0.3;
    std::map<std::string, ClassMetrics> per_class;
    std::vector<CurvePoint> curve;
};

struct EvalSample {
    std::string class_label;
    double score = 0.0;
    int label = 0;  // 1 anomalous
    RealGrid map;
    GroundTruthMask mask;  // all zero for normal samples
};

/// Image AUROC over sample scores and pixel AUPRO over maps, overall and per class
/// (per-class entries are omitted where a class lacks the needed labels).
EvalResult evaluate(std::span<const EvalSample> samples, double fpr_limit = 0.3);

/// Curve thinned to at most max_points points for audit dumps (first and last kept).
std::vector<CurvePoint> thin_curve(std::span<const CurvePoint> curve, std::size_t max_points = 2000);

void save_curve_csv(std::span<const CurvePoint> curve, const std::filesystem::path& path);

}  // namespace zal3d
