#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zal3d/data.hpp"
#include "zal3d/geometry.hpp"
#include "zal3d/randnet.hpp"

namespace zal3d {

enum class PseudoKind { none, adding, removing };

std::string to_string(PseudoKind kind);

struct PseudoProvenance {
    std::size_t normal_sample = 0;          // index into the training maps
    std::optional<std::size_t> irrelevant_sample;  // adding type only
    std::size_t anchor_pixel = 0;           // pixel of the attachment site / anchor in the normal map
    std::optional<std::size_t> patch_index; // grid patch, positives only
    std::uint64_t seed = 0;
};

/// A 64-point training patch. label is 1 exactly when kind != none
/// (normal patches are the positives of the contrastive objective and carry 0).
struct PseudoPatch {
    std::vector<Point> points;
    int label = 0;
    PseudoKind kind = PseudoKind::none;
    PseudoProvenance provenance;
};

struct SynthesisConfig {
    double tau = 0.001;
    std::size_t surrounding = 16;        // normal-surface neighbours added to the anchor centroid
    double removal_min = 0.2;
    double removal_max = 0.8;
    double adding_share = 0.5;           // adding : removing = 1 : 1
    std::size_t negatives_per_positive = 16;
    std::size_t patch_points = 64;
    double min_positive_foreground = 0.5;
    std::size_t max_positives_per_map = 0;  // 0 keeps every admitted patch
    std::size_t max_site_retries = 10;
    std::uint64_t seed = 0;
    RandNetOptions randnet;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

/// xyz at masked pixels, sentinels excluded. Throws SynthesisError when nothing remains.
std::vector<Point> extract_interest_points(const OrderedPointMap& map, const GroundTruthMask& mask);

/// Foreground of a normal map with its search index; shared by all patches cut from it.
class NormalSurface {
public:
    explicit NormalSurface(const OrderedPointMap& map);

    const KdTree& tree() const { return *tree_; }
    std::size_t size() const { return pixels_.size(); }
    std::size_t pixel(std::size_t i) const { return pixels_[i]; }

private:
    std::vector<std::size_t> pixels_;
    std::optional<KdTree> tree_;
};

/// Attaches the interest points at a random foreground site and cuts the
/// patch_points nearest points of (surface + attached points) around the anchor.
PseudoPatch make_adding_patch(const NormalSurface& surface, std::span<const Point> interest_points,
                              const SynthesisConfig& cfg, std::uint64_t seed);
PseudoPatch make_adding_patch(const OrderedPointMap& normal_map, std::span<const Point> interest_points,
                              const SynthesisConfig& cfg, std::uint64_t seed);

/// Cuts the patch_points-NN neighbourhood of a random foreground anchor, deletes
/// round(r * n) points and refills by resampling survivors with replacement.
/// forced_ratio overrides the random draw of r.
PseudoPatch make_removing_patch(const NormalSurface& surface, const SynthesisConfig& cfg, std::uint64_t seed,
                                std::optional<double> forced_ratio = std::nullopt);
PseudoPatch make_removing_patch(const OrderedPointMap& normal_map, const SynthesisConfig& cfg, std::uint64_t seed,
                                std::optional<double> forced_ratio = std::nullopt);

struct LabeledMap {
    std::string class_label;
    OrderedPointMap map;
};

struct TrainingSet {
    std::vector<PseudoPatch> positives;
    /// negatives[i * negatives_per_positive + j] belongs to positives[i]
    std::vector<PseudoPatch> negatives;
    std::size_t negatives_per_positive = 0;
};

/// Admits positives (grid patches with enough foreground), and for each emits
/// negatives_per_positive pseudo anomalies cut from the same normal map.
/// Throws ConfigError on an empty pool or when a task-irrelevant class equals test_class.
TrainingSet build_training_set(std::span<const LabeledMap> normal_maps, std::span<const LabeledMap> task_irrelevant,
                               const std::string& test_class, const RandNetParams& randnet, std::size_t patch_size,
                               const SynthesisConfig& cfg);

}  // namespace zal3d
