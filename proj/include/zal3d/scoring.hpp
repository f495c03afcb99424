#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "zal3d/bank.hpp"
#include "zal3d/data.hpp"
#include "zal3d/imgproc.hpp"
#include "zal3d/nn.hpp"

namespace zal3d {

struct ScoreConfig {
    std::size_t b = 3;
    double eta = 0.1;
    double w_d = 0.5;
    double w_c = 0.5;
    double blur_sigma = 4.0;
    bool normalize_before_fuse = true;

    void validate() const;
};

/// Nearest bank row of every test feature (parallel over rows).
std::vector<BankHit> nearest_rows(const FeatureMatrix& test, const MemoryBank& bank);

struct MaxDistance {
    std::size_t patch = 0;     // index of the most distant test feature
    std::size_t bank_row = 0;  // its nearest bank row
    double score = 0.0;        // that distance
};

/// Throws ArgumentError on an empty test set; ties go to the smallest patch index.
MaxDistance max_distance(const FeatureMatrix& test, const MemoryBank& bank);
MaxDistance max_distance(std::span<const BankHit> hits);

/// (1 - exp d(x*, f*) / sum over the b rows nearest to f* of exp d(x*, f)) * S*,
/// evaluated in log-sum-exp form.
double dist_score(const FeatureMatrix& test, const MemoryBank& bank, const ScoreConfig& cfg);
double dist_score(const FeatureMatrix& test, const MemoryBank& bank, const MaxDistance& top, const ScoreConfig& cfg);

/// Per-patch values -> rows x cols grid -> bilinear resize to height x width -> Gaussian blur.
RealGrid patch_score_map(std::span<const double> per_patch, const PatchLayout& layout, std::size_t height,
                         std::size_t width, double sigma);

RealGrid dist_score_map(const FeatureMatrix& test, const MemoryBank& bank, const PatchLayout& layout,
                        std::size_t height, std::size_t width, const ScoreConfig& cfg);

/// x + eta * d(-log p_hat)/dx. Throws ScoringError naming `patch_id` when the gradient is not finite.
PatchPoints perturb(const PointNet& classifier, std::span<const Vec3> patch, double eta, std::size_t patch_id = 0);

/// Class-1 probability of every patch (parallel).
std::vector<double> patch_probabilities(const PointNet& classifier, std::span<const PatchPoints> patches);

/// Maximum patch probability. Throws ArgumentError on an empty list.
double cls_score(std::span<const double> probabilities);
double cls_score(const PointNet& classifier, std::span<const PatchPoints> perturbed);

RealGrid cls_score_map(std::span<const double> probabilities, const PatchLayout& layout, std::size_t height,
                       std::size_t width, const ScoreConfig& cfg);

/// w_d * dist + w_c * cls, no normalisation.
double fuse(double dist, double cls, const ScoreConfig& cfg);
RealGrid fuse(const RealGrid& dist, const RealGrid& cls, const ScoreConfig& cfg);

struct BranchScores {
    std::vector<double> dist, cls;             // per sample; cls may be empty (branch off)
    std::vector<RealGrid> dist_maps, cls_maps; // per sample; cls_maps may be empty
};

struct FusedScores {
    std::vector<double> scores;
    std::vector<RealGrid> maps;
};

/// Test-set fusion. With normalize_before_fuse each branch is min-max scaled
/// over the whole test set (all samples, all pixels for maps) first. A missing
/// classification branch contributes zero.
FusedScores fuse_test_set(const BranchScores& branches, const ScoreConfig& cfg);

/// "ZALM", u32 H, u32 W, f32 payload.
void save_score_map(const RealGrid& map, const std::filesystem::path& path);
RealGrid load_score_map(const std::filesystem::path& path);

/// 8-bit greyscale PGM of the map scaled by [lo, hi].
void save_heatmap_pgm(const RealGrid& map, double lo, double hi, const std::filesystem::path& path);

}  // namespace zal3d
