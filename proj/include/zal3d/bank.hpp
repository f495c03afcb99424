#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "zal3d/geometry.hpp"

namespace zal3d {

/// Block widths of a combined patch feature, in storage order [rgb | fpfh | learned].
struct FeatureLayout {
    std::size_t rgb_width = 0;
    std::size_t fpfh_width = kFpfhWidth;
    std::size_t learned_width = 32;
    bool normalize_learned = true;  // learned block scaled to unit length

    std::size_t total() const { return rgb_width + fpfh_width + learned_width; }
    bool operator==(const FeatureLayout&) const = default;
};

/// Row-major float matrix with a fixed row width.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    explicit FeatureMatrix(std::size_t width) : width_(width) {}
    FeatureMatrix(std::size_t rows, std::size_t width, std::vector<float> data);

    std::size_t rows() const { return width_ ? data_.size() / width_ : 0; }
    std::size_t width() const { return width_; }
    std::span<const float> row(std::size_t i) const { return {data_.data() + i * width_, width_}; }
    const std::vector<float>& data() const { return data_; }

    /// Throws ArgumentError when the row width differs.
    void append(std::span<const float> row);

private:
    std::size_t width_ = 0;
    std::vector<float> data_;
};

/// Concatenates [rgb | fpfh | learned]. Throws ArgumentError when a block does
/// not match the layout or is non-finite.
std::vector<float> combine(const FpfhDescriptor& fpfh, const Eigen::VectorXd& learned, std::span<const float> rgb,
                           const FeatureLayout& layout);

/// Euclidean distance, accumulated in double in element order.
double feature_distance(std::span<const float> a, std::span<const float> b);

/// Greedy k-center selection with k = max(1, round(ratio * n)). The first
/// center is drawn from the seed; later ties go to the smallest index.
std::vector<std::size_t> coreset_select(const FeatureMatrix& features, double ratio, std::uint64_t seed);

struct RowProvenance {
    std::uint32_t sample = 0;
    std::uint32_t patch = 0;
    bool operator==(const RowProvenance&) const = default;
};

struct MemoryBank {
    FeatureLayout layout;
    FeatureMatrix features;
    std::vector<RowProvenance> provenance;
    double coreset_ratio = 0.1;
    std::uint64_t seed = 0;

    std::size_t size() const { return features.rows(); }
};

/// Runs coreset selection over `features` and keeps the selected rows in selection order.
MemoryBank build_bank(const FeatureMatrix& features, std::span<const RowProvenance> provenance,
                      const FeatureLayout& layout, double ratio, std::uint64_t seed);

struct BankHit {
    std::size_t row;
    double distance;
};

/// Exact nearest row; ties go to the smallest row. Throws StateError on an
/// empty bank, ArgumentError on a width mismatch.
BankHit nn_query(const MemoryBank& bank, std::span<const float> f);
/// Exact b nearest rows in ascending (distance, row) order; requires 1 <= b <= size.
std::vector<BankHit> knn_rows(const MemoryBank& bank, std::span<const float> f, std::size_t b);

/// "ZALB" tensor container plus `<path>.json` with layout and row provenance.
void save_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);

/// Per-sample RGB features: "ZALR", u32 rows, u32 width, f32 rows x width.
void save_rgb_features(const FeatureMatrix& rgb, const std::filesystem::path& path);
FeatureMatrix load_rgb_features(const std::filesystem::path& path);

}  // namespace zal3d
