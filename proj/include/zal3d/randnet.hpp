#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "zal3d/data.hpp"
#include "zal3d/imgproc.hpp"

namespace zal3d {

/// Dense CHW activation tensor.
struct FeatureTensor {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> data;

    FeatureTensor() = default;
    FeatureTensor(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    float* channel(std::size_t c) { return data.data() + c * height * width; }
    const float* channel(std::size_t c) const { return data.data() + c * height * width; }
};

struct ConvLayer {
    std::size_t in_channels = 0, out_channels = 0, kernel = 1, stride = 1, padding = 0;
    std::vector<float> weight;  // [out][in][k][k]
    std::vector<float> bias;    // zero at initialisation
};

struct NormLayer {
    std::vector<float> scale;  // 1 at initialisation
    std::vector<float> shift;  // 0 at initialisation
};

struct BottleneckBlock {
    ConvLayer reduce, spatial, expand;
    NormLayer reduce_norm, spatial_norm, expand_norm;
    bool has_projection = false;
    ConvLayer projection;
    NormLayer projection_norm;
};

/// Untrained 50-layer bottleneck residual network (stem + 3/4/6/3 blocks),
/// He-initialised from (seed, width multiplier).
struct RandNetParams {
    std::uint64_t seed = 0;
    double width_multiplier = 1.0;
    ConvLayer stem;
    NormLayer stem_norm;
    std::array<std::vector<BottleneckBlock>, 4> stages;

    std::size_t stem_channels() const { return stem.out_channels; }
    std::size_t stage_channels(std::size_t stage) const { return stages[stage].back().expand.out_channels; }
};

/// Throws ArgumentError unless 0 < width_multiplier <= 1.
RandNetParams init_randnet(std::uint64_t seed, double width_multiplier);

/// How normalisation layers behave in the untrained network.
enum class NormMode {
    spatial,  // statistics over the spatial positions of the current input
    running,  // fresh running statistics (mean 0, variance 1)
};

/// Zero padding follows the reference architecture; replicate padding avoids
/// the artificial step that zero padding creates at the map border.
enum class PaddingMode { zeros, replicate };

struct RandNetOptions {
    NormMode norm_mode = NormMode::spatial;
    PaddingMode padding = PaddingMode::replicate;
    /// Replace sentinel pixels by the nearest measured point before the forward pass.
    bool fill_background = true;
};

/// Outputs of the first three residual stages (1/4, 1/8, 1/16 of the input).
struct StageMaps {
    std::array<FeatureTensor, 3> stages;
    std::array<std::uint64_t, 3> source_ids{};  // equal when produced by one forward pass
};

/// Requires H and W divisible by 32.
StageMaps forward_stages(const RandNetParams& params, const OrderedPointMap& map, const RandNetOptions& options = {});

/// Channel-sum each stage, min-max normalise, resize to the finest stage,
/// average, then resize to height x width. Output lies in [0, 1].
RealGrid fuse_activations(const StageMaps& maps, std::size_t height, std::size_t width);

struct InterestMask {
    GroundTruthMask mask;
    double tau = 0.0;
};

/// Marks the ceil(tau * H * W) largest activations; ties go to the earlier pixel.
InterestMask interest_mask(const RealGrid& activation, double tau);

/// Number of pixels interest_mask selects for a map with `pixels` cells.
std::size_t interest_count(std::size_t pixels, double tau);

/// Full inductive-bias chain for one map: forward, fuse, mask.
InterestMask attention_mask(const RandNetParams& params, const OrderedPointMap& map, double tau,
                            const RandNetOptions& options = {});

}  // namespace zal3d
