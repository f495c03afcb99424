#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "zal3d/geometry.hpp"
#include "zal3d/nn.hpp"
#include "zal3d/pseudo.hpp"

namespace zal3d {

struct TrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_positives = 4;  // each step also takes their negatives
    double learning_rate = 1e-3;
    LossConfig loss;
    PointNetConfig encoder;     // output_dim forced to 32
    PointNetConfig classifier;  // output_dim forced to 2
    bool center_patches = true;
    bool train_classifier = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct LossLogRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double l_con = 0, l_rd = 0, l_bce = 0, total = 0;
};

struct TrainedModels {
    PointNet encoder;
    PointNet classifier;
    std::vector<LossLogRow> log;
};

/// Joint training of encoder and classifier on one stream. `positive_fpfh`
/// holds the FPFH descriptor of each positive (degenerate ones are left out
/// of the disentanglement term). Parameters are rounded to float at the end.
/// Throws TrainingError on a non-finite loss.
TrainedModels train(const TrainingSet& set, std::span<const FpfhDescriptor> positive_fpfh, const TrainConfig& cfg);

/// Fixed projection used by the disentanglement term for a given training seed.
Eigen::MatrixXd training_rd_projection(std::uint64_t seed);

/// epoch,step,l_con,l_rd,l_bce,total
void save_loss_log(const std::filesystem::path& path, std::span<const LossLogRow> log);

void save_checkpoint(const std::filesystem::path& path, const PointNet& encoder, const PointNet& classifier);
/// Returns {encoder, classifier}.
std::pair<PointNet, PointNet> load_checkpoint(const std::filesystem::path& path);

}  // namespace zal3d
