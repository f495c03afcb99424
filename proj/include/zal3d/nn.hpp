#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zal3d/data.hpp"
#include "zal3d/geometry.hpp"
#include "zal3d/tensor_file.hpp"

namespace zal3d {

/// Two set-abstraction stages, a global max-pool and a two-layer head.
struct PointNetConfig {
    std::size_t patch_points = 64;
    std::size_t sa1_centers = 16;
    double sa1_radius = 0.1;
    std::size_t sa1_group = 8;
    std::size_t sa1_width = 32;
    std::size_t sa2_centers = 4;
    double sa2_radius = 0.25;
    std::size_t sa2_group = 8;
    std::size_t sa2_width = 64;
    std::size_t global_width = 64;
    std::size_t head_width = 64;
    std::size_t output_dim = 32;
    double input_scale = 4.0;  // centred patch coordinates are multiplied by this first

    /// Throws ConfigError on inconsistent sizes.
    void validate() const;
};

struct DenseLayer {
    std::size_t in = 0, out = 0;
    std::size_t offset = 0;  // weight [out][in] at offset, bias[out] right after
};

class PointNet {
public:
    PointNet() = default;
    /// He-initialised weights, zero biases.
    PointNet(const PointNetConfig& config, std::uint64_t seed);

    const PointNetConfig& config() const { return config_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t param_count() const { return params_.size(); }

    /// sa1 (2 layers), sa2 (2 layers), global (1 layer), head (2 layers).
    const std::vector<DenseLayer>& layers() const { return layers_; }
    static const std::array<const char*, 7>& layer_names();

    /// Rounds parameters and real-valued config entries to float precision,
    /// so a saved and reloaded network computes exactly the same outputs.
    void round_to_float();

    /// Tensors named prefix + "config", prefix + "<layer>.weight" / ".bias".
    std::vector<NamedTensor> to_tensors(const std::string& prefix) const;
    static PointNet from_tensors(std::span<const NamedTensor> tensors, const std::string& prefix);

    /// FNV-1a over the raw parameter bytes.
    std::uint64_t hash() const;

private:
    void build_layout();

    PointNetConfig config_;
    std::vector<DenseLayer> layers_;
    std::vector<double> params_;
};

using PatchPoints = std::vector<Vec3>;

/// Sentinel points are replaced by the foreground point that sorts first
/// lexicographically, then the foreground centroid is subtracted (when
/// `center`). An all-sentinel patch becomes all zeros. Throws ArgumentError
/// on non-finite input.
PatchPoints prepare_patch(std::span<const Point> raw, bool center = true);

/// Cached intermediate values of one forward pass.
struct ForwardTrace {
    std::vector<std::size_t> order;  // sorted position -> input index
    std::vector<Vec3> scaled;        // sorted, scaled points
    std::vector<std::size_t> centers1, groups1;
    std::vector<Eigen::MatrixXd> in1, hid1, out1;   // per SA1 center, columns = group members
    std::vector<std::vector<std::size_t>> arg1;
    Eigen::MatrixXd feat1;                          // sa1_width x sa1_centers
    std::vector<std::size_t> centers2, groups2;     // indices into centers1
    std::vector<Eigen::MatrixXd> in2, hid2, out2;
    std::vector<std::vector<std::size_t>> arg2;
    Eigen::MatrixXd feat2;
    Eigen::MatrixXd global_in, global_out;
    std::vector<std::size_t> global_arg;
    Eigen::VectorXd pooled, head_hidden, output;
};

/// Raw network output (features or logits). Requires exactly patch_points
/// finite points; throws ArgumentError otherwise.
Eigen::VectorXd forward(const PointNet& net, std::span<const Vec3> points, ForwardTrace* trace = nullptr);

/// Back-propagates d(output). Parameter gradients are added into
/// `param_grad` (size param_count) when non-empty; input gradients are
/// written to `input_grad` (resized) when non-null.
void backward(const PointNet& net, const ForwardTrace& trace, const Eigen::VectorXd& d_output,
              std::span<double> param_grad, std::vector<Vec3>* input_grad);

/// Hash of every discrete choice the forward pass makes (sampling, grouping,
/// max-pool winners, ReLU pattern), in input-index terms. Where it is locally
/// constant the network is a smooth function of inputs and parameters.
std::uint64_t structure_signature(const PointNet& net, std::span<const Vec3> points);

/// Encoder feature (output_dim wide).
Eigen::VectorXd encode(const PointNet& encoder, std::span<const Vec3> points);

/// Softmax over the two logits; [0] normal, [1] abnormal.
std::array<double, 2> class_probabilities(const PointNet& classifier, std::span<const Vec3> points);
/// Probability of class 1 (abnormal), strictly inside (0, 1).
double classify(const PointNet& classifier, std::span<const Vec3> points);

/// Gradient of -log(max(p, 1 - p)) w.r.t. the input points; at p = 0.5 the
/// class-1 branch is used.
std::vector<Vec3> input_grad(const PointNet& classifier, std::span<const Vec3> points);

// --- losses ------------------------------------------------------------------

struct LossConfig {
    double temperature = 0.07;
    double w_con = 1.0;
    double w_rd = 100.0;

    void validate() const;
};

/// Cosine similarity. Throws ArgumentError on a zero-norm argument.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Contrastive loss over `features`: for each anchor a, the mean over its
/// positives p of -log(exp(cos(a,p)/T) / sum_n exp(cos(a,n)/T)), where n runs
/// over the anchor's negatives only; summed over anchors. When `grads` is
/// non-null it receives d loss / d feature for every feature.
double loss_con(std::span<const Eigen::VectorXd> features, std::span<const std::size_t> anchors,
                std::span<const std::vector<std::size_t>> positives,
                std::span<const std::vector<std::size_t>> negatives, double temperature,
                std::vector<Eigen::VectorXd>* grads = nullptr);

/// Fixed random map with orthonormal rows, 32 x 33 by default, used to bring
/// FPFH descriptors into the learned feature space.
Eigen::MatrixXd rd_projection(std::uint64_t seed, std::size_t out_dim = 32, std::size_t in_dim = kFpfhWidth);

/// cos(projection * fpfh, learned). `grad_learned` receives the derivative
/// w.r.t. `learned` when non-null.
double loss_rd(const Eigen::VectorXd& fpfh, const Eigen::VectorXd& learned, const Eigen::MatrixXd& projection,
               Eigen::VectorXd* grad_learned = nullptr);

inline constexpr double kProbabilityFloor = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
double loss_bce(std::span<const double> probs, std::span<const int> labels);

double total_encoder_loss(double l_con, double l_rd, const LossConfig& cfg);

// --- optimiser ---------------------------------------------------------------

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<double> m, v;

    AdamState() = default;
    AdamState(std::size_t n, double lr) : learning_rate(lr), m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. Throws ArgumentError on size mismatch.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

}  // namespace zal3d
