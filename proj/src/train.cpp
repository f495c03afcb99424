#include "zal3d/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "zal3d/parallel.hpp"
#include "zal3d/rng.hpp"

namespace zal3d {

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_positives == 0) throw ConfigError("batch_positives must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    loss.validate();
    encoder.validate();
    classifier.validate();
}

Eigen::MatrixXd training_rd_projection(std::uint64_t seed) { return rd_projection(derive_seed(seed, 3)); }

namespace {

struct Item {
    const PatchPoints* points;
    int label;
};

// Forward + backward of every item with the given output gradients; returns
// the summed parameter gradient (summed in item order).
std::vector<double> batch_gradient(const PointNet& net, std::span<const Item> items,
                                   const std::vector<ForwardTrace>& traces,
                                   const std::vector<Eigen::VectorXd>& d_out) {
    std::vector<std::vector<double>> per(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        per[i].assign(net.param_count(), 0.0);
        backward(net, traces[i], d_out[i], per[i], nullptr);
    });
    std::vector<double> total(net.param_count(), 0.0);
    for (const auto& g : per)
        for (std::size_t k = 0; k < g.size(); ++k) total[k] += g[k];
    return total;
}

}  // namespace

TrainedModels train(const TrainingSet& set, std::span<const FpfhDescriptor> positive_fpfh, const TrainConfig& cfg) {
    cfg.validate();
    if (set.positives.empty()) throw ArgumentError("training stream is empty");
    if (positive_fpfh.size() != set.positives.size()) throw ArgumentError("one FPFH descriptor per positive required");
    const std::size_t k = set.negatives_per_positive;
    if (set.negatives.size() != set.positives.size() * k) throw ArgumentError("negatives do not match positives");

    PointNetConfig enc_cfg = cfg.encoder;
    enc_cfg.output_dim = 32;
    PointNetConfig cls_cfg = cfg.classifier;
    cls_cfg.output_dim = 2;
    TrainedModels out{PointNet(enc_cfg, derive_seed(cfg.seed, 1)), PointNet(cls_cfg, derive_seed(cfg.seed, 2)), {}};

    std::vector<PatchPoints> pos(set.positives.size()), neg(set.negatives.size());
    parallel_for(pos.size(), [&](std::size_t i) { pos[i] = prepare_patch(set.positives[i].points, cfg.center_patches); });
    parallel_for(neg.size(), [&](std::size_t i) { neg[i] = prepare_patch(set.negatives[i].points, cfg.center_patches); });

    const Eigen::MatrixXd projection = training_rd_projection(cfg.seed);
    std::vector<Eigen::VectorXd> fpfh(positive_fpfh.size());
    for (std::size_t i = 0; i < fpfh.size(); ++i)
        if (!positive_fpfh[i].degenerate)
            fpfh[i] = Eigen::Map<const Eigen::VectorXd>(positive_fpfh[i].bins.data(), kFpfhWidth);

    const auto& lc = cfg.loss;
    const bool train_encoder = lc.w_con > 0 || lc.w_rd > 0;
    AdamState enc_opt(out.encoder.param_count(), cfg.learning_rate);
    AdamState cls_opt(out.classifier.param_count(), cfg.learning_rate);

    std::vector<std::size_t> order(pos.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng = make_rng(derive_seed(cfg.seed, 100 + epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_positives, ++step) {
            const std::size_t np = std::min(cfg.batch_positives, order.size() - start);
            std::vector<Item> items;
            std::vector<std::size_t> pos_ids;
            for (std::size_t i = 0; i < np; ++i) {
                pos_ids.push_back(order[start + i]);
                items.push_back({&pos[order[start + i]], 0});
            }
            for (std::size_t i = 0; i < np; ++i)
                for (std::size_t j = 0; j < k; ++j) items.push_back({&neg[order[start + i] * k + j], 1});

            LossLogRow row{epoch, step, 0, 0, 0, 0};
            auto fail = [&](const std::string& what) {
                throw TrainingError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + what);
            };

            if (train_encoder) {
                std::vector<ForwardTrace> traces(items.size());
                std::vector<Eigen::VectorXd> feats(items.size());
                parallel_for(items.size(), [&](std::size_t i) { feats[i] = forward(out.encoder, *items[i].points, &traces[i]); });
                for (const auto& f : feats)
                    if (!f.allFinite() || f.norm() == 0.0) fail("encoder produced a degenerate feature");

                std::vector<Eigen::VectorXd> d_feat(items.size(), Eigen::VectorXd::Zero(32));
                if (np >= 2) {
                    std::vector<std::size_t> anchors(np);
                    std::iota(anchors.begin(), anchors.end(), 0);
                    std::vector<std::vector<std::size_t>> positives(np), negatives(np);
                    std::vector<std::size_t> all_neg(items.size() - np);
                    std::iota(all_neg.begin(), all_neg.end(), np);
                    for (std::size_t a = 0; a < np; ++a) {
                        for (std::size_t p = 0; p < np; ++p)
                            if (p != a) positives[a].push_back(p);
                        negatives[a] = all_neg;
                    }
                    std::vector<Eigen::VectorXd> g;
                    row.l_con = loss_con(feats, anchors, positives, negatives, lc.temperature, &g);
                    for (std::size_t i = 0; i < items.size(); ++i) d_feat[i] += lc.w_con * g[i];
                }
                std::size_t rd_count = 0;
                for (std::size_t i = 0; i < np; ++i) rd_count += fpfh[pos_ids[i]].size() > 0;
                for (std::size_t i = 0; i < np; ++i) {
                    if (fpfh[pos_ids[i]].size() == 0) continue;
                    Eigen::VectorXd g;
                    row.l_rd += loss_rd(fpfh[pos_ids[i]], feats[i], projection, &g) / static_cast<double>(rd_count);
                    d_feat[i] += lc.w_rd / static_cast<double>(rd_count) * g;
                }
                const double enc_total = total_encoder_loss(row.l_con, row.l_rd, lc);
                if (!std::isfinite(enc_total)) fail("non-finite encoder loss");
                auto grad = batch_gradient(out.encoder, items, traces, d_feat);
                adam_step(enc_opt, out.encoder.params(), grad);
            }

            if (cfg.train_classifier) {
                std::vector<ForwardTrace> traces(items.size());
                std::vector<double> diff(items.size());
                parallel_for(items.size(), [&](std::size_t i) {
                    const Eigen::VectorXd logits = forward(out.classifier, *items[i].points, &traces[i]);
                    diff[i] = logits(1) - logits(0);
                });
                std::vector<double> probs(items.size());
                std::vector<int> labels(items.size());
                std::vector<Eigen::VectorXd> d_out(items.size(), Eigen::VectorXd(2));
                const double n = static_cast<double>(items.size());
                for (std::size_t i = 0; i < items.size(); ++i) {
                    const double d = diff[i];
                    probs[i] = d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
                    labels[i] = items[i].label;
                    const double g = (probs[i] - labels[i]) / n;
                    d_out[i] << -g, g;
                }
                row.l_bce = loss_bce(probs, labels);
                if (!std::isfinite(row.l_bce)) fail("non-finite classifier loss");
                auto grad = batch_gradient(out.classifier, items, traces, d_out);
                adam_step(cls_opt, out.classifier.params(), grad);
            }
            row.total = total_encoder_loss(row.l_con, row.l_rd, lc) + row.l_bce;
            if (!std::isfinite(row.total)) fail("non-finite loss");
            out.log.push_back(row);
        }
    }
    out.encoder.round_to_float();
    out.classifier.round_to_float();
    return out;
}

void save_loss_log(const std::filesystem::path& path, std::span<const LossLogRow> log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "epoch,step,l_con,l_rd,l_bce,total\n";
    char buf[160];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.l_con, r.l_rd, r.l_bce, r.total);
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const PointNet& encoder, const PointNet& classifier) {
    auto tensors = encoder.to_tensors("encoder.");
    auto cls = classifier.to_tensors("classifier.");
    tensors.insert(tensors.end(), cls.begin(), cls.end());
    save_tensors(path, "ZALW", tensors);
}

std::pair<PointNet, PointNet> load_checkpoint(const std::filesystem::path& path) {
    const auto tensors = load_tensors(path, "ZALW");
    return {PointNet::from_tensors(tensors, "encoder."), PointNet::from_tensors(tensors, "classifier.")};
}

}  // namespace zal3d
