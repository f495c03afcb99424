#include "zal3d/nn.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "zal3d/rng.hpp"

namespace zal3d {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMat>;
using Weights = Eigen::Map<RowMat>;

enum Layer : std::size_t { kSa1a, kSa1b, kSa2a, kSa2b, kGlobal, kHeadA, kHeadB };

ConstWeights weight(const PointNet& net, Layer l) {
    const auto& d = net.layers()[l];
    return ConstWeights(net.params().data() + d.offset, static_cast<Eigen::Index>(d.out), static_cast<Eigen::Index>(d.in));
}

Eigen::Map<const Eigen::VectorXd> bias(const PointNet& net, Layer l) {
    const auto& d = net.layers()[l];
    return Eigen::Map<const Eigen::VectorXd>(net.params().data() + d.offset + d.in * d.out, static_cast<Eigen::Index>(d.out));
}

Eigen::MatrixXd dense(const PointNet& net, Layer l, const Eigen::MatrixXd& x, bool relu) {
    Eigen::MatrixXd y = weight(net, l) * x;
    y.colwise() += bias(net, l);
    if (relu) y = y.cwiseMax(0.0);
    return y;
}

// Accumulates parameter gradients of layer l and returns d(input).
Eigen::MatrixXd dense_backward(const PointNet& net, Layer l, const Eigen::MatrixXd& x, const Eigen::MatrixXd& dy,
                               std::span<double> param_grad) {
    if (!param_grad.empty()) {
        const auto& d = net.layers()[l];
        Weights gw(param_grad.data() + d.offset, static_cast<Eigen::Index>(d.out), static_cast<Eigen::Index>(d.in));
        gw.noalias() += dy * x.transpose();
        Eigen::Map<Eigen::VectorXd> gb(param_grad.data() + d.offset + d.in * d.out, static_cast<Eigen::Index>(d.out));
        gb += dy.rowwise().sum();
    }
    return weight(net, l).transpose() * dy;
}

Eigen::MatrixXd relu_mask(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& y) {
    return (y.array() > 0.0).select(dy, 0.0);
}

// Farthest point sampling; starts at the point farthest from the centroid.
std::vector<std::size_t> farthest_points(const std::vector<Vec3>& pts, std::size_t count) {
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : pts) centroid += p;
    centroid /= static_cast<double>(pts.size());
    std::size_t first = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double d = squared_distance(pts[i], centroid);
        if (d > best) best = d, first = i;
    }
    std::vector<std::size_t> out{first};
    std::vector<double> nearest(pts.size());
    std::vector<char> taken(pts.size(), 0);
    taken[first] = 1;
    for (std::size_t i = 0; i < pts.size(); ++i) nearest[i] = squared_distance(pts[i], pts[first]);
    while (out.size() < count) {
        std::size_t pick = pts.size();
        double far = -1.0;
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (!taken[i] && nearest[i] > far) far = nearest[i], pick = i;
        out.push_back(pick);
        taken[pick] = 1;
        for (std::size_t i = 0; i < pts.size(); ++i) nearest[i] = std::min(nearest[i], squared_distance(pts[i], pts[pick]));
    }
    return out;
}

// The k nearest points within the radius; slots beyond the radius repeat the nearest.
std::vector<std::size_t> ball_group(const std::vector<Vec3>& pts, const Vec3& center, std::size_t k, double radius) {
    std::vector<std::pair<double, std::size_t>> d(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) d[i] = {squared_distance(pts[i], center), i};
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = d[i].first <= radius * radius ? d[i].second : d[0].second;
    return out;
}

std::vector<std::size_t> column_argmax(const Eigen::MatrixXd& m) {
    std::vector<std::size_t> arg(static_cast<std::size_t>(m.rows()), 0);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 1; c < m.cols(); ++c)
            if (m(r, c) > m(r, static_cast<Eigen::Index>(arg[static_cast<std::size_t>(r)]))) arg[static_cast<std::size_t>(r)] = static_cast<std::size_t>(c);
    return arg;
}

Eigen::VectorXd gather_max(const Eigen::MatrixXd& m, const std::vector<std::size_t>& arg) {
    Eigen::VectorXd v(m.rows());
    for (Eigen::Index r = 0; r < m.rows(); ++r) v(r) = m(r, static_cast<Eigen::Index>(arg[static_cast<std::size_t>(r)]));
    return v;
}

Eigen::MatrixXd scatter_max(const Eigen::VectorXd& dv, const std::vector<std::size_t>& arg, Eigen::Index cols) {
    Eigen::MatrixXd dm = Eigen::MatrixXd::Zero(dv.size(), cols);
    for (Eigen::Index r = 0; r < dv.size(); ++r) dm(r, static_cast<Eigen::Index>(arg[static_cast<std::size_t>(r)])) = dv(r);
    return dm;
}

struct Fnv {
    std::uint64_t h = 1469598103934665603ULL;
    void add(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
    }
    void add(std::uint64_t v) { add(&v, sizeof v); }
    void add_mask(const Eigen::MatrixXd& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) add(m.data()[i] > 0.0 ? 1u : 0u);
    }
};

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// --- configuration and parameters --------------------------------------------

void PointNetConfig::validate() const {
    if (patch_points == 0 || sa1_centers == 0 || sa2_centers == 0 || sa1_group == 0 || sa2_group == 0)
        throw ConfigError("point network sizes must be positive");
    if (sa1_centers > patch_points || sa1_group > patch_points)
        throw ConfigError("first set-abstraction stage larger than the patch");
    if (sa2_centers > sa1_centers || sa2_group > sa1_centers)
        throw ConfigError("second set-abstraction stage larger than the first");
    if (sa1_width == 0 || sa2_width == 0 || global_width == 0 || head_width == 0 || output_dim == 0)
        throw ConfigError("layer widths must be positive");
    if (!(sa1_radius > 0) || !(sa2_radius > 0) || !(input_scale > 0))
        throw ConfigError("radii and input scale must be positive");
}

const std::array<const char*, 7>& PointNet::layer_names() {
    static const std::array<const char*, 7> names{"sa1.0", "sa1.1", "sa2.0", "sa2.1", "global", "head.0", "head.1"};
    return names;
}

void PointNet::build_layout() {
    config_.validate();
    const auto& c = config_;
    const std::array<std::pair<std::size_t, std::size_t>, 7> shapes{{
        {3, c.sa1_width},
        {c.sa1_width, c.sa1_width},
        {3 + c.sa1_width, c.sa2_width},
        {c.sa2_width, c.sa2_width},
        {3 + c.sa2_width, c.global_width},
        {c.global_width, c.head_width},
        {c.head_width, c.output_dim},
    }};
    layers_.clear();
    std::size_t offset = 0;
    for (const auto& [in, out] : shapes) {
        layers_.push_back({in, out, offset});
        offset += in * out + out;
    }
    params_.assign(offset, 0.0);
}

PointNet::PointNet(const PointNetConfig& config, std::uint64_t seed) : config_(config) {
    build_layout();
    Rng rng = make_rng(seed);
    for (const auto& l : layers_) {
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(l.in)));
        for (std::size_t i = 0; i < l.in * l.out; ++i) params_[l.offset + i] = normal(rng);
    }
}

void PointNet::round_to_float() {
    for (auto& p : params_) p = static_cast<double>(static_cast<float>(p));
    config_.sa1_radius = static_cast<float>(config_.sa1_radius);
    config_.sa2_radius = static_cast<float>(config_.sa2_radius);
    config_.input_scale = static_cast<float>(config_.input_scale);
}

std::vector<NamedTensor> PointNet::to_tensors(const std::string& prefix) const {
    const auto& c = config_;
    std::vector<NamedTensor> out;
    std::vector<double> cfg{double(c.patch_points), double(c.sa1_centers), c.sa1_radius, double(c.sa1_group),
                            double(c.sa1_width),    double(c.sa2_centers), c.sa2_radius, double(c.sa2_group),
                            double(c.sa2_width),    double(c.global_width), double(c.head_width),
                            double(c.output_dim),   c.input_scale};
    NamedTensor config{prefix + "config", {static_cast<std::uint32_t>(cfg.size())}, {}};
    for (double v : cfg) config.data.push_back(static_cast<float>(v));
    out.push_back(std::move(config));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        NamedTensor w{prefix + layer_names()[i] + ".weight", {static_cast<std::uint32_t>(l.out), static_cast<std::uint32_t>(l.in)}, {}};
        NamedTensor b{prefix + layer_names()[i] + ".bias", {static_cast<std::uint32_t>(l.out)}, {}};
        for (std::size_t k = 0; k < l.in * l.out; ++k) w.data.push_back(static_cast<float>(params_[l.offset + k]));
        for (std::size_t k = 0; k < l.out; ++k) b.data.push_back(static_cast<float>(params_[l.offset + l.in * l.out + k]));
        out.push_back(std::move(w));
        out.push_back(std::move(b));
    }
    return out;
}

PointNet PointNet::from_tensors(std::span<const NamedTensor> tensors, const std::string& prefix) {
    const auto& cfg = find_tensor(tensors, prefix + "config");
    if (cfg.data.size() != 13) throw FormatError(prefix + "config: expected 13 entries");
    auto count = [&](std::size_t i) {
        const float v = cfg.data[i];
        if (!(v >= 0) || v != std::floor(v)) throw FormatError(prefix + "config: bad size entry");
        return static_cast<std::size_t>(v);
    };
    PointNet net;
    auto& c = net.config_;
    c.patch_points = count(0);
    c.sa1_centers = count(1);
    c.sa1_radius = cfg.data[2];
    c.sa1_group = count(3);
    c.sa1_width = count(4);
    c.sa2_centers = count(5);
    c.sa2_radius = cfg.data[6];
    c.sa2_group = count(7);
    c.sa2_width = count(8);
    c.global_width = count(9);
    c.head_width = count(10);
    c.output_dim = count(11);
    c.input_scale = cfg.data[12];
    try {
        net.build_layout();
    } catch (const ConfigError& e) {
        throw FormatError(prefix + "config: " + e.what());
    }
    for (std::size_t i = 0; i < net.layers_.size(); ++i) {
        const auto& l = net.layers_[i];
        const auto& w = find_tensor(tensors, prefix + layer_names()[i] + ".weight");
        const auto& b = find_tensor(tensors, prefix + layer_names()[i] + ".bias");
        if (w.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(l.out), static_cast<std::uint32_t>(l.in)} ||
            b.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(l.out)})
            throw FormatError("tensor shape mismatch in layer " + prefix + layer_names()[i]);
        for (std::size_t k = 0; k < w.data.size(); ++k) net.params_[l.offset + k] = w.data[k];
        for (std::size_t k = 0; k < b.data.size(); ++k) net.params_[l.offset + l.in * l.out + k] = b.data[k];
    }
    return net;
}

std::uint64_t PointNet::hash() const {
    Fnv f;
    f.add(params_.data(), params_.size() * sizeof(double));
    return f.h;
}

// --- forward / backward ------------------------------------------------------

PatchPoints prepare_patch(std::span<const Point> raw, bool center) {
    std::vector<Point> fg;
    for (const auto& p : raw) {
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
            throw ArgumentError("patch contains a non-finite coordinate");
        if (!is_sentinel(p)) fg.push_back(p);
    }
    PatchPoints out(raw.size(), Vec3::Zero());
    if (fg.empty()) return out;
    // summing in sorted order keeps the result independent of point order
    std::sort(fg.begin(), fg.end());
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : fg) centroid += to_vec3(p);
    centroid /= static_cast<double>(fg.size());
    if (!center) centroid.setZero();
    const Vec3 fill = to_vec3(fg.front());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (is_sentinel(raw[i]) ? fill : to_vec3(raw[i])) - centroid;
    return out;
}

Eigen::VectorXd forward(const PointNet& net, std::span<const Vec3> points, ForwardTrace* trace) {
    const auto& c = net.config();
    if (points.size() != c.patch_points)
        throw ArgumentError("point network expects " + std::to_string(c.patch_points) + " points, got " +
                            std::to_string(points.size()));
    for (const auto& p : points)
        if (!p.allFinite()) throw ArgumentError("patch contains a non-finite coordinate");

    ForwardTrace local;
    ForwardTrace& t = trace ? *trace : local;
    t = ForwardTrace{};

    t.order.resize(points.size());
    std::iota(t.order.begin(), t.order.end(), 0);
    std::stable_sort(t.order.begin(), t.order.end(), [&](std::size_t a, std::size_t b) {
        const auto& p = points[a];
        const auto& q = points[b];
        if (p.x() != q.x()) return p.x() < q.x();
        if (p.y() != q.y()) return p.y() < q.y();
        return p.z() < q.z();
    });
    t.scaled.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) t.scaled[i] = points[t.order[i]] * c.input_scale;

    const auto k1 = static_cast<Eigen::Index>(c.sa1_group);
    t.centers1 = farthest_points(t.scaled, c.sa1_centers);
    t.feat1.resize(static_cast<Eigen::Index>(c.sa1_width), static_cast<Eigen::Index>(c.sa1_centers));
    for (std::size_t m = 0; m < c.sa1_centers; ++m) {
        const Vec3& ctr = t.scaled[t.centers1[m]];
        const auto g = ball_group(t.scaled, ctr, c.sa1_group, c.sa1_radius);
        t.groups1.insert(t.groups1.end(), g.begin(), g.end());
        Eigen::MatrixXd in(3, k1);
        for (Eigen::Index k = 0; k < k1; ++k) in.col(k) = (t.scaled[g[static_cast<std::size_t>(k)]] - ctr) / c.sa1_radius;
        Eigen::MatrixXd hid = dense(net, kSa1a, in, true);
        Eigen::MatrixXd out = dense(net, kSa1b, hid, true);
        auto arg = column_argmax(out);
        t.feat1.col(static_cast<Eigen::Index>(m)) = gather_max(out, arg);
        t.in1.push_back(std::move(in));
        t.hid1.push_back(std::move(hid));
        t.out1.push_back(std::move(out));
        t.arg1.push_back(std::move(arg));
    }

    std::vector<Vec3> q(c.sa1_centers);
    for (std::size_t m = 0; m < c.sa1_centers; ++m) q[m] = t.scaled[t.centers1[m]];
    const auto k2 = static_cast<Eigen::Index>(c.sa2_group);
    const auto w1 = static_cast<Eigen::Index>(c.sa1_width);
    t.centers2 = farthest_points(q, c.sa2_centers);
    t.feat2.resize(static_cast<Eigen::Index>(c.sa2_width), static_cast<Eigen::Index>(c.sa2_centers));
    for (std::size_t j = 0; j < c.sa2_centers; ++j) {
        const Vec3& ctr = q[t.centers2[j]];
        const auto g = ball_group(q, ctr, c.sa2_group, c.sa2_radius);
        t.groups2.insert(t.groups2.end(), g.begin(), g.end());
        Eigen::MatrixXd in(3 + w1, k2);
        for (Eigen::Index k = 0; k < k2; ++k) {
            const std::size_t idx = g[static_cast<std::size_t>(k)];
            in.col(k).head<3>() = (q[idx] - ctr) / c.sa2_radius;
            in.col(k).tail(w1) = t.feat1.col(static_cast<Eigen::Index>(idx));
        }
        Eigen::MatrixXd hid = dense(net, kSa2a, in, true);
        Eigen::MatrixXd out = dense(net, kSa2b, hid, true);
        auto arg = column_argmax(out);
        t.feat2.col(static_cast<Eigen::Index>(j)) = gather_max(out, arg);
        t.in2.push_back(std::move(in));
        t.hid2.push_back(std::move(hid));
        t.out2.push_back(std::move(out));
        t.arg2.push_back(std::move(arg));
    }

    const auto w2 = static_cast<Eigen::Index>(c.sa2_width);
    t.global_in.resize(3 + w2, static_cast<Eigen::Index>(c.sa2_centers));
    for (std::size_t j = 0; j < c.sa2_centers; ++j) {
        t.global_in.col(static_cast<Eigen::Index>(j)).head<3>() = q[t.centers2[j]];
        t.global_in.col(static_cast<Eigen::Index>(j)).tail(w2) = t.feat2.col(static_cast<Eigen::Index>(j));
    }
    t.global_out = dense(net, kGlobal, t.global_in, true);
    t.global_arg = column_argmax(t.global_out);
    t.pooled = gather_max(t.global_out, t.global_arg);
    t.head_hidden = dense(net, kHeadA, t.pooled, true);
    t.output = dense(net, kHeadB, t.head_hidden, false);
    return t.output;
}

void backward(const PointNet& net, const ForwardTrace& t, const Eigen::VectorXd& d_output, std::span<double> param_grad,
              std::vector<Vec3>* input_grad) {
    const auto& c = net.config();
    if (!param_grad.empty() && param_grad.size() != net.param_count())
        throw ArgumentError("parameter gradient buffer has the wrong size");
    if (d_output.size() != static_cast<Eigen::Index>(c.output_dim)) throw ArgumentError("output gradient has the wrong size");

    Eigen::MatrixXd d_hh = dense_backward(net, kHeadB, t.head_hidden, d_output, param_grad);
    Eigen::MatrixXd d_pooled = dense_backward(net, kHeadA, t.pooled, relu_mask(d_hh, t.head_hidden), param_grad);
    Eigen::MatrixXd d_gout = scatter_max(d_pooled.col(0), t.global_arg, t.global_out.cols());
    Eigen::MatrixXd d_gin = dense_backward(net, kGlobal, t.global_in, relu_mask(d_gout, t.global_out), param_grad);

    std::vector<Vec3> d_q(c.sa1_centers, Vec3::Zero());
    const auto w1 = static_cast<Eigen::Index>(c.sa1_width);
    const auto w2 = static_cast<Eigen::Index>(c.sa2_width);
    Eigen::MatrixXd d_feat2 = d_gin.bottomRows(w2);
    for (std::size_t j = 0; j < c.sa2_centers; ++j) d_q[t.centers2[j]] += d_gin.col(static_cast<Eigen::Index>(j)).head<3>();

    Eigen::MatrixXd d_feat1 = Eigen::MatrixXd::Zero(w1, static_cast<Eigen::Index>(c.sa1_centers));
    for (std::size_t j = 0; j < c.sa2_centers; ++j) {
        Eigen::MatrixXd d_out = scatter_max(d_feat2.col(static_cast<Eigen::Index>(j)), t.arg2[j], t.out2[j].cols());
        Eigen::MatrixXd d_hid = dense_backward(net, kSa2b, t.hid2[j], relu_mask(d_out, t.out2[j]), param_grad);
        Eigen::MatrixXd d_in = dense_backward(net, kSa2a, t.in2[j], relu_mask(d_hid, t.hid2[j]), param_grad);
        const std::size_t ctr = t.centers2[j];
        for (std::size_t k = 0; k < c.sa2_group; ++k) {
            const std::size_t idx = t.groups2[j * c.sa2_group + k];
            const Vec3 d_local = d_in.col(static_cast<Eigen::Index>(k)).head<3>() / c.sa2_radius;
            d_q[idx] += d_local;
            d_q[ctr] -= d_local;
            d_feat1.col(static_cast<Eigen::Index>(idx)) += d_in.col(static_cast<Eigen::Index>(k)).tail(w1);
        }
    }

    std::vector<Vec3> d_scaled(t.scaled.size(), Vec3::Zero());
    for (std::size_t m = 0; m < c.sa1_centers; ++m) {
        d_scaled[t.centers1[m]] += d_q[m];
        Eigen::MatrixXd d_out = scatter_max(d_feat1.col(static_cast<Eigen::Index>(m)), t.arg1[m], t.out1[m].cols());
        Eigen::MatrixXd d_hid = dense_backward(net, kSa1b, t.hid1[m], relu_mask(d_out, t.out1[m]), param_grad);
        Eigen::MatrixXd d_in = dense_backward(net, kSa1a, t.in1[m], relu_mask(d_hid, t.hid1[m]), param_grad);
        const std::size_t ctr = t.centers1[m];
        for (std::size_t k = 0; k < c.sa1_group; ++k) {
            const Vec3 d_local = d_in.col(static_cast<Eigen::Index>(k)) / c.sa1_radius;
            d_scaled[t.groups1[m * c.sa1_group + k]] += d_local;
            d_scaled[ctr] -= d_local;
        }
    }

    if (input_grad) {
        input_grad->assign(t.scaled.size(), Vec3::Zero());
        for (std::size_t i = 0; i < t.scaled.size(); ++i) (*input_grad)[t.order[i]] = d_scaled[i] * c.input_scale;
    }
}

std::uint64_t structure_signature(const PointNet& net, std::span<const Vec3> points) {
    ForwardTrace t;
    forward(net, points, &t);
    const auto& c = net.config();
    Fnv f;
    auto input_of = [&](std::size_t sorted) { return static_cast<std::uint64_t>(t.order[sorted]); };
    for (std::size_t m = 0; m < c.sa1_centers; ++m) {
        f.add(input_of(t.centers1[m]));
        for (std::size_t k = 0; k < c.sa1_group; ++k) f.add(input_of(t.groups1[m * c.sa1_group + k]));
        for (auto a : t.arg1[m]) f.add(input_of(t.groups1[m * c.sa1_group + a]));
        f.add_mask(t.hid1[m]);
        f.add_mask(t.out1[m]);
    }
    for (std::size_t j = 0; j < c.sa2_centers; ++j) {
        f.add(input_of(t.centers1[t.centers2[j]]));
        for (std::size_t k = 0; k < c.sa2_group; ++k) f.add(input_of(t.centers1[t.groups2[j * c.sa2_group + k]]));
        for (auto a : t.arg2[j]) f.add(input_of(t.centers1[t.groups2[j * c.sa2_group + a]]));
        f.add_mask(t.hid2[j]);
        f.add_mask(t.out2[j]);
    }
    for (auto a : t.global_arg) f.add(input_of(t.centers1[t.centers2[a]]));
    f.add_mask(t.global_out);
    f.add_mask(t.head_hidden);
    return f.h;
}

Eigen::VectorXd encode(const PointNet& encoder, std::span<const Vec3> points) { return forward(encoder, points); }

std::array<double, 2> class_probabilities(const PointNet& classifier, std::span<const Vec3> points) {
    if (classifier.config().output_dim != 2) throw ArgumentError("classifier must have two outputs");
    const Eigen::VectorXd logits = forward(classifier, points);
    const double d = logits(1) - logits(0);
    return {sigmoid(-d), sigmoid(d)};
}

double classify(const PointNet& classifier, std::span<const Vec3> points) {
    const double p = class_probabilities(classifier, points)[1];
    return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

std::vector<Vec3> input_grad(const PointNet& classifier, std::span<const Vec3> points) {
    if (classifier.config().output_dim != 2) throw ArgumentError("classifier must have two outputs");
    ForwardTrace t;
    const Eigen::VectorXd logits = forward(classifier, points, &t);
    const double d = logits(1) - logits(0);
    // -log p_hat = softplus(-|d|); the sign picks the predicted class
    const double dd = d >= 0 ? -sigmoid(-d) : sigmoid(d);
    Eigen::VectorXd d_out(2);
    d_out << -dd, dd;
    std::vector<Vec3> grad;
    backward(classifier, t, d_out, {}, &grad);
    return grad;
}

// --- losses ------------------------------------------------------------------

void LossConfig::validate() const {
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(w_con >= 0) || !(w_rd >= 0)) throw ConfigError("loss weights must be non-negative");
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw ArgumentError("cosine of vectors with different lengths");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw ArgumentError("cosine of a zero-norm vector is undefined");
    return a.dot(b) / (na * nb);
}

namespace {

// d cos(a, b) / d a
Eigen::VectorXd cosine_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double cos) {
    const double na = a.norm(), nb = b.norm();
    return b / (na * nb) - cos * a / (na * na);
}

}  // namespace

double loss_con(std::span<const Eigen::VectorXd> features, std::span<const std::size_t> anchors,
                std::span<const std::vector<std::size_t>> positives, std::span<const std::vector<std::size_t>> negatives,
                double temperature, std::vector<Eigen::VectorXd>* grads) {
    if (!(temperature > 0)) throw ArgumentError("temperature must be positive");
    if (anchors.empty()) throw ArgumentError("contrastive loss needs at least one anchor");
    if (positives.size() != anchors.size() || negatives.size() != anchors.size())
        throw ArgumentError("one positive and one negative set per anchor required");
    for (const auto& f : features)
        if (f.norm() == 0.0) throw ArgumentError("contrastive loss: zero-norm feature");
    if (grads) {
        grads->assign(features.size(), Eigen::VectorXd::Zero(features.empty() ? 0 : features[0].size()));
    }
    double total = 0.0;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const auto& fa = features[anchors[a]];
        if (positives[a].empty() || negatives[a].empty()) throw ArgumentError("anchor without positives or negatives");
        std::vector<double> neg(negatives[a].size());
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < neg.size(); ++n) {
            neg[n] = cosine_similarity(fa, features[negatives[a][n]]) / temperature;
            top = std::max(top, neg[n]);
        }
        double sum = 0.0;
        for (double v : neg) sum += std::exp(v - top);
        const double lse = top + std::log(sum);
        const double inv_p = 1.0 / static_cast<double>(positives[a].size());
        double pos_sum = 0.0;
        for (auto p : positives[a]) {
            const double s = cosine_similarity(fa, features[p]);
            pos_sum += s / temperature;
            if (grads) {
                const double g = -inv_p / temperature;
                (*grads)[anchors[a]] += g * cosine_grad(fa, features[p], s);
                (*grads)[p] += g * cosine_grad(features[p], fa, s);
            }
        }
        total += lse - inv_p * pos_sum;
        if (grads) {
            for (std::size_t n = 0; n < neg.size(); ++n) {
                const double g = std::exp(neg[n] - lse) / temperature;
                const auto& fn = features[negatives[a][n]];
                const double s = neg[n] * temperature;
                (*grads)[anchors[a]] += g * cosine_grad(fa, fn, s);
                (*grads)[negatives[a][n]] += g * cosine_grad(fn, fa, s);
            }
        }
    }
    return total;
}

Eigen::MatrixXd rd_projection(std::uint64_t seed, std::size_t out_dim, std::size_t in_dim) {
    if (out_dim == 0 || out_dim > in_dim) throw ArgumentError("projection needs 0 < out_dim <= in_dim");
    Rng rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd g(static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(out_dim));
    for (Eigen::Index j = 0; j < g.cols(); ++j)
        for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
    return q.transpose();
}

double loss_rd(const Eigen::VectorXd& fpfh, const Eigen::VectorXd& learned, const Eigen::MatrixXd& projection,
               Eigen::VectorXd* grad_learned) {
    if (projection.cols() != fpfh.size() || projection.rows() != learned.size())
        throw ArgumentError("disentanglement loss: projection does not match feature widths");
    const Eigen::VectorXd aligned = projection * fpfh;
    const double cos = cosine_similarity(aligned, learned);
    if (grad_learned) *grad_learned = cosine_grad(learned, aligned, cos);
    return cos;
}

double loss_bce(std::span<const double> probs, std::span<const int> labels) {
    if (probs.empty()) throw ArgumentError("cross-entropy of an empty batch");
    if (probs.size() != labels.size()) throw ArgumentError("probabilities and labels differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw ArgumentError("probability outside [0, 1]");
        if (labels[i] != 0 && labels[i] != 1) throw ArgumentError("labels must be 0 or 1");
        const double p = std::clamp(probs[i], kProbabilityFloor, 1.0 - kProbabilityFloor);
        sum += labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return -sum / static_cast<double>(probs.size());
}

double total_encoder_loss(double l_con, double l_rd, const LossConfig& cfg) { return cfg.w_con * l_con + cfg.w_rd * l_rd; }

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size())
        throw ArgumentError("optimiser state does not match the parameters");
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        params[i] -= s.learning_rate * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.epsilon);
    }
}

}  // namespace zal3d
