#include "zal3d/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <queue>

#include "zal3d/parallel.hpp"

namespace zal3d {

namespace {

constexpr std::uint32_t kLeafSize = 8;

struct HeapEntry {
    double d2;
    std::size_t index;
    bool operator<(const HeapEntry& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

double box_distance2(const Vec3& q, const Vec3& lo, const Vec3& hi) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        double d = 0.0;
        if (q[a] < lo[a]) d = lo[a] - q[a];
        else if (q[a] > hi[a]) d = q[a] - hi[a];
        d2 += d * d;
    }
    return d2;
}

}  // namespace

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) throw ArgumentError("kd-tree needs at least one point");
    for (const auto& p : points_)
        if (!p.allFinite()) throw ArgumentError("kd-tree input contains a non-finite point");
    order_.resize(points_.size());
    for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = node.hi = points_[order_[begin]];
    for (std::uint32_t i = begin + 1; i < end; ++i) {
        node.lo = node.lo.cwiseMin(points_[order_[i]]);
        node.hi = node.hi.cwiseMax(points_[order_[i]]);
    }
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) return id;

    int axis = 0;
    (node.hi - node.lo).maxCoeff(&axis);
    if (node.hi[axis] == node.lo[axis]) return id;  // all points coincide
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         const double pa = points_[a][axis], pb = points_[b][axis];
                         return pa < pb || (pa == pb && a < b);
                     });
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = points_[order_[mid]][axis];
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

std::vector<Neighbor> KdTree::knn(const Vec3& query, std::size_t k) const {
    if (k == 0 || k > size())
        throw ArgumentError("knn: k=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
    std::priority_queue<HeapEntry> heap;
    // Explicit stack of (node, lower bound on distance^2).
    std::vector<std::pair<std::int32_t, double>> stack{{0, box_distance2(query, nodes_[0].lo, nodes_[0].hi)}};
    while (!stack.empty()) {
        const auto [id, bound] = stack.back();
        stack.pop_back();
        if (heap.size() == k && bound > heap.top().d2) continue;
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        if (node.axis < 0) {
            for (std::uint32_t i = node.begin; i < node.end; ++i) {
                const HeapEntry e{squared_distance(points_[order_[i]], query), order_[i]};
                if (heap.size() < k) heap.push(e);
                else if (e < heap.top()) {
                    heap.pop();
                    heap.push(e);
                }
            }
            continue;
        }
        const Node& l = nodes_[static_cast<std::size_t>(node.left)];
        const Node& r = nodes_[static_cast<std::size_t>(node.right)];
        const double bl = box_distance2(query, l.lo, l.hi);
        const double br = box_distance2(query, r.lo, r.hi);
        // push the farther child first so the nearer one is explored next
        if (bl <= br) {
            stack.emplace_back(node.right, br);
            stack.emplace_back(node.left, bl);
        } else {
            stack.emplace_back(node.left, bl);
            stack.emplace_back(node.right, br);
        }
    }
    std::vector<Neighbor> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
        out[i] = Neighbor{heap.top().index, std::sqrt(heap.top().d2)};
        heap.pop();
    }
    return out;
}

KdTree build_kdtree(std::span<const Vec3> points) { return KdTree(std::vector<Vec3>(points.begin(), points.end())); }

std::vector<Neighbor> knn(const KdTree& tree, const Vec3& query, std::size_t k) { return tree.knn(query, k); }

// --- normals -----------------------------------------------------------------

NormalField estimate_normals(const KdTree& tree, std::size_t k_neighbors, const Vec3& view_direction) {
    const std::size_t n = tree.size();
    if (k_neighbors == 0 || n < k_neighbors + 1)
        throw ArgumentError("estimate_normals: need at least k+1 = " + std::to_string(k_neighbors + 1) + " points");
    NormalField field{std::vector<Vec3>(n), std::vector<std::uint8_t>(n, 0)};
    parallel_for(n, [&](std::size_t i) {
        const auto nbrs = tree.knn(tree.point(i), k_neighbors + 1);
        Vec3 mean = Vec3::Zero();
        std::size_t used = 0;
        for (const auto& nb : nbrs) {
            if (nb.index == i) continue;
            if (used == k_neighbors) break;
            mean += tree.point(nb.index);
            ++used;
        }
        mean /= static_cast<double>(used);
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        used = 0;
        for (const auto& nb : nbrs) {
            if (nb.index == i) continue;
            if (used == k_neighbors) break;
            const Vec3 d = tree.point(nb.index) - mean;
            cov += d * d.transpose();
            ++used;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
        const auto& ev = es.eigenvalues();
        Vec3 normal = es.eigenvectors().col(0);
        // all-collinear (or coincident) neighbourhoods have no defined plane
        const bool degenerate = !(ev[1] > 1e-12 * std::max(ev[2], 1e-300)) || !normal.allFinite();
        if (degenerate) {
            normal = Vec3(0, 0, 1);
            field.degenerate[i] = 1;
        } else {
            normal.normalize();
            if (normal.dot(view_direction) < 0) normal = -normal;
        }
        field.normals[i] = normal;
    });
    return field;
}

NormalField estimate_normals(std::span<const Vec3> points, std::size_t k_neighbors, const Vec3& view_direction) {
    return estimate_normals(build_kdtree(points), k_neighbors, view_direction);
}

// --- FPFH --------------------------------------------------------------------

SurfaceCloud SurfaceCloud::build(std::vector<Vec3> points, std::size_t k_neighbors, const Vec3& view_direction) {
    KdTree tree(std::move(points));
    NormalField normals = estimate_normals(tree, k_neighbors, view_direction);
    return SurfaceCloud{std::move(tree), std::move(normals), k_neighbors};
}

namespace {

struct PairAngles {
    double alpha, phi, theta;
    bool valid;
};

// Darboux-frame pair features; the source is the endpoint whose normal makes
// the smaller angle with the connecting line.
PairAngles pair_angles(const Vec3& p1, const Vec3& n1, const Vec3& p2, const Vec3& n2) {
    Vec3 dp = p2 - p1;
    const double dist = dp.norm();
    if (dist == 0.0) return {0, 0, 0, false};
    Vec3 ns = n1, nt = n2;
    double phi = n1.dot(dp) / dist;
    const double a2 = n2.dot(dp) / dist;
    if (std::acos(std::clamp(std::abs(phi), 0.0, 1.0)) > std::acos(std::clamp(std::abs(a2), 0.0, 1.0))) {
        ns = n2;
        nt = n1;
        dp = -dp;
        phi = -a2;
    }
    Vec3 v = dp.cross(ns);
    const double vn = v.norm();
    if (vn == 0.0) return {0, 0, 0, false};
    v /= vn;
    const Vec3 w = ns.cross(v);
    return {v.dot(nt), phi, std::atan2(w.dot(nt), ns.dot(nt)), true};
}

std::size_t bin_of(double value, double lo, double hi) {
    const double t = (value - lo) / (hi - lo);
    const auto b = static_cast<long>(std::floor(t * static_cast<double>(kFpfhBins)));
    return static_cast<std::size_t>(std::clamp<long>(b, 0, static_cast<long>(kFpfhBins) - 1));
}

void normalize_blocks(FpfhHistogram& h) {
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < kFpfhBins; ++i) s += h[b * kFpfhBins + i];
        if (s > 0.0)
            for (std::size_t i = 0; i < kFpfhBins; ++i) h[b * kFpfhBins + i] /= s;
    }
}

std::vector<std::vector<Neighbor>> neighbourhoods(const SurfaceCloud& cloud) {
    const std::size_t k = std::min(cloud.k_neighbors + 1, cloud.size());
    std::vector<std::vector<Neighbor>> out(cloud.size());
    parallel_for(cloud.size(), [&](std::size_t i) {
        auto nb = cloud.tree.knn(cloud.tree.point(i), k);
        std::erase_if(nb, [&](const Neighbor& n) { return n.index == i; });
        if (nb.size() > cloud.k_neighbors) nb.resize(cloud.k_neighbors);
        out[i] = std::move(nb);
    });
    return out;
}

FpfhHistogram spfh(const SurfaceCloud& cloud, std::size_t i, const std::vector<Neighbor>& nbrs) {
    FpfhHistogram h{};
    const Vec3& p = cloud.tree.point(i);
    const Vec3& n = cloud.normals.normals[i];
    for (const auto& nb : nbrs) {
        const PairAngles a = pair_angles(p, n, cloud.tree.point(nb.index), cloud.normals.normals[nb.index]);
        if (!a.valid) continue;
        h[bin_of(a.alpha, -1.0, 1.0)] += 1.0;
        h[kFpfhBins + bin_of(a.phi, -1.0, 1.0)] += 1.0;
        h[2 * kFpfhBins + bin_of(a.theta, -std::numbers::pi, std::numbers::pi)] += 1.0;
    }
    normalize_blocks(h);
    return h;
}

FpfhHistogram combine_fpfh(const std::vector<FpfhHistogram>& spfhs, std::size_t i, const std::vector<Neighbor>& nbrs) {
    FpfhHistogram neighbour{};
    double weight_sum = 0.0;
    for (const auto& nb : nbrs) {
        if (nb.distance == 0.0) continue;
        const double w = 1.0 / nb.distance;
        for (std::size_t b = 0; b < kFpfhWidth; ++b) neighbour[b] += w * spfhs[nb.index][b];
        weight_sum += w;
    }
    FpfhHistogram out = spfhs[i];
    if (weight_sum > 0.0)
        for (std::size_t b = 0; b < kFpfhWidth; ++b) out[b] += neighbour[b] / weight_sum;
    normalize_blocks(out);
    return out;
}

}  // namespace

std::vector<FpfhHistogram> point_fpfh(const SurfaceCloud& cloud) {
    const auto nbrs = neighbourhoods(cloud);
    std::vector<FpfhHistogram> spfhs(cloud.size());
    parallel_for(cloud.size(), [&](std::size_t i) { spfhs[i] = spfh(cloud, i, nbrs[i]); });
    std::vector<FpfhHistogram> out(cloud.size());
    parallel_for(cloud.size(), [&](std::size_t i) { out[i] = combine_fpfh(spfhs, i, nbrs[i]); });
    return out;
}

FpfhDescriptor aggregate_fpfh(std::span<const FpfhHistogram> per_point, std::span<const std::size_t> members) {
    FpfhDescriptor d;
    if (members.empty()) return d;
    for (auto m : members)
        for (std::size_t b = 0; b < kFpfhWidth; ++b) d.bins[b] += per_point[m][b];
    normalize_blocks(d.bins);
    d.degenerate = true;
    for (std::size_t b = 0; b < kFpfhBins; ++b)
        if (d.bins[b] > 0.0) d.degenerate = false;
    if (d.degenerate) d.bins.fill(0.0);
    return d;
}

FpfhDescriptor fpfh_patch(const SurfaceCloud& cloud, std::span<const std::size_t> members) {
    if (members.empty()) return FpfhDescriptor{};
    // Only the members and their neighbourhoods are needed.
    const std::size_t k = std::min(cloud.k_neighbors + 1, cloud.size());
    auto neighbours_of = [&](std::size_t i) {
        auto nb = cloud.tree.knn(cloud.tree.point(i), k);
        std::erase_if(nb, [&](const Neighbor& n) { return n.index == i; });
        if (nb.size() > cloud.k_neighbors) nb.resize(cloud.k_neighbors);
        return nb;
    };
    std::vector<std::vector<Neighbor>> nbrs(cloud.size());
    std::vector<std::uint8_t> have(cloud.size(), 0);
    std::vector<FpfhHistogram> spfhs(cloud.size());
    auto ensure = [&](std::size_t i) {
        if (have[i]) return;
        nbrs[i] = neighbours_of(i);
        spfhs[i] = spfh(cloud, i, nbrs[i]);
        have[i] = 1;
    };
    std::vector<FpfhHistogram> per_point(members.size());
    for (std::size_t m = 0; m < members.size(); ++m) {
        const std::size_t i = members[m];
        ensure(i);
        for (const auto& nb : nbrs[i]) ensure(nb.index);
        per_point[m] = combine_fpfh(spfhs, i, nbrs[i]);
    }
    std::vector<std::size_t> all(members.size());
    for (std::size_t m = 0; m < all.size(); ++m) all[m] = m;
    return aggregate_fpfh(per_point, all);
}

std::vector<FpfhDescriptor> map_patch_fpfh(const OrderedPointMap& map, std::size_t patch_size, std::size_t k_neighbors) {
    const PatchLayout layout = PatchLayout::for_map(map.height(), map.width(), patch_size);
    const auto fg = map.foreground_indices();
    std::vector<FpfhDescriptor> out(layout.count());
    if (fg.size() < k_neighbors + 1) return out;

    std::vector<Vec3> pts;
    pts.reserve(fg.size());
    std::vector<std::int64_t> cloud_index(map.size(), -1);
    for (std::size_t i = 0; i < fg.size(); ++i) {
        pts.push_back(to_vec3(map[fg[i]]));
        cloud_index[fg[i]] = static_cast<std::int64_t>(i);
    }
    const SurfaceCloud cloud = SurfaceCloud::build(std::move(pts), k_neighbors);
    const auto per_point = point_fpfh(cloud);
    for (std::size_t p = 0; p < layout.count(); ++p) {
        std::vector<std::size_t> members;
        for (auto px : patch_pixel_indices(layout, map.width(), p))
            if (cloud_index[px] >= 0) members.push_back(static_cast<std::size_t>(cloud_index[px]));
        out[p] = aggregate_fpfh(per_point, members);
    }
    return out;
}

}  // namespace zal3d
