#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "zal3d/data.hpp"

namespace zal3d {

using Vec3 = Eigen::Vector3d;

inline Vec3 to_vec3(const Point& p) { return Vec3(p[0], p[1], p[2]); }

struct Neighbor {
    std::size_t index;
    double distance;
};

/// Balanced 3-d tree over a point list. Exact k-nearest-neighbour search; ties
/// are broken by ascending original index, so results equal a stable linear scan.
class KdTree {
public:
    /// Throws ArgumentError on empty or non-finite input.
    explicit KdTree(std::vector<Vec3> points);

    std::size_t size() const { return points_.size(); }
    const Vec3& point(std::size_t i) const { return points_[i]; }
    const std::vector<Vec3>& points() const { return points_; }

    /// k nearest points in ascending (distance, index) order. Requires 1 <= k <= size().
    std::vector<Neighbor> knn(const Vec3& query, std::size_t k) const;

private:
    struct Node {
        std::uint32_t begin, end;   // range into order_
        std::int32_t left = -1, right = -1;
        int axis = -1;              // -1 for leaves
        double split = 0.0;
        Vec3 lo, hi;                // bounding box
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);

    std::vector<Vec3> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

KdTree build_kdtree(std::span<const Vec3> points);
std::vector<Neighbor> knn(const KdTree& tree, const Vec3& query, std::size_t k);

/// Squared Euclidean distance, evaluated in a fixed order so every exact-search
/// routine (and its oracle) compares identical values.
inline double squared_distance(const Vec3& a, const Vec3& b) {
    const double dx = a.x() - b.x(), dy = a.y() - b.y(), dz = a.z() - b.z();
    return dx * dx + dy * dy + dz * dz;
}

struct NormalField {
    std::vector<Vec3> normals;             // unit length
    std::vector<std::uint8_t> degenerate;  // 1 where the +z fallback was used
};

/// PCA normals over each point's k nearest neighbours (itself excluded), oriented
/// so that n . view_direction >= 0. Needs at least k + 1 points.
NormalField estimate_normals(const KdTree& tree, std::size_t k_neighbors, const Vec3& view_direction = Vec3(0, 0, 1));
NormalField estimate_normals(std::span<const Vec3> points, std::size_t k_neighbors,
                             const Vec3& view_direction = Vec3(0, 0, 1));

inline constexpr std::size_t kFpfhBins = 11;
inline constexpr std::size_t kFpfhWidth = 3 * kFpfhBins;

using FpfhHistogram = std::array<double, kFpfhWidth>;

/// Three 11-bin blocks over the pair angles (alpha, phi, theta). Each block sums
/// to one unless the descriptor is degenerate, in which case it is all zero.
struct FpfhDescriptor {
    FpfhHistogram bins{};
    bool degenerate = true;
};

/// A foreground cloud prepared for FPFH: points, search index and normals.
struct SurfaceCloud {
    KdTree tree;
    NormalField normals;
    std::size_t k_neighbors;

    /// Needs more than k_neighbors points.
    static SurfaceCloud build(std::vector<Vec3> points, std::size_t k_neighbors,
                              const Vec3& view_direction = Vec3(0, 0, 1));
    std::size_t size() const { return tree.size(); }
};

/// Per-point FPFH for every point of the cloud; each block normalised to one.
std::vector<FpfhHistogram> point_fpfh(const SurfaceCloud& cloud);

/// Patch descriptor: mean of member points' FPFH, block-renormalised. An empty
/// member list gives the degenerate all-zero descriptor.
FpfhDescriptor fpfh_patch(const SurfaceCloud& cloud, std::span<const std::size_t> members);
FpfhDescriptor aggregate_fpfh(std::span<const FpfhHistogram> per_point, std::span<const std::size_t> members);

/// One FPFH descriptor per patch of `map` (row-major), computed over the map's
/// whole foreground so neighbourhoods cross patch borders.
std::vector<FpfhDescriptor> map_patch_fpfh(const OrderedPointMap& map, std::size_t patch_size, std::size_t k_neighbors);

}  // namespace zal3d
