#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zal3d/errors.hpp"

namespace zal3d {

using Point = std::array<float, 3>;

/// The all-zero xyz triple marks a pixel with no measured point.
inline bool is_sentinel(const Point& p) { return p[0] == 0.0f && p[1] == 0.0f && p[2] == 0.0f; }

/// Row-major H x W grid of values.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t height, std::size_t width, T fill = T{})
        : height_(height), width_(width), data_(height * width, fill) {}
    Grid(std::size_t height, std::size_t width, std::vector<T> data)
        : height_(height), width_(width), data_(std::move(data)) {
        if (data_.size() != height_ * width_) throw ArgumentError("grid payload size mismatch");
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * width_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * width_ + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    bool operator==(const Grid&) const = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<T> data_;
};

using ScoreGrid = Grid<float>;
using GroundTruthMask = Grid<std::uint8_t>;

/// Ordered point map: an H x W image whose pixels hold xyz coordinates.
class OrderedPointMap {
public:
    OrderedPointMap() = default;
    /// Validates dimensions and finiteness; throws ValidationError / ArgumentError.
    OrderedPointMap(std::size_t height, std::size_t width, std::vector<Point> points);

    std::size_t height() const { return grid_.height(); }
    std::size_t width() const { return grid_.width(); }
    std::size_t size() const { return grid_.size(); }

    const Point& at(std::size_t r, std::size_t c) const { return grid_(r, c); }
    const Point& operator[](std::size_t i) const { return grid_[i]; }
    const std::vector<Point>& points() const { return grid_.values(); }

    std::size_t foreground_count() const;
    /// Row-major pixel indices of non-sentinel cells.
    std::vector<std::size_t> foreground_indices() const;

    bool operator==(const OrderedPointMap&) const = default;

private:
    Grid<Point> grid_;
};

// --- patches -----------------------------------------------------------------

struct PatchLayout {
    std::size_t patch_size = 8;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t count() const { return rows * cols; }
    std::size_t height() const { return rows * patch_size; }
    std::size_t width() const { return cols * patch_size; }
    std::size_t points_per_patch() const { return patch_size * patch_size; }

    /// Throws ArgumentError when patch_size does not divide both dimensions.
    static PatchLayout for_map(std::size_t height, std::size_t width, std::size_t patch_size);
};

struct Patch {
    std::size_t grid_row = 0;
    std::size_t grid_col = 0;
    std::vector<Point> points;  // patch_size^2 cells, row-major within the window
};

struct PatchGrid {
    PatchLayout layout;
    std::vector<Patch> patches;  // row-major over the grid
};

PatchGrid partition(const OrderedPointMap& map, std::size_t patch_size);

/// Inverse of partition.
OrderedPointMap realign(const PatchGrid& grid);

/// Places one scalar per patch at its grid position, giving a rows x cols grid.
template <typename T>
Grid<T> realign(std::span<const T> per_patch, const PatchLayout& layout) {
    if (per_patch.size() != layout.count())
        throw ArgumentError("realign: expected " + std::to_string(layout.count()) + " values, got " +
                            std::to_string(per_patch.size()));
    return Grid<T>(layout.rows, layout.cols, std::vector<T>(per_patch.begin(), per_patch.end()));
}

/// Row-major pixel indices covered by patch `index` of `layout`.
std::vector<std::size_t> patch_pixel_indices(const PatchLayout& layout, std::size_t width, std::size_t index);

// --- persistence -------------------------------------------------------------

enum class MapFormat { opm, tiff_xyz };

void save_opm(const OrderedPointMap& map, const std::filesystem::path& path);
OrderedPointMap load_opm(const std::filesystem::path& path);
OrderedPointMap load_map(const std::filesystem::path& path, MapFormat format);

void save_msk(const GroundTruthMask& mask, const std::filesystem::path& path);
GroundTruthMask load_msk(const std::filesystem::path& path);

/// True when the library was built with the MVTec TIFF / PNG reader.
bool has_tiff_support();
/// MVTec ground-truth PNG (any non-zero pixel is anomalous).
GroundTruthMask load_png_mask(const std::filesystem::path& path);

// --- synthetic objects -------------------------------------------------------

enum class ObjectKind { sphere, box, cylinder, wavy_plane };

ObjectKind parse_object_kind(const std::string& name);
std::string to_string(ObjectKind kind);

/// Synthetic scenes are orthographic depth scans: pixel (r, c) maps to
/// x = (c + 0.5 - W/2) * pitch, y = (H/2 - r - 0.5) * pitch, with pitch = 2/W,
/// and z is height toward the sensor.
struct SynthParams {
    std::size_t height = 224;
    std::size_t width = 224;
    double size = 0.6;     // sphere radius, box / cylinder half-extent, plane half-extent scale
    double noise = 0.0;    // std-dev of additive Gaussian surface noise, in coordinate units; [0, 0.05]
    double jitter = 0.15;  // relative random variation of size, placement and orientation; [0, 0.5]
    double max_view_angle_deg = 60.0;  // curved surfaces steeper than this are not measured; (0, 90]
};

struct SphereGeometry {
    std::array<double, 3> center;
    double radius;
};

OrderedPointMap synth_object(ObjectKind kind, const SynthParams& params, std::uint64_t seed);
/// Overload taking the kind by name; unknown names throw ArgumentError.
OrderedPointMap synth_object(const std::string& kind, const SynthParams& params, std::uint64_t seed);
/// Center and radius used by synth_object(sphere, params, seed).
SphereGeometry sphere_geometry(const SynthParams& params, std::uint64_t seed);

// --- anomaly injection -------------------------------------------------------

enum class AnomalyKind { bump, dent, blob_add, hole };

AnomalyKind parse_anomaly_kind(const std::string& name);
std::string to_string(AnomalyKind kind);

struct AnomalyParams {
    double radius_px = 12.0;           // disk radius in pixels
    double min_foreground_fraction = 0.0;  // radius grows until the disk covers this share of foreground
    double amplitude = 0.06;           // displacement for bump / dent / blob height, coordinate units
};

struct InjectedSample {
    OrderedPointMap map;
    GroundTruthMask mask;
};

InjectedSample inject_anomaly(const OrderedPointMap& map, AnomalyKind kind, const AnomalyParams& params,
                              std::uint64_t seed);

// --- dataset manifest --------------------------------------------------------

enum class SampleRole { train, test_normal, test_anomalous, task_irrelevant };

std::string to_string(SampleRole role);
SampleRole parse_sample_role(const std::string& name);

struct ManifestEntry {
    SampleRole role;
    std::string class_label;
    std::filesystem::path sample_path;
    std::optional<std::filesystem::path> gt_path;
};

class DatasetManifest {
public:
    /// Throws ConfigError when a task-irrelevant or training class equals a test class.
    DatasetManifest(std::vector<ManifestEntry> entries, std::uint64_t seed);

    const std::vector<ManifestEntry>& entries() const { return entries_; }
    std::uint64_t seed() const { return seed_; }
    std::vector<ManifestEntry> with_role(SampleRole role) const;
    std::vector<std::string> classes(SampleRole role) const;

    /// JSON with paths relative to the manifest's directory.
    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);

private:
    std::vector<ManifestEntry> entries_;
    std::uint64_t seed_;
};

}  // namespace zal3d
