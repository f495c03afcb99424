#include "zal3d/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include <json.hpp>

#include "zal3d/binary_io.hpp"
#include "zal3d/rng.hpp"

#ifdef ZAL3D_WITH_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

namespace zal3d {

OrderedPointMap::OrderedPointMap(std::size_t height, std::size_t width, std::vector<Point> points) {
    if (height == 0 || width == 0) throw ArgumentError("point map dimensions must be positive");
    if (points.size() != height * width)
        throw ArgumentError("point map expects " + std::to_string(height * width) + " points, got " +
                            std::to_string(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
        for (float v : points[i])
            if (!std::isfinite(v))
                throw ValidationError("non-finite coordinate at pixel " + std::to_string(i));
    grid_ = Grid<Point>(height, width, std::move(points));
}

std::size_t OrderedPointMap::foreground_count() const {
    return static_cast<std::size_t>(
        std::count_if(points().begin(), points().end(), [](const Point& p) { return !is_sentinel(p); }));
}

std::vector<std::size_t> OrderedPointMap::foreground_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (!is_sentinel(points()[i])) out.push_back(i);
    return out;
}

// --- patches -----------------------------------------------------------------

PatchLayout PatchLayout::for_map(std::size_t height, std::size_t width, std::size_t patch_size) {
    if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0)
        throw ArgumentError("patch size " + std::to_string(patch_size) + " does not divide " +
                            std::to_string(height) + "x" + std::to_string(width));
    return PatchLayout{patch_size, height / patch_size, width / patch_size};
}

std::vector<std::size_t> patch_pixel_indices(const PatchLayout& layout, std::size_t width, std::size_t index) {
    const std::size_t r0 = (index / layout.cols) * layout.patch_size;
    const std::size_t c0 = (index % layout.cols) * layout.patch_size;
    std::vector<std::size_t> out;
    out.reserve(layout.points_per_patch());
    for (std::size_t r = 0; r < layout.patch_size; ++r)
        for (std::size_t c = 0; c < layout.patch_size; ++c) out.push_back((r0 + r) * width + c0 + c);
    return out;
}

PatchGrid partition(const OrderedPointMap& map, std::size_t patch_size) {
    PatchGrid grid;
    grid.layout = PatchLayout::for_map(map.height(), map.width(), patch_size);
    grid.patches.reserve(grid.layout.count());
    for (std::size_t i = 0; i < grid.layout.count(); ++i) {
        Patch patch{i / grid.layout.cols, i % grid.layout.cols, {}};
        patch.points.reserve(grid.layout.points_per_patch());
        for (std::size_t px : patch_pixel_indices(grid.layout, map.width(), i)) patch.points.push_back(map[px]);
        grid.patches.push_back(std::move(patch));
    }
    return grid;
}

OrderedPointMap realign(const PatchGrid& grid) {
    const auto& layout = grid.layout;
    if (grid.patches.size() != layout.count()) throw ArgumentError("realign: patch count mismatch");
    std::vector<Point> points(layout.height() * layout.width());
    for (const Patch& patch : grid.patches) {
        if (patch.points.size() != layout.points_per_patch()) throw ArgumentError("realign: bad patch size");
        const auto idx = patch_pixel_indices(layout, layout.width(), patch.grid_row * layout.cols + patch.grid_col);
        for (std::size_t k = 0; k < idx.size(); ++k) points[idx[k]] = patch.points[k];
    }
    return OrderedPointMap(layout.height(), layout.width(), std::move(points));
}

// --- persistence -------------------------------------------------------------

void save_opm(const OrderedPointMap& map, const std::filesystem::path& path) {
    io::Writer w;
    w.magic("OPM1");
    w.u32(static_cast<std::uint32_t>(map.height()));
    w.u32(static_cast<std::uint32_t>(map.width()));
    for (const Point& p : map.points()) w.f32s(p);
    w.write_file(path);
}

OrderedPointMap load_opm(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("OPM1");
    const std::size_t h = r.u32();
    const std::size_t w = r.u32();
    if (h == 0 || w == 0) throw FormatError(r.name() + ": zero dimension");
    if (r.remaining() < h * w * 12) throw IoError(r.name() + ": truncated payload");
    std::vector<Point> points(h * w);
    for (Point& p : points) r.bytes(p.data(), 12);
    return OrderedPointMap(h, w, std::move(points));
}

bool has_tiff_support() {
#ifdef ZAL3D_WITH_OPENCV
    return true;
#else
    return false;
#endif
}

namespace {

#ifdef ZAL3D_WITH_OPENCV
OrderedPointMap load_tiff_xyz(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw IoError("cannot read TIFF: " + path.string());
    if (img.type() != CV_32FC3) throw FormatError(path.string() + ": expected 3-channel 32-bit float TIFF");
    std::vector<Point> points(static_cast<std::size_t>(img.rows) * img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            // OpenCV hands back channels in BGR order.
            const auto& v = img.at<cv::Vec3f>(r, c);
            Point p{v[2], v[1], v[0]};
            for (float& x : p)
                if (!std::isfinite(x)) p = Point{0, 0, 0};
            points[static_cast<std::size_t>(r) * img.cols + c] = p;
        }
    return OrderedPointMap(img.rows, img.cols, std::move(points));
}
#endif

}  // namespace

GroundTruthMask load_png_mask(const std::filesystem::path& path) {
#ifdef ZAL3D_WITH_OPENCV
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw IoError("cannot read mask: " + path.string());
    GroundTruthMask mask(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) mask(r, c) = img.at<std::uint8_t>(r, c) != 0 ? 1 : 0;
    return mask;
#else
    throw ArgumentError("PNG mask support not compiled in (rebuild with ZAL3D_WITH_OPENCV): " + path.string());
#endif
}

OrderedPointMap load_map(const std::filesystem::path& path, MapFormat format) {
    switch (format) {
        case MapFormat::opm:
            return load_opm(path);
        case MapFormat::tiff_xyz:
#ifdef ZAL3D_WITH_OPENCV
            return load_tiff_xyz(path);
#else
            throw ArgumentError("TIFF support not compiled in (rebuild with ZAL3D_WITH_OPENCV): " + path.string());
#endif
    }
    throw ArgumentError("unknown map format");
}

void save_msk(const GroundTruthMask& mask, const std::filesystem::path& path) {
    io::Writer w;
    w.magic("MSK1");
    w.u32(static_cast<std::uint32_t>(mask.height()));
    w.u32(static_cast<std::uint32_t>(mask.width()));
    w.bytes(mask.values().data(), mask.size());
    w.write_file(path);
}

GroundTruthMask load_msk(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("MSK1");
    const std::size_t h = r.u32();
    const std::size_t w = r.u32();
    if (r.remaining() < h * w) throw IoError(r.name() + ": truncated payload");
    std::vector<std::uint8_t> bits(h * w);
    r.bytes(bits.data(), bits.size());
    for (auto b : bits)
        if (b > 1) throw ValidationError(r.name() + ": mask values must be 0 or 1");
    return GroundTruthMask(h, w, std::move(bits));
}

// --- synthetic objects -------------------------------------------------------

ObjectKind parse_object_kind(const std::string& name) {
    if (name == "sphere") return ObjectKind::sphere;
    if (name == "box") return ObjectKind::box;
    if (name == "cylinder") return ObjectKind::cylinder;
    if (name == "wavy-plane") return ObjectKind::wavy_plane;
    throw ArgumentError("unknown object kind: " + name);
}

std::string to_string(ObjectKind kind) {
    switch (kind) {
        case ObjectKind::sphere: return "sphere";
        case ObjectKind::box: return "box";
        case ObjectKind::cylinder: return "cylinder";
        case ObjectKind::wavy_plane: return "wavy-plane";
    }
    return "?";
}

namespace {

struct Pose {
    double size, cx, cy, angle;
};

Pose draw_pose(const SynthParams& params, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double j = params.jitter;
    Pose pose;
    pose.size = params.size * (1.0 + j * u(rng));
    pose.cx = 0.3 * j * u(rng);
    pose.cy = 0.3 * j * u(rng);
    pose.angle = j > 0 ? std::numbers::pi * 0.5 * (u(rng) + 1.0) : 0.0;
    return pose;
}

void check_synth_params(const SynthParams& p) {
    if (p.height == 0 || p.width == 0) throw ArgumentError("synth: dimensions must be positive");
    if (!(p.size > 0.0 && p.size <= 1.0)) throw ArgumentError("synth: size must be in (0, 1]");
    if (!(p.noise >= 0.0 && p.noise <= 0.05)) throw ArgumentError("synth: noise must be in [0, 0.05]");
    if (!(p.jitter >= 0.0 && p.jitter <= 0.5)) throw ArgumentError("synth: jitter must be in [0, 0.5]");
    if (!(p.max_view_angle_deg > 0.0 && p.max_view_angle_deg <= 90.0))
        throw ArgumentError("synth: max_view_angle_deg must be in (0, 90]");
}

}  // namespace

SphereGeometry sphere_geometry(const SynthParams& params, std::uint64_t seed) {
    check_synth_params(params);
    Rng rng = make_rng(seed);
    const Pose pose = draw_pose(params, rng);
    return SphereGeometry{{pose.cx, pose.cy, 0.0}, pose.size};
}

OrderedPointMap synth_object(const std::string& kind, const SynthParams& params, std::uint64_t seed) {
    return synth_object(parse_object_kind(kind), params, seed);
}

OrderedPointMap synth_object(ObjectKind kind, const SynthParams& params, std::uint64_t seed) {
    check_synth_params(params);
    Rng rng = make_rng(seed);
    const Pose pose = draw_pose(params, rng);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double pitch = 2.0 / static_cast<double>(params.width);
    const double half_h = 0.5 * static_cast<double>(params.height);
    const double half_w = 0.5 * static_cast<double>(params.width);
    const double ca = std::cos(pose.angle), sa = std::sin(pose.angle);
    // a round surface at radial offset d has view angle asin(d / radius)
    const double grazing = std::min(0.97, std::sin(params.max_view_angle_deg * std::numbers::pi / 180.0));

    // Wavy-plane shape parameters are drawn up front so every pixel shares them.
    const double wave_k1 = 2.0 * std::numbers::pi / (0.45 + 0.3 * u01(rng));
    const double wave_k2 = 2.0 * std::numbers::pi / (0.45 + 0.3 * u01(rng));
    const double wave_p1 = 2.0 * std::numbers::pi * u01(rng);
    const double wave_p2 = 2.0 * std::numbers::pi * u01(rng);

    std::vector<Point> points(params.height * params.width, Point{0, 0, 0});
    for (std::size_t r = 0; r < params.height; ++r) {
        for (std::size_t c = 0; c < params.width; ++c) {
            const double x = (static_cast<double>(c) + 0.5 - half_w) * pitch;
            const double y = (half_h - static_cast<double>(r) - 0.5) * pitch;
            const double dx = x - pose.cx, dy = y - pose.cy;
            // object-local frame
            const double lu = ca * dx + sa * dy;
            const double lv = -sa * dx + ca * dy;
            std::optional<double> z;
            switch (kind) {
                case ObjectKind::sphere: {
                    const double rr = pose.size;
                    const double d2 = dx * dx + dy * dy;
                    if (d2 < grazing * grazing * rr * rr) z = std::sqrt(rr * rr - d2);
                    break;
                }
                case ObjectKind::box: {
                    // square frustum: flat top, four slanted faces
                    const double top = 0.55 * pose.size, base = pose.size, h = 0.35 * pose.size;
                    const double m = std::max(std::abs(lu), std::abs(lv));
                    if (m <= top)
                        z = 0.1 * pose.size + h;
                    else if (m <= base)
                        z = 0.1 * pose.size + h * (base - m) / (base - top);
                    break;
                }
                case ObjectKind::cylinder: {
                    const double rad = 0.45 * pose.size;
                    if (std::abs(lu) <= pose.size * 1.2 && std::abs(lv) < grazing * rad)
                        z = std::sqrt(rad * rad - lv * lv);
                    break;
                }
                case ObjectKind::wavy_plane: {
                    const double half = 1.3 * pose.size;
                    if (std::abs(dx) <= half && std::abs(dy) <= half) {
                        const double amp = 0.12 * pose.size;
                        z = 0.2 + amp * std::sin(wave_k1 * lu + wave_p1) * std::sin(wave_k2 * lv + wave_p2);
                    }
                    break;
                }
            }
            if (!z) continue;
            double zz = *z;
            if (params.noise > 0) zz += params.noise * gauss(rng);
            Point p{static_cast<float>(x), static_cast<float>(y), static_cast<float>(zz)};
            if (is_sentinel(p)) p[2] = std::numeric_limits<float>::min();
            points[r * params.width + c] = p;
        }
    }
    return OrderedPointMap(params.height, params.width, std::move(points));
}

// --- anomaly injection -------------------------------------------------------

AnomalyKind parse_anomaly_kind(const std::string& name) {
    if (name == "bump") return AnomalyKind::bump;
    if (name == "dent") return AnomalyKind::dent;
    if (name == "blob-add") return AnomalyKind::blob_add;
    if (name == "hole") return AnomalyKind::hole;
    throw ArgumentError("unknown anomaly kind: " + name);
}

std::string to_string(AnomalyKind kind) {
    switch (kind) {
        case AnomalyKind::bump: return "bump";
        case AnomalyKind::dent: return "dent";
        case AnomalyKind::blob_add: return "blob-add";
        case AnomalyKind::hole: return "hole";
    }
    return "?";
}

namespace {

std::vector<std::size_t> disk_pixels(std::size_t h, std::size_t w, std::size_t center, double radius) {
    const long cr = static_cast<long>(center / w), cc = static_cast<long>(center % w);
    const long ir = static_cast<long>(std::ceil(radius));
    std::vector<std::size_t> out;
    for (long r = cr - ir; r <= cr + ir; ++r) {
        if (r < 0 || r >= static_cast<long>(h)) continue;
        for (long c = cc - ir; c <= cc + ir; ++c) {
            if (c < 0 || c >= static_cast<long>(w)) continue;
            const double d2 = static_cast<double>((r - cr) * (r - cr) + (c - cc) * (c - cc));
            if (d2 < radius * radius) out.push_back(static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c));
        }
    }
    return out;
}

}  // namespace

InjectedSample inject_anomaly(const OrderedPointMap& map, AnomalyKind kind, const AnomalyParams& params,
                              std::uint64_t seed) {
    const auto fg = map.foreground_indices();
    if (fg.empty()) throw ArgumentError("inject_anomaly: map has no foreground points");
    if (!(params.radius_px > 0.0)) throw ArgumentError("inject_anomaly: radius must be positive");

    const std::size_t h = map.height(), w = map.width();
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    std::normal_distribution<double> gauss(0.0, 1.0);

    auto fg_in = [&](const std::vector<std::size_t>& px) {
        std::vector<std::size_t> out;
        for (auto i : px)
            if (!is_sentinel(map[i])) out.push_back(i);
        return out;
    };

    double radius = params.radius_px;
    if (params.min_foreground_fraction > 0.0)
        radius = std::max(radius, std::sqrt(params.min_foreground_fraction * static_cast<double>(fg.size()) /
                                            std::numbers::pi) + 0.5);

    // Prefer sites whose disk lies entirely on the surface.
    std::size_t center = fg[pick(rng)];
    double best_share = -1.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
        const std::size_t cand = fg[pick(rng)];
        const auto disk = disk_pixels(h, w, cand, radius);
        const double share = static_cast<double>(fg_in(disk).size()) / static_cast<double>(disk.size());
        if (share > best_share) {
            best_share = share;
            center = cand;
        }
        if (share >= 0.999) break;
    }
    std::vector<std::size_t> region = fg_in(disk_pixels(h, w, center, radius));
    const auto wanted = static_cast<std::size_t>(std::ceil(params.min_foreground_fraction * static_cast<double>(fg.size())));
    while (region.size() < wanted && radius < static_cast<double>(std::max(h, w))) {
        radius += 0.5;
        region = fg_in(disk_pixels(h, w, center, radius));
    }

    // Local surface normal from the disk's covariance, oriented toward the sensor.
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (auto i : region) mean += Eigen::Vector3d(map[i][0], map[i][1], map[i][2]);
    mean /= static_cast<double>(region.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (auto i : region) {
        const Eigen::Vector3d d = Eigen::Vector3d(map[i][0], map[i][1], map[i][2]) - mean;
        cov += d * d.transpose();
    }
    Eigen::Vector3d normal(0, 0, 1);
    if (region.size() >= 3) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
        normal = es.eigenvectors().col(0);
        if (normal.z() < 0) normal = -normal;
        if (!normal.allFinite() || normal.norm() < 0.5) normal = Eigen::Vector3d(0, 0, 1);
    }

    std::vector<Point> points = map.points();
    GroundTruthMask mask(h, w, 0);
    const long cr = static_cast<long>(center / w), cc = static_cast<long>(center % w);
    for (auto i : region) {
        const double dr = static_cast<double>(static_cast<long>(i / w) - cr);
        const double dc = static_cast<double>(static_cast<long>(i % w) - cc);
        const double t = std::sqrt(dr * dr + dc * dc) / radius;  // in [0, 1)
        Eigen::Vector3d p(points[i][0], points[i][1], points[i][2]);
        switch (kind) {
            case AnomalyKind::bump:
            case AnomalyKind::dent: {
                const double s = kind == AnomalyKind::bump ? 1.0 : -1.0;
                const double profile = std::pow(std::cos(0.5 * std::numbers::pi * t), 2);
                p += s * params.amplitude * profile * normal;
                break;
            }
            case AnomalyKind::blob_add: {
                p += 1.5 * params.amplitude * std::sqrt(1.0 - t * t) * normal;
                for (int k = 0; k < 3; ++k) p[k] += 0.05 * params.amplitude * gauss(rng);
                break;
            }
            case AnomalyKind::hole:
                p.setZero();
                break;
        }
        Point q{static_cast<float>(p.x()), static_cast<float>(p.y()), static_cast<float>(p.z())};
        if (kind != AnomalyKind::hole && is_sentinel(q)) q[2] = std::numeric_limits<float>::min();
        points[i] = q;
        mask[i] = 1;
    }
    return InjectedSample{OrderedPointMap(h, w, std::move(points)), std::move(mask)};
}

// --- dataset manifest --------------------------------------------------------

std::string to_string(SampleRole role) {
    switch (role) {
        case SampleRole::train: return "train";
        case SampleRole::test_normal: return "test-normal";
        case SampleRole::test_anomalous: return "test-anomalous";
        case SampleRole::task_irrelevant: return "task-irrelevant";
    }
    return "?";
}

SampleRole parse_sample_role(const std::string& name) {
    if (name == "train") return SampleRole::train;
    if (name == "test-normal") return SampleRole::test_normal;
    if (name == "test-anomalous") return SampleRole::test_anomalous;
    if (name == "task-irrelevant") return SampleRole::task_irrelevant;
    throw ArgumentError("unknown sample role: " + name);
}

DatasetManifest::DatasetManifest(std::vector<ManifestEntry> entries, std::uint64_t seed)
    : entries_(std::move(entries)), seed_(seed) {
    std::set<std::string> test_classes;
    for (const auto& e : entries_)
        if (e.role == SampleRole::test_normal || e.role == SampleRole::test_anomalous)
            test_classes.insert(e.class_label);
    for (const auto& e : entries_) {
        if (e.role == SampleRole::task_irrelevant && test_classes.count(e.class_label))
            throw ConfigError("task-irrelevant class '" + e.class_label + "' equals a test class");
        if (e.role == SampleRole::train && test_classes.count(e.class_label))
            throw ConfigError("training class '" + e.class_label + "' equals a test class");
    }
}

std::vector<ManifestEntry> DatasetManifest::with_role(SampleRole role) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
                 [&](const ManifestEntry& e) { return e.role == role; });
    return out;
}

std::vector<std::string> DatasetManifest::classes(SampleRole role) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
        if (e.role == role && std::find(out.begin(), out.end(), e.class_label) == out.end())
            out.push_back(e.class_label);
    return out;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    const auto base = path.parent_path();
    nlohmann::ordered_json j;
    j["seed"] = seed_;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& e : entries_) {
        nlohmann::ordered_json s;
        s["role"] = to_string(e.role);
        s["class"] = e.class_label;
        s["path"] = std::filesystem::relative(e.sample_path, base).generic_string();
        if (e.gt_path) s["gt"] = std::filesystem::relative(*e.gt_path, base).generic_string();
        j["samples"].push_back(std::move(s));
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    std::vector<ManifestEntry> entries;
    try {
        for (const auto& s : j.at("samples")) {
            ManifestEntry e{parse_sample_role(s.at("role").get<std::string>()), s.at("class").get<std::string>(),
                            base / s.at("path").get<std::string>(), std::nullopt};
            if (s.contains("gt")) e.gt_path = base / s.at("gt").get<std::string>();
            entries.push_back(std::move(e));
        }
        return DatasetManifest(std::move(entries), j.at("seed").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace zal3d
