#include "zal3d/bank.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "zal3d/binary_io.hpp"
#include "zal3d/parallel.hpp"
#include "zal3d/rng.hpp"
#include "zal3d/tensor_file.hpp"

namespace zal3d {

FeatureMatrix::FeatureMatrix(std::size_t rows, std::size_t width, std::vector<float> data)
    : width_(width), data_(std::move(data)) {
    if (width == 0 || data_.size() != rows * width) throw ArgumentError("feature matrix payload size mismatch");
}

void FeatureMatrix::append(std::span<const float> row) {
    if (width_ == 0) width_ = row.size();
    if (row.size() != width_)
        throw ArgumentError("feature width " + std::to_string(row.size()) + " differs from " + std::to_string(width_));
    data_.insert(data_.end(), row.begin(), row.end());
}

std::vector<float> combine(const FpfhDescriptor& fpfh, const Eigen::VectorXd& learned, std::span<const float> rgb,
                           const FeatureLayout& layout) {
    if (rgb.size() != layout.rgb_width)
        throw ArgumentError("rgb block has width " + std::to_string(rgb.size()) + ", layout expects " +
                            std::to_string(layout.rgb_width));
    if (layout.fpfh_width != kFpfhWidth) throw ArgumentError("layout fpfh width must be 33");
    if (static_cast<std::size_t>(learned.size()) != layout.learned_width)
        throw ArgumentError("learned block has width " + std::to_string(learned.size()) + ", layout expects " +
                            std::to_string(layout.learned_width));
    if (!learned.allFinite()) throw ArgumentError("learned feature is not finite");
    std::vector<float> out;
    out.reserve(layout.total());
    for (float v : rgb) {
        if (!std::isfinite(v)) throw ArgumentError("rgb feature is not finite");
        out.push_back(v);
    }
    for (double v : fpfh.bins) out.push_back(static_cast<float>(v));
    const double norm = learned.norm();
    const double scale = layout.normalize_learned && norm > 0 ? 1.0 / norm : 1.0;
    for (Eigen::Index i = 0; i < learned.size(); ++i) out.push_back(static_cast<float>(learned(i) * scale));
    return out;
}

double feature_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

namespace {

double squared(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

void check_query(const MemoryBank& bank, std::span<const float> f) {
    if (bank.size() == 0) throw StateError("memory bank is empty");
    if (f.size() != bank.features.width())
        throw ArgumentError("query width " + std::to_string(f.size()) + " differs from bank width " +
                            std::to_string(bank.features.width()));
}

}  // namespace

std::vector<std::size_t> coreset_select(const FeatureMatrix& features, double ratio, std::uint64_t seed) {
    const std::size_t n = features.rows();
    if (n == 0) throw ArgumentError("coreset selection over an empty feature set");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ArgumentError("coreset ratio must lie in (0, 1]");
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))), 1, n);

    Rng rng = make_rng(seed);
    std::size_t next = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    std::vector<std::size_t> selected;
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    constexpr std::size_t kChunk = 1024;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    while (true) {
        selected.push_back(next);
        if (selected.size() == k) break;
        const auto center = features.row(next);
        parallel_for(chunks, [&](std::size_t c) {
            const std::size_t end = std::min(n, (c + 1) * kChunk);
            for (std::size_t i = c * kChunk; i < end; ++i) nearest[i] = std::min(nearest[i], squared(features.row(i), center));
        });
        double far = -1.0;
        for (std::size_t i = 0; i < n; ++i)
            if (nearest[i] > far) far = nearest[i], next = i;
    }
    return selected;
}

MemoryBank build_bank(const FeatureMatrix& features, std::span<const RowProvenance> provenance,
                      const FeatureLayout& layout, double ratio, std::uint64_t seed) {
    if (features.rows() != provenance.size()) throw ArgumentError("one provenance record per feature row required");
    if (features.width() != layout.total()) throw ArgumentError("feature width does not match the layout");
    MemoryBank bank;
    bank.layout = layout;
    bank.coreset_ratio = ratio;
    bank.seed = seed;
    bank.features = FeatureMatrix(layout.total());
    for (auto i : coreset_select(features, ratio, seed)) {
        bank.features.append(features.row(i));
        bank.provenance.push_back(provenance[i]);
    }
    return bank;
}

BankHit nn_query(const MemoryBank& bank, std::span<const float> f) {
    check_query(bank, f);
    BankHit best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const double d = squared(bank.features.row(i), f);
        if (d < best.distance) best = {i, d};
    }
    best.distance = std::sqrt(best.distance);
    return best;
}

std::vector<BankHit> knn_rows(const MemoryBank& bank, std::span<const float> f, std::size_t b) {
    check_query(bank, f);
    if (b < 1 || b > bank.size())
        throw ArgumentError("b = " + std::to_string(b) + " outside [1, " + std::to_string(bank.size()) + "]");
    std::vector<std::pair<double, std::size_t>> d(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) d[i] = {squared(bank.features.row(i), f), i};
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(b), d.end());
    std::vector<BankHit> out;
    for (std::size_t i = 0; i < b; ++i) out.push_back({d[i].second, std::sqrt(d[i].first)});
    return out;
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& path) {
    NamedTensor t{"features", {static_cast<std::uint32_t>(bank.size()), static_cast<std::uint32_t>(bank.features.width())},
                  bank.features.data()};
    save_tensors(path, "ZALB", std::span<const NamedTensor>(&t, 1));

    nlohmann::ordered_json j;
    j["layout"] = {{"rgb_width", bank.layout.rgb_width},
                   {"fpfh_width", bank.layout.fpfh_width},
                   {"learned_width", bank.layout.learned_width},
                   {"normalize_learned", bank.layout.normalize_learned}};
    j["coreset_ratio"] = bank.coreset_ratio;
    j["seed"] = bank.seed;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& p : bank.provenance) rows.push_back({p.sample, p.patch});
    j["rows"] = std::move(rows);
    std::ofstream f(path.string() + ".json", std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string() + ".json");
    f << j.dump(1) << '\n';
}

MemoryBank load_bank(const std::filesystem::path& path) {
    const auto tensors = load_tensors(path, "ZALB");
    const auto& t = find_tensor(tensors, "features");
    if (t.dims.size() != 2) throw FormatError(path.string() + ": features must be a matrix");
    MemoryBank bank;
    if (t.dims[0] > 0) bank.features = FeatureMatrix(t.dims[0], t.dims[1], t.data);
    else bank.features = FeatureMatrix(t.dims[1]);

    const std::string side = path.string() + ".json";
    std::ifstream f(side);
    if (!f) throw IoError("cannot open: " + side);
    try {
        const auto j = nlohmann::json::parse(f);
        const auto& l = j.at("layout");
        bank.layout.rgb_width = l.at("rgb_width").get<std::size_t>();
        bank.layout.fpfh_width = l.at("fpfh_width").get<std::size_t>();
        bank.layout.learned_width = l.at("learned_width").get<std::size_t>();
        bank.layout.normalize_learned = l.at("normalize_learned").get<bool>();
        bank.coreset_ratio = j.at("coreset_ratio").get<double>();
        bank.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& r : j.at("rows")) bank.provenance.push_back({r.at(0).get<std::uint32_t>(), r.at(1).get<std::uint32_t>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(side + ": " + e.what());
    }
    if (bank.provenance.size() != bank.size()) throw FormatError(side + ": provenance row count mismatch");
    if (bank.layout.total() != bank.features.width()) throw FormatError(side + ": layout does not match feature width");
    return bank;
}

void save_rgb_features(const FeatureMatrix& rgb, const std::filesystem::path& path) {
    io::Writer w;
    w.magic("ZALR");
    w.u32(static_cast<std::uint32_t>(rgb.rows()));
    w.u32(static_cast<std::uint32_t>(rgb.width()));
    w.f32s(rgb.data());
    w.write_file(path);
}

FeatureMatrix load_rgb_features(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("ZALR");
    const std::size_t rows = r.u32(), width = r.u32();
    if (rows * width * 4 != r.remaining()) throw FormatError(r.name() + ": payload does not match header");
    if (width == 0) throw FormatError(r.name() + ": zero feature width");
    return FeatureMatrix(rows, width, r.f32s(rows * width));
}

}  // namespace zal3d
