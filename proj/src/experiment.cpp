#include "zal3d/experiment.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "zal3d/parallel.hpp"
#include "zal3d/rng.hpp"

namespace zal3d {

namespace fs = std::filesystem;

// --- config ------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    double v = 0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(v))
        throw ConfigError(key + ": expected a number, got '" + text + "'");
    return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> parse_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

enum class Kind { number, integer, boolean, text, list };

struct Field {
    std::string section, key;
    Kind kind;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

std::vector<Field> fields(ExperimentConfig& c) {
    std::vector<Field> f;
    auto num = [&](const char* s, const char* k, double& v) {
        const std::string name = std::string(s) + "." + k;
        f.push_back({s, k, Kind::number, [&v, name](const std::string& t) { v = parse_double(name, t); },
                     [&v] { return format_double(v); }});
    };
    auto size = [&](const char* s, const char* k, std::size_t& v) {
        const std::string name = std::string(s) + "." + k;
        f.push_back({s, k, Kind::integer, [&v, name](const std::string& t) { v = parse_uint(name, t); },
                     [&v] { return std::to_string(v); }});
    };
    auto u64 = [&](const char* s, const char* k, std::uint64_t& v) {
        const std::string name = std::string(s) + "." + k;
        f.push_back({s, k, Kind::integer, [&v, name](const std::string& t) { v = parse_uint(name, t); },
                     [&v] { return std::to_string(v); }});
    };
    auto flag = [&](const char* s, const char* k, bool& v) {
        const std::string name = std::string(s) + "." + k;
        f.push_back({s, k, Kind::boolean, [&v, name](const std::string& t) { v = parse_bool(name, t); },
                     [&v] { return std::string(v ? "true" : "false"); }});
    };
    auto text = [&](const char* s, const char* k, std::string& v) {
        f.push_back({s, k, Kind::text, [&v](const std::string& t) { v = trim(t); }, [&v] { return v; }});
    };
    auto list = [&](const char* s, const char* k, std::vector<std::string>& v) {
        f.push_back({s, k, Kind::list, [&v](const std::string& t) { v = parse_list(t); }, [&v] { return join(v); }});
    };

    list("experiment", "train_classes", c.train_classes);
    text("experiment", "test_class", c.test_class);
    list("experiment", "irrelevant_classes", c.irrelevant_classes);
    u64("experiment", "seed", c.seed);
    size("experiment", "threads", c.threads);

    num("randnet", "width", c.randnet_width);
    f.push_back({"randnet", "norm_mode", Kind::text,
                 [&c](const std::string& t) {
                     const auto v = trim(t);
                     if (v == "spatial") c.randnet.norm_mode = NormMode::spatial;
                     else if (v == "running") c.randnet.norm_mode = NormMode::running;
                     else throw ConfigError("randnet.norm_mode: expected spatial or running, got '" + t + "'");
                 },
                 [&c] { return std::string(c.randnet.norm_mode == NormMode::spatial ? "spatial" : "running"); }});
    f.push_back({"randnet", "padding", Kind::text,
                 [&c](const std::string& t) {
                     const auto v = trim(t);
                     if (v == "zeros") c.randnet.padding = PaddingMode::zeros;
                     else if (v == "replicate") c.randnet.padding = PaddingMode::replicate;
                     else throw ConfigError("randnet.padding: expected zeros or replicate, got '" + t + "'");
                 },
                 [&c] { return std::string(c.randnet.padding == PaddingMode::zeros ? "zeros" : "replicate"); }});
    flag("randnet", "fill_background", c.randnet.fill_background);

    auto& s = c.synthesis;
    num("synthesis", "tau", s.tau);
    size("synthesis", "surrounding", s.surrounding);
    num("synthesis", "removal_min", s.removal_min);
    num("synthesis", "removal_max", s.removal_max);
    num("synthesis", "adding_share", s.adding_share);
    size("synthesis", "negatives_per_positive", s.negatives_per_positive);
    size("synthesis", "patch_points", s.patch_points);
    num("synthesis", "min_positive_foreground", s.min_positive_foreground);
    size("synthesis", "max_positives_per_map", s.max_positives_per_map);
    size("synthesis", "max_site_retries", s.max_site_retries);

    size("features", "image_size", c.image_size);
    size("features", "patch_size", c.patch_size);
    size("features", "fpfh_k", c.fpfh_k);
    flag("features", "normalize_learned", c.normalize_learned);
    flag("features", "center_patches", c.train.center_patches);
    text("features", "rgb_dir", c.rgb_dir);

    auto& e = c.train.encoder;
    size("network", "sa1_centers", e.sa1_centers);
    num("network", "sa1_radius", e.sa1_radius);
    size("network", "sa1_group", e.sa1_group);
    size("network", "sa1_width", e.sa1_width);
    size("network", "sa2_centers", e.sa2_centers);
    num("network", "sa2_radius", e.sa2_radius);
    size("network", "sa2_group", e.sa2_group);
    size("network", "sa2_width", e.sa2_width);
    size("network", "global_width", e.global_width);
    size("network", "head_width", e.head_width);
    num("network", "input_scale", e.input_scale);

    size("train", "epochs", c.train.epochs);
    size("train", "batch_positives", c.train.batch_positives);
    num("train", "learning_rate", c.train.learning_rate);
    num("train", "temperature", c.train.loss.temperature);
    num("train", "w_con", c.train.loss.w_con);
    num("train", "w_rd", c.train.loss.w_rd);
    f.push_back({"train", "rd_projection", Kind::text,
                 [](const std::string& t) {
                     if (trim(t) != "random-orthonormal")
                         throw ConfigError("train.rd_projection: only random-orthonormal is supported");
                 },
                 [] { return std::string("random-orthonormal"); }});

    num("bank", "coreset_ratio", c.coreset_ratio);

    size("score", "b", c.score.b);
    num("score", "eta", c.score.eta);
    num("score", "w_d", c.score.w_d);
    num("score", "w_c", c.score.w_c);
    num("score", "blur_sigma", c.score.blur_sigma);
    flag("score", "normalize_before_fuse", c.score.normalize_before_fuse);
    flag("score", "classifier", c.use_classifier);
    flag("score", "perturb", c.use_perturbation);

    num("eval", "fpr_limit", c.fpr_limit);

    auto& d = c.synth;
    list("synth", "train_kinds", d.train_kinds);
    size("synth", "train_count", d.train_count);
    text("synth", "test_kind", d.test_kind);
    size("synth", "test_normal", d.test_normal);
    size("synth", "test_anomalous", d.test_anomalous);
    list("synth", "irrelevant_kinds", d.irrelevant_kinds);
    size("synth", "irrelevant_count", d.irrelevant_count);
    list("synth", "anomaly_kinds", d.anomaly_kinds);
    num("synth", "anomaly_radius_px", d.anomaly_radius_px);
    num("synth", "min_anomaly_fraction", d.min_anomaly_fraction);
    num("synth", "amplitude", d.amplitude);
    num("synth", "size", d.size);
    num("synth", "noise", d.noise);
    num("synth", "jitter", d.jitter);
    num("synth", "max_view_angle_deg", d.max_view_angle_deg);
    return f;
}

Field& find_field(std::vector<Field>& all, const std::string& section, const std::string& key) {
    for (auto& f : all)
        if (f.section == section && f.key == key) return f;
    throw ConfigError("unknown config key '" + section + "." + key + "'");
}

}  // namespace

void SynthDatasetConfig::validate() const {
    std::map<std::string, std::string> role_of;
    auto claim = [&](const std::string& kind, const std::string& role) {
        try {
            parse_object_kind(kind);
        } catch (const ArgumentError& e) {
            throw ValidationError(e.what());
        }
        auto [it, fresh] = role_of.emplace(kind, role);
        if (!fresh && it->second != role)
            throw ValidationError("class '" + kind + "' used for both " + it->second + " and " + role);
    };
    if (train_kinds.empty()) throw ValidationError("at least one train kind required");
    for (const auto& k : train_kinds) claim(k, "train");
    claim(test_kind, "test");
    for (const auto& k : irrelevant_kinds) claim(k, "task-irrelevant");
    for (const auto& a : anomaly_kinds) {
        try {
            parse_anomaly_kind(a);
        } catch (const ArgumentError& e) {
            throw ValidationError(e.what());
        }
    }
    if (test_anomalous > 0 && anomaly_kinds.empty()) throw ValidationError("anomalous samples need anomaly kinds");
    if (!(min_anomaly_fraction >= 0 && min_anomaly_fraction < 1)) throw ValidationError("min_anomaly_fraction outside [0, 1)");
    if (!(noise >= 0 && noise <= 0.05)) throw ValidationError("noise outside [0, 0.05]");
    if (!(jitter >= 0 && jitter <= 0.5)) throw ValidationError("jitter outside [0, 0.5]");
    if (!(size > 0) || !(anomaly_radius_px > 0)) throw ValidationError("size and anomaly radius must be positive");
}

void ExperimentConfig::validate() const {
    if (train_classes.empty()) throw ConfigError("at least one training class required");
    if (test_class.empty()) throw ConfigError("test class required");
    for (const auto& t : train_classes)
        if (t == test_class) throw ConfigError("training class '" + t + "' equals the test class");
    for (const auto& t : irrelevant_classes)
        if (t == test_class) throw ConfigError("task-irrelevant class '" + t + "' equals the test class");
    if (threads == 0) throw ConfigError("threads must be positive");
    if (!(randnet_width > 0 && randnet_width <= 1)) throw ConfigError("randnet.width must lie in (0, 1]");
    synthesis.validate();
    if (patch_size == 0 || image_size % patch_size != 0) throw ConfigError("patch_size must divide image_size");
    if (image_size % 32 != 0) throw ConfigError("image_size must be a multiple of 32");
    if (synthesis.patch_points != patch_size * patch_size)
        throw ConfigError("synthesis.patch_points must equal patch_size^2");
    if (fpfh_k < 3) throw ConfigError("fpfh_k must be at least 3");
    train.validate();
    if (train.encoder.patch_points != synthesis.patch_points) throw ConfigError("network patch size differs from synthesis");
    if (!(coreset_ratio > 0 && coreset_ratio <= 1)) throw ConfigError("bank.coreset_ratio must lie in (0, 1]");
    score.validate();
    if (!(fpr_limit > 0 && fpr_limit <= 1)) throw ConfigError("eval.fpr_limit must lie in (0, 1]");
}

ExperimentConfig ExperimentConfig::parse_ini(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    auto all = fields(c);
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, value] : body) find_field(all, section, key).set(value.data());
    }
    c.train.classifier = c.train.encoder;
    c.train.seed = c.train_seed();
    c.synthesis.seed = c.synthesis_seed();
    c.synthesis.randnet = c.randnet;
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_ini(ss.str());
}

void ExperimentConfig::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("override must look like section.key=value: " + assignment);
    auto all = fields(*this);
    find_field(all, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)))
        .set(assignment.substr(eq + 1));
    train.classifier = train.encoder;
    train.seed = train_seed();
    synthesis.seed = synthesis_seed();
    synthesis.randnet = randnet;
}

std::string ExperimentConfig::to_ini() const {
    ExperimentConfig copy = *this;
    std::string out, section;
    for (const auto& f : fields(copy)) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
    ExperimentConfig copy = *this;
    nlohmann::ordered_json j;
    for (const auto& f : fields(copy)) {
        auto& slot = j[f.section][f.key];
        switch (f.kind) {
            case Kind::number: slot = parse_double(f.key, f.get()); break;
            case Kind::integer: slot = parse_uint(f.key, f.get()); break;
            case Kind::boolean: slot = f.get() == "true"; break;
            case Kind::text: slot = f.get(); break;
            case Kind::list: slot = parse_list(f.get()); break;
        }
    }
    return j;
}

std::uint64_t ExperimentConfig::randnet_seed() const { return derive_seed(seed, 11); }
std::uint64_t ExperimentConfig::synthesis_seed() const { return derive_seed(seed, 12); }
std::uint64_t ExperimentConfig::train_seed() const { return derive_seed(seed, 13); }
std::uint64_t ExperimentConfig::coreset_seed() const { return derive_seed(seed, 14); }
std::uint64_t ExperimentConfig::data_seed() const { return derive_seed(seed, 15); }

void ExperimentConfig::apply_seed_env() {
    if (const char* env = std::getenv("ZAL3D_SEED"); env && *env) set(std::string("experiment.seed=") + env);
}

// --- synthetic dataset -------------------------------------------------------

DatasetManifest synthesize_dataset(const SynthDatasetConfig& cfg, std::size_t image_size, std::uint64_t seed,
                                   const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir / "train");
    fs::create_directories(out_dir / "test");
    fs::create_directories(out_dir / "irrelevant");
    SynthParams params;
    params.height = params.width = image_size;
    params.size = cfg.size;
    params.noise = cfg.noise;
    params.jitter = cfg.jitter;
    params.max_view_angle_deg = cfg.max_view_angle_deg;

    std::vector<ManifestEntry> entries;
    auto name = [](const std::string& kind, const char* tag, std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%03zu", tag, i);
        return kind + "_" + buf;
    };
    std::uint64_t stream = 0;
    auto next_seed = [&] { return derive_seed(seed, stream++); };

    for (const auto& kind : cfg.train_kinds)
        for (std::size_t i = 0; i < cfg.train_count; ++i) {
            const auto path = out_dir / "train" / (name(kind, "", i) + ".opm");
            save_opm(synth_object(kind, params, next_seed()), path);
            entries.push_back({SampleRole::train, kind, path, std::nullopt});
        }
    for (const auto& kind : cfg.irrelevant_kinds)
        for (std::size_t i = 0; i < cfg.irrelevant_count; ++i) {
            const auto path = out_dir / "irrelevant" / (name(kind, "", i) + ".opm");
            save_opm(synth_object(kind, params, next_seed()), path);
            entries.push_back({SampleRole::task_irrelevant, kind, path, std::nullopt});
        }
    for (std::size_t i = 0; i < cfg.test_normal; ++i) {
        const auto path = out_dir / "test" / (name(cfg.test_kind, "good", i) + ".opm");
        save_opm(synth_object(cfg.test_kind, params, next_seed()), path);
        entries.push_back({SampleRole::test_normal, cfg.test_kind, path, std::nullopt});
    }
    AnomalyParams ap;
    ap.radius_px = cfg.anomaly_radius_px;
    ap.min_foreground_fraction = cfg.min_anomaly_fraction;
    ap.amplitude = cfg.amplitude;
    for (std::size_t i = 0; i < cfg.test_anomalous; ++i) {
        const auto kind = parse_anomaly_kind(cfg.anomaly_kinds[i % cfg.anomaly_kinds.size()]);
        const auto stem = name(cfg.test_kind, to_string(kind).c_str(), i);
        const auto base = synth_object(cfg.test_kind, params, next_seed());
        const auto sample = inject_anomaly(base, kind, ap, next_seed());
        const auto path = out_dir / "test" / (stem + ".opm");
        const auto gt = out_dir / "test" / (stem + ".msk");
        save_opm(sample.map, path);
        save_msk(sample.mask, gt);
        entries.push_back({SampleRole::test_anomalous, cfg.test_kind, path, gt});
    }
    DatasetManifest manifest(std::move(entries), seed);
    manifest.save(out_dir / "manifest.json");
    return manifest;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

DatasetManifest mvtec_manifest(const fs::path& root, const ExperimentConfig& cfg, const fs::path& manifest_path) {
    std::vector<ManifestEntry> entries;
    auto add_train = [&](const std::string& cls, SampleRole role) {
        const auto files = sorted_files(root / cls / "train" / "good" / "xyz", ".tiff");
        if (files.empty()) throw IoError("no training scans under " + (root / cls / "train" / "good" / "xyz").string());
        for (const auto& f : files) entries.push_back({role, cls, fs::absolute(f), std::nullopt});
    };
    for (const auto& c : cfg.train_classes) add_train(c, SampleRole::train);
    for (const auto& c : cfg.irrelevant_classes) add_train(c, SampleRole::task_irrelevant);
    const fs::path test = root / cfg.test_class / "test";
    if (!fs::is_directory(test)) throw IoError("missing test split " + test.string());
    std::vector<fs::path> defects;
    for (const auto& e : fs::directory_iterator(test))
        if (e.is_directory()) defects.push_back(e.path());
    std::sort(defects.begin(), defects.end());
    for (const auto& d : defects) {
        const bool good = d.filename() == "good";
        for (const auto& f : sorted_files(d / "xyz", ".tiff")) {
            auto gt = d / "gt" / f.filename().replace_extension(".png");
            std::optional<fs::path> g;
            if (fs::exists(gt)) g = fs::absolute(gt);
            else if (!good) throw IoError("missing ground truth " + gt.string());
            entries.push_back({good ? SampleRole::test_normal : SampleRole::test_anomalous, cfg.test_class,
                               fs::absolute(f), g});
        }
    }
    DatasetManifest manifest(std::move(entries), cfg.data_seed());
    fs::create_directories(manifest_path.parent_path());
    manifest.save(manifest_path);
    return manifest;
}

// --- data loading ------------------------------------------------------------

OrderedPointMap resize_map_nearest(const OrderedPointMap& map, std::size_t height, std::size_t width) {
    if (map.height() == height && map.width() == width) return map;
    std::vector<Point> pts(height * width);
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c)
            pts[r * width + c] = map.at(r * map.height() / height, c * map.width() / width);
    return OrderedPointMap(height, width, std::move(pts));
}

GroundTruthMask resize_mask_nearest(const GroundTruthMask& mask, std::size_t height, std::size_t width) {
    if (mask.height() == height && mask.width() == width) return mask;
    GroundTruthMask out(height, width);
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) out(r, c) = mask(r * mask.height() / height, c * mask.width() / width);
    return out;
}

namespace {

OrderedPointMap load_any_map(const fs::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".tif" || ext == ".tiff") return load_map(p, MapFormat::tiff_xyz);
    return load_map(p, MapFormat::opm);
}

GroundTruthMask load_any_mask(const fs::path& p) {
    if (p.extension() == ".png") return load_png_mask(p);
    return load_msk(p);
}

std::string sample_id(const fs::path& sample, const fs::path& base) {
    fs::path rel;
    for (const auto& part : fs::relative(sample, base))
        if (part != ".." || !rel.empty()) rel /= part;
    rel.replace_extension();
    std::string id = rel.generic_string();
    std::replace(id.begin(), id.end(), '/', '_');
    return id;
}

bool contains(const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); }

}  // namespace

ExperimentData load_experiment_data(const DatasetManifest& manifest, const fs::path& manifest_path,
                                    const ExperimentConfig& cfg) {
    cfg.validate();
    const auto base = manifest_path.parent_path();
    const std::size_t n = cfg.image_size;
    auto rgb_for = [&](const std::string& id) -> std::optional<FeatureMatrix> {
        if (cfg.rgb_dir.empty()) return std::nullopt;
        return load_rgb_features(fs::path(cfg.rgb_dir) / (id + ".zalr"));
    };
    ExperimentData d;
    for (const auto& e : manifest.entries()) {
        const std::string id = sample_id(e.sample_path, base);
        switch (e.role) {
            case SampleRole::train:
                if (!contains(cfg.train_classes, e.class_label)) break;
                d.train.push_back({e.class_label, resize_map_nearest(load_any_map(e.sample_path), n, n)});
                d.train_ids.push_back(id);
                d.train_rgb.push_back(rgb_for(id));
                break;
            case SampleRole::task_irrelevant:
                if (e.class_label == cfg.test_class) throw ConfigError("task-irrelevant class equals the test class");
                if (!cfg.irrelevant_classes.empty() && !contains(cfg.irrelevant_classes, e.class_label)) break;
                d.irrelevant.push_back({e.class_label, resize_map_nearest(load_any_map(e.sample_path), n, n)});
                break;
            case SampleRole::test_normal:
            case SampleRole::test_anomalous: {
                if (e.class_label != cfg.test_class) break;
                TestSample s;
                s.id = id;
                s.class_label = e.class_label;
                s.label = e.role == SampleRole::test_anomalous;
                s.map = resize_map_nearest(load_any_map(e.sample_path), n, n);
                if (e.gt_path) s.mask = resize_mask_nearest(load_any_mask(*e.gt_path), n, n);
                else if (s.label) throw ArgumentError("anomalous sample without ground truth: " + id);
                else s.mask = GroundTruthMask(n, n, 0);
                s.rgb = rgb_for(id);
                d.test.push_back(std::move(s));
                break;
            }
        }
    }
    if (d.train.empty()) throw ConfigError("manifest has no samples of the training classes");
    return d;
}

// --- stages ------------------------------------------------------------------

FeatureLayout feature_layout(const ExperimentConfig& cfg, std::size_t rgb_width) {
    FeatureLayout l;
    l.rgb_width = rgb_width;
    l.learned_width = 32;
    l.normalize_learned = cfg.normalize_learned;
    return l;
}

MapFeatures extract_features(const OrderedPointMap& map, const PointNet& encoder, const ExperimentConfig& cfg,
                             const std::optional<FeatureMatrix>& rgb) {
    const PatchGrid grid = partition(map, cfg.patch_size);
    const std::size_t n = grid.patches.size();
    if (rgb && rgb->rows() != n)
        throw ArgumentError("rgb sidecar has " + std::to_string(rgb->rows()) + " rows, expected " + std::to_string(n));
    MapFeatures out;
    out.fpfh = map_patch_fpfh(map, cfg.patch_size, cfg.fpfh_k);
    out.patches.resize(n);
    out.foreground.resize(n);
    std::vector<Eigen::VectorXd> learned(n);
    parallel_for(n, [&](std::size_t i) {
        const auto& pts = grid.patches[i].points;
        const auto fg = std::count_if(pts.begin(), pts.end(), [](const Point& p) { return !is_sentinel(p); });
        out.foreground[i] = static_cast<double>(fg) / static_cast<double>(pts.size());
        out.patches[i] = prepare_patch(grid.patches[i].points, cfg.train.center_patches);
        learned[i] = encode(encoder, out.patches[i]);
    });
    const FeatureLayout layout = feature_layout(cfg, rgb ? rgb->width() : 0);
    out.features = FeatureMatrix(layout.total());
    for (std::size_t i = 0; i < n; ++i)
        out.features.append(combine(out.fpfh[i], learned[i], rgb ? rgb->row(i) : std::span<const float>{}, layout));
    return out;
}

TrainingSet make_training_set(const ExperimentData& data, const ExperimentConfig& cfg) {
    const RandNetParams net = init_randnet(cfg.randnet_seed(), cfg.randnet_width);
    SynthesisConfig sc = cfg.synthesis;
    sc.seed = cfg.synthesis_seed();
    sc.randnet = cfg.randnet;
    return build_training_set(data.train, data.irrelevant, cfg.test_class, net, cfg.patch_size, sc);
}

TrainStageResult run_train(const ExperimentData& data, const ExperimentConfig& cfg) {
    const TrainingSet set = make_training_set(data, cfg);
    std::vector<std::vector<FpfhDescriptor>> per_map(data.train.size());
    std::vector<char> needed(data.train.size(), 0);
    for (const auto& p : set.positives) needed[p.provenance.normal_sample] = 1;
    for (std::size_t m = 0; m < data.train.size(); ++m)
        if (needed[m]) per_map[m] = map_patch_fpfh(data.train[m].map, cfg.patch_size, cfg.fpfh_k);
    std::vector<FpfhDescriptor> fpfh;
    for (const auto& p : set.positives) fpfh.push_back(per_map[p.provenance.normal_sample][*p.provenance.patch_index]);

    TrainConfig tc = cfg.train;
    tc.seed = cfg.train_seed();
    tc.classifier = tc.encoder;
    tc.train_classifier = cfg.use_classifier;
    TrainStageResult out{train(set, fpfh, tc), set.positives.size(), 0, 0};
    for (const auto& n : set.negatives) (n.kind == PseudoKind::adding ? out.adding : out.removing)++;
    return out;
}

MemoryBank run_bank(const ExperimentData& data, const PointNet& encoder, const ExperimentConfig& cfg) {
    const std::size_t rgb_width = !data.train_rgb.empty() && data.train_rgb[0] ? data.train_rgb[0]->width() : 0;
    FeatureMatrix all(feature_layout(cfg, rgb_width).total());
    std::vector<RowProvenance> prov;
    for (std::size_t m = 0; m < data.train.size(); ++m) {
        const auto f = extract_features(data.train[m].map, encoder, cfg, data.train_rgb[m]);
        for (std::size_t i = 0; i < f.features.rows(); ++i) {
            all.append(f.features.row(i));
            prov.push_back({static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(i)});
        }
    }
    return build_bank(all, prov, feature_layout(cfg, rgb_width), cfg.coreset_ratio, cfg.coreset_seed());
}

namespace {

RealGrid round_to_float(RealGrid g) {
    for (auto& v : g.values()) v = static_cast<float>(v);
    return g;
}

}  // namespace

std::vector<SampleResult> run_score(const ExperimentData& data, const PointNet& encoder, const PointNet* classifier,
                                    const MemoryBank& bank, const ExperimentConfig& cfg) {
    const bool use_cls = cfg.use_classifier && classifier;
    const PatchLayout layout = PatchLayout::for_map(cfg.image_size, cfg.image_size, cfg.patch_size);
    const std::size_t n = cfg.image_size;
    std::vector<SampleResult> results;
    BranchScores branches;
    for (const auto& s : data.test) {
        const auto f = extract_features(s.map, encoder, cfg, s.rgb);
        SampleResult r;
        r.id = s.id;
        r.class_label = s.class_label;
        r.label = s.label;
        r.mask = s.mask;
        const auto hits = nearest_rows(f.features, bank);
        const auto top = max_distance(hits);
        r.s_dist = dist_score(f.features, bank, top, cfg.score);
        std::vector<double> d(hits.size());
        for (std::size_t i = 0; i < hits.size(); ++i) d[i] = hits[i].distance;
        r.dist_map = round_to_float(patch_score_map(d, layout, n, n, cfg.score.blur_sigma));
        if (use_cls) {
            const double eta = cfg.use_perturbation ? cfg.score.eta : 0.0;
            std::vector<double> probs(f.patches.size());
            parallel_for(f.patches.size(), [&](std::size_t i) {
                probs[i] = classify(*classifier, perturb(*classifier, f.patches[i], eta, i));
            });
            r.s_cls = cls_score(probs);
            r.cls_map = round_to_float(cls_score_map(probs, layout, n, n, cfg.score));
            branches.cls.push_back(*r.s_cls);
            branches.cls_maps.push_back(r.cls_map);
        }
        branches.dist.push_back(r.s_dist);
        branches.dist_maps.push_back(r.dist_map);
        results.push_back(std::move(r));
    }
    ScoreConfig sc = cfg.score;
    if (!use_cls) sc.w_c = 0.0;
    const auto fused = fuse_test_set(branches, sc);
    for (std::size_t i = 0; i < results.size(); ++i) {
        results[i].s = fused.scores[i];
        results[i].fused_map = round_to_float(fused.maps[i]);
    }
    return results;
}

EvalResult run_eval(const std::vector<SampleResult>& results, const ExperimentConfig& cfg) {
    std::vector<EvalSample> samples;
    for (const auto& r : results) samples.push_back({r.class_label, r.s, r.label, r.fused_map, r.mask});
    return evaluate(samples, cfg.fpr_limit);
}

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_score_outputs(const fs::path& dir, const std::vector<SampleResult>& results, bool heatmaps) {
    fs::create_directories(dir / "maps");
    std::ofstream csv(dir / "scores.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write " + (dir / "scores.csv").string());
    csv << "sample_id,S_dist,S_cls,S,label\n";
    double lo = 0, hi = 0;
    if (heatmaps && !results.empty()) {
        lo = hi = results[0].fused_map[0];
        for (const auto& r : results)
            for (double v : r.fused_map.values()) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    for (const auto& r : results) {
        csv << r.id << ',' << fmt17(r.s_dist) << ',' << (r.s_cls ? fmt17(*r.s_cls) : "") << ',' << fmt17(r.s) << ','
            << r.label << '\n';
        save_score_map(r.dist_map, dir / "maps" / (r.id + "_dist.zalm"));
        if (r.cls_map.size()) save_score_map(r.cls_map, dir / "maps" / (r.id + "_cls.zalm"));
        save_score_map(r.fused_map, dir / "maps" / (r.id + "_fused.zalm"));
        if (heatmaps) save_heatmap_pgm(r.fused_map, lo, hi, dir / "maps" / (r.id + "_fused.pgm"));
    }
    if (!csv) throw IoError("write failed: " + (dir / "scores.csv").string());
}

std::vector<SampleResult> read_score_outputs(const fs::path& dir, const ExperimentData& data) {
    std::ifstream csv(dir / "scores.csv");
    if (!csv) throw IoError("cannot open " + (dir / "scores.csv").string());
    std::map<std::string, const TestSample*> by_id;
    for (const auto& s : data.test) by_id[s.id] = &s;
    std::string line;
    std::getline(csv, line);
    if (trim(line) != "sample_id,S_dist,S_cls,S,label") throw FormatError("scores.csv: unexpected header");
    std::vector<SampleResult> out;
    std::set<std::string> seen;
    while (std::getline(csv, line)) {
        if (trim(line).empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (cols.size() == 4) cols.push_back("");
        if (cols.size() != 5) throw FormatError("scores.csv: expected 5 columns: " + line);
        const auto it = by_id.find(cols[0]);
        if (it == by_id.end()) throw ArgumentError("scores.csv: sample '" + cols[0] + "' is not a test sample of the manifest");
        if (!seen.insert(cols[0]).second) throw FormatError("scores.csv: duplicate sample " + cols[0]);
        SampleResult r;
        r.id = cols[0];
        r.class_label = it->second->class_label;
        r.s_dist = parse_double("S_dist", cols[1]);
        if (!trim(cols[2]).empty()) r.s_cls = parse_double("S_cls", cols[2]);
        r.s = parse_double("S", cols[3]);
        r.label = it->second->label;
        if (static_cast<int>(parse_uint("label", cols[4])) != r.label)
            throw ArgumentError("scores.csv: label of " + r.id + " disagrees with the manifest");
        r.mask = it->second->mask;
        r.fused_map = load_score_map(dir / "maps" / (r.id + "_fused.zalm"));
        if (r.fused_map.height() != r.mask.height() || r.fused_map.width() != r.mask.width())
            throw ArgumentError("score map of " + r.id + " does not match its ground truth size");
        out.push_back(std::move(r));
    }
    return out;
}

nlohmann::ordered_json metrics_json(const EvalResult& result, const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["image_auroc"] = result.image_auroc;
    j["pixel_aupro"] = result.pixel_aupro;
    j["fpr_limit"] = result.fpr_limit;
    auto pc = nlohmann::ordered_json::object();
    for (const auto& [name, m] : result.per_class) {
        auto& e = pc[name];
        e["samples"] = m.samples;
        e["image_auroc"] = m.image_auroc ? nlohmann::ordered_json(*m.image_auroc) : nlohmann::ordered_json(nullptr);
        e["pixel_aupro"] = m.pixel_aupro ? nlohmann::ordered_json(*m.pixel_aupro) : nlohmann::ordered_json(nullptr);
    }
    j["per_class"] = std::move(pc);
    j["config"] = cfg.to_json();
    return j;
}

void write_metrics(const fs::path& dir, const EvalResult& result, const ExperimentConfig& cfg) {
    fs::create_directories(dir);
    std::ofstream f(dir / "metrics.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "metrics.json").string());
    f << metrics_json(result, cfg).dump(2) << '\n';
    save_curve_csv(thin_curve(result.curve), dir / "curve.csv");
}

ZeroShotResult run_zeroshot(const DatasetManifest& manifest, const fs::path& manifest_path, const ExperimentConfig& cfg,
                            const std::optional<fs::path>& out_dir) {
    cfg.validate();
    set_thread_count(cfg.threads);
    const ExperimentData data = load_experiment_data(manifest, manifest_path, cfg);
    if (out_dir) {
        fs::create_directories(*out_dir);
        std::ofstream(*out_dir / "config.ini") << cfg.to_ini();
    }
    const TrainStageResult trained = run_train(data, cfg);
    const MemoryBank bank = run_bank(data, trained.models.encoder, cfg);
    const auto results = run_score(data, trained.models.encoder, cfg.use_classifier ? &trained.models.classifier : nullptr,
                                   bank, cfg);
    ZeroShotResult out{run_eval(results, cfg), results, trained.models.log};
    if (out_dir) {
        save_checkpoint(*out_dir / "checkpoint.zalw", trained.models.encoder, trained.models.classifier);
        save_loss_log(*out_dir / "loss_log.csv", trained.models.log);
        save_bank(bank, *out_dir / "bank.zalb");
        write_score_outputs(*out_dir, results, false);
        write_metrics(*out_dir, out.metrics, cfg);
    }
    return out;
}

void preview_pseudo(const ExperimentData& data, const ExperimentConfig& cfg, std::size_t count, const fs::path& out_dir) {
    ExperimentConfig c = cfg;
    const TrainingSet set = make_training_set(data, c);
    fs::create_directories(out_dir);
    const std::size_t side = cfg.patch_size;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    const std::size_t k = set.negatives_per_positive;
    for (std::size_t i = 0; i < std::min(count, set.positives.size()); ++i) {
        auto emit = [&](const PseudoPatch& p, const std::string& name) {
            save_opm(OrderedPointMap(side, side, p.points), out_dir / (name + ".opm"));
            nlohmann::ordered_json e;
            e["file"] = name + ".opm";
            e["label"] = p.label;
            e["kind"] = to_string(p.kind);
            e["normal_sample"] = data.train_ids[p.provenance.normal_sample];
            e["irrelevant_sample"] = p.provenance.irrelevant_sample ? nlohmann::ordered_json(*p.provenance.irrelevant_sample)
                                                                    : nlohmann::ordered_json(nullptr);
            e["anchor_pixel"] = p.provenance.anchor_pixel;
            e["patch_index"] = p.provenance.patch_index ? nlohmann::ordered_json(*p.provenance.patch_index)
                                                        : nlohmann::ordered_json(nullptr);
            e["seed"] = p.provenance.seed;
            j.push_back(std::move(e));
        };
        char buf[32];
        std::snprintf(buf, sizeof buf, "pos%03zu", i);
        emit(set.positives[i], buf);
        for (std::size_t n = 0; n < k; ++n) {
            std::snprintf(buf, sizeof buf, "pos%03zu_neg%02zu", i, n);
            emit(set.negatives[i * k + n], buf);
        }
    }
    std::ofstream(out_dir / "preview.json") << j.dump(2) << '\n';
}

}  // namespace zal3d
