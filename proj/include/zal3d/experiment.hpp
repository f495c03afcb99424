#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zal3d/bank.hpp"
#include "zal3d/data.hpp"
#include "zal3d/metrics.hpp"
#include "zal3d/pseudo.hpp"
#include "zal3d/randnet.hpp"
#include "zal3d/scoring.hpp"
#include "zal3d/train.hpp"

namespace zal3d {

/// Synthetic benchmark layout written by `synth`.
struct SynthDatasetConfig {
    std::vector<std::string> train_kinds{"wavy-plane"};
    std::size_t train_count = 20;  // per train kind
    std::string test_kind = "sphere";
    std::size_t test_normal = 10;
    std::size_t test_anomalous = 10;
    std::vector<std::string> irrelevant_kinds{"cylinder"};
    std::size_t irrelevant_count = 20;  // per irrelevant kind
    std::vector<std::string> anomaly_kinds{"bump", "dent", "hole"};
    double anomaly_radius_px = 12.0;
    double min_anomaly_fraction = 0.01;
    double amplitude = 0.06;
    double size = 0.6;
    double noise = 0.0;
    double jitter = 0.15;
    double max_view_angle_deg = 60.0;

    /// Throws ValidationError on unknown kinds or class names shared between roles.
    void validate() const;
};

struct ExperimentConfig {
    std::vector<std::string> train_classes{"wavy-plane"};
    std::string test_class = "sphere";
    std::vector<std::string> irrelevant_classes{"cylinder"};  // empty: every task-irrelevant class in the manifest
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    double randnet_width = 0.25;
    RandNetOptions randnet;
    SynthesisConfig synthesis;

    std::size_t image_size = 224;
    std::size_t patch_size = 8;
    std::size_t fpfh_k = 16;
    bool normalize_learned = true;
    std::string rgb_dir;  // optional ZALR sidecars named <sample id>.zalr

    TrainConfig train;
    double coreset_ratio = 0.1;

    ScoreConfig score;
    bool use_classifier = true;    // false: distance branch only
    bool use_perturbation = true;  // false: classifier sees the unperturbed patch

    double fpr_limit = 0.3;

    SynthDatasetConfig synth;

    /// Zero-shot constraint and per-module ranges; throws ConfigError.
    void validate() const;

    /// key = value lines under [section] headers; unknown keys throw ConfigError.
    static ExperimentConfig parse_ini(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);
    /// Every knob, including defaults.
    std::string to_ini() const;
    nlohmann::ordered_json to_json() const;
    /// "section.key=value".
    void set(const std::string& assignment);

    std::uint64_t randnet_seed() const;
    std::uint64_t synthesis_seed() const;
    std::uint64_t train_seed() const;
    std::uint64_t coreset_seed() const;
    std::uint64_t data_seed() const;

    /// Applies ZAL3D_SEED when set; throws ConfigError on a malformed value.
    void apply_seed_env();
};

DatasetManifest synthesize_dataset(const SynthDatasetConfig& cfg, std::size_t image_size, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

/// Manifest over an MVTec 3D-AD style tree (<class>/{train,test}/<defect>/{xyz,gt}).
/// Train classes and task-irrelevant classes contribute train/good, the test
/// class its test split. Written to `manifest_path`.
DatasetManifest mvtec_manifest(const std::filesystem::path& root, const ExperimentConfig& cfg,
                               const std::filesystem::path& manifest_path);

struct TestSample {
    std::string id;
    std::string class_label;
    int label = 0;
    OrderedPointMap map;
    GroundTruthMask mask;
    std::optional<FeatureMatrix> rgb;
};

struct ExperimentData {
    std::vector<LabeledMap> train, irrelevant;
    std::vector<std::string> train_ids;
    std::vector<std::optional<FeatureMatrix>> train_rgb;
    std::vector<TestSample> test;
};

/// Nearest-neighbour resampling; keeps sentinels intact.
OrderedPointMap resize_map_nearest(const OrderedPointMap& map, std::size_t height, std::size_t width);
GroundTruthMask resize_mask_nearest(const GroundTruthMask& mask, std::size_t height, std::size_t width);

/// Loads the samples named by the config's classes, resized to image_size.
ExperimentData load_experiment_data(const DatasetManifest& manifest, const std::filesystem::path& manifest_path,
                                    const ExperimentConfig& cfg);

struct MapFeatures {
    FeatureMatrix features;              // one combined row per patch
    std::vector<PatchPoints> patches;    // prepared patches
    std::vector<FpfhDescriptor> fpfh;
    std::vector<double> foreground;      // fraction of non-sentinel cells per patch
};

MapFeatures extract_features(const OrderedPointMap& map, const PointNet& encoder, const ExperimentConfig& cfg,
                             const std::optional<FeatureMatrix>& rgb);
FeatureLayout feature_layout(const ExperimentConfig& cfg, std::size_t rgb_width);

struct TrainStageResult {
    TrainedModels models;
    std::size_t positives = 0, adding = 0, removing = 0;
};

TrainingSet make_training_set(const ExperimentData& data, const ExperimentConfig& cfg);
TrainStageResult run_train(const ExperimentData& data, const ExperimentConfig& cfg);
MemoryBank run_bank(const ExperimentData& data, const PointNet& encoder, const ExperimentConfig& cfg);

struct SampleResult {
    std::string id;
    std::string class_label;
    int label = 0;
    double s_dist = 0.0;
    std::optional<double> s_cls;
    double s = 0.0;
    RealGrid dist_map, cls_map, fused_map;  // cls_map empty without the classifier
    GroundTruthMask mask;
};

/// Both branches per sample, then test-set fusion. Maps are rounded to float
/// precision, matching what the score files store.
std::vector<SampleResult> run_score(const ExperimentData& data, const PointNet& encoder, const PointNet* classifier,
                                    const MemoryBank& bank, const ExperimentConfig& cfg);

EvalResult run_eval(const std::vector<SampleResult>& results, const ExperimentConfig& cfg);

/// maps/<id>_{dist,cls,fused}.zalm, optional heatmaps, scores.csv.
void write_score_outputs(const std::filesystem::path& dir, const std::vector<SampleResult>& results, bool heatmaps);
/// Reads scores.csv and fused maps; labels and masks come from the manifest.
std::vector<SampleResult> read_score_outputs(const std::filesystem::path& dir, const ExperimentData& data);

nlohmann::ordered_json metrics_json(const EvalResult& result, const ExperimentConfig& cfg);
void write_metrics(const std::filesystem::path& dir, const EvalResult& result, const ExperimentConfig& cfg);

struct ZeroShotResult {
    EvalResult metrics;
    std::vector<SampleResult> samples;
    std::vector<LossLogRow> loss_log;
};

/// train -> bank -> score -> eval. Artifacts go to out_dir when given.
ZeroShotResult run_zeroshot(const DatasetManifest& manifest, const std::filesystem::path& manifest_path,
                            const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir);

/// Writes the negatives of the first `count` positives as 8 x 8 OPM snippets
/// plus preview.json with provenance.
void preview_pseudo(const ExperimentData& data, const ExperimentConfig& cfg, std::size_t count,
                    const std::filesystem::path& out_dir);

}  // namespace zal3d
