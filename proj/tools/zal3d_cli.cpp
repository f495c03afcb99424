// Command-line front end: synth | pseudo-preview | train | bank | score | eval | zeroshot.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "zal3d/experiment.hpp"
#include "zal3d/parallel.hpp"

namespace fs = std::filesystem;
using namespace zal3d;

namespace {

enum Exit : int { ok = 0, internal = 1, config = 2, data = 3, training = 4, banking = 5, scoring = 6, evaluation = 7 };

struct StageFailure {
    int code;
    std::string stage, message;
};

// Runs fn; errors leave tagged with the stage's exit code.
template <typename Fn>
auto stage(const char* name, int code, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw StageFailure{Exit::config, name, e.what()};
    } catch (const std::exception& e) {
        throw StageFailure{code, name, e.what()};
    }
}

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::size_t threads = 0;
    bool no_contrastive = false, no_rd = false, distance_only = false, no_perturb = false;

    void add(CLI::App* cmd, bool ablation) {
        cmd->add_option("-c,--config", config_path, "INI config file");
        cmd->add_option("--set", overrides, "section.key=value override (repeatable)");
        cmd->add_option("--threads", threads, "worker threads; 1 is bitwise deterministic");
        if (!ablation) return;
        cmd->add_flag("--no-contrastive", no_contrastive, "drop the contrastive loss");
        cmd->add_flag("--no-rd", no_rd, "drop the FPFH-alignment loss");
        cmd->add_flag("--distance-only", distance_only, "skip the classifier branch");
        cmd->add_flag("--no-perturb", no_perturb, "classifier sees unperturbed patches");
    }

    ExperimentConfig resolve() const {
        return stage("config", Exit::config, [&] {
            ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
            for (const auto& o : overrides) c.set(o);
            c.apply_seed_env();
            if (threads) c.threads = threads;
            if (no_contrastive) c.set("train.w_con=0");
            if (no_rd) c.set("train.w_rd=0");
            if (distance_only) c.use_classifier = false;
            if (no_perturb) c.use_perturbation = false;
            c.validate();
            set_thread_count(c.threads);
            return c;
        });
    }
};

ExperimentData load_data(const std::string& manifest, const ExperimentConfig& cfg) {
    return stage("data", Exit::data, [&] { return load_experiment_data(DatasetManifest::load(manifest), manifest, cfg); });
}

void echo_config(const fs::path& dir, const ExperimentConfig& cfg) {
    fs::create_directories(dir);
    std::ofstream f(dir / "config.ini", std::ios::trunc);
    f << cfg.to_ini();
    if (!f) throw IoError("cannot write " + (dir / "config.ini").string());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Zero-shot 3D anomaly detection on ordered point maps"};
    app.require_subcommand(1);

    Common common;
    std::string manifest, out, checkpoint, bank_path, scores_dir;
    std::size_t count = 4;
    bool heatmaps = false;

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset and its manifest");
    common.add(synth, false);
    synth->add_option("-o,--out", out, "dataset directory")->required();

    auto* preview = app.add_subcommand("pseudo-preview", "dump pseudo-anomaly patches with provenance");
    common.add(preview, false);
    preview->add_option("-m,--manifest", manifest)->required();
    preview->add_option("-o,--out", out)->required();
    preview->add_option("-n,--count", count, "positives to preview");

    auto* train_cmd = app.add_subcommand("train", "train the encoder and classifier");
    common.add(train_cmd, true);
    train_cmd->add_option("-m,--manifest", manifest)->required();
    train_cmd->add_option("-o,--out", out)->required();

    auto* bank_cmd = app.add_subcommand("bank", "build the coreset memory bank");
    common.add(bank_cmd, false);
    bank_cmd->add_option("-m,--manifest", manifest)->required();
    bank_cmd->add_option("--checkpoint", checkpoint)->required();
    bank_cmd->add_option("-o,--out", out)->required();

    auto* score_cmd = app.add_subcommand("score", "score the test samples");
    common.add(score_cmd, true);
    score_cmd->add_option("-m,--manifest", manifest)->required();
    score_cmd->add_option("--checkpoint", checkpoint)->required();
    score_cmd->add_option("--bank", bank_path)->required();
    score_cmd->add_option("-o,--out", out)->required();
    score_cmd->add_flag("--heatmaps", heatmaps, "also write PGM heatmaps");

    auto* eval_cmd = app.add_subcommand("eval", "image AUROC and pixel AUPRO from score files");
    common.add(eval_cmd, false);
    eval_cmd->add_option("-m,--manifest", manifest)->required();
    eval_cmd->add_option("--scores", scores_dir, "directory holding scores.csv and maps/")->required();
    eval_cmd->add_option("-o,--out", out)->required();

    auto* zeroshot = app.add_subcommand("zeroshot", "train, bank, score and evaluate in one run");
    common.add(zeroshot, true);
    std::string mvtec_root;
    auto* zs_manifest = zeroshot->add_option("-m,--manifest", manifest);
    zeroshot->add_option("--mvtec", mvtec_root, "MVTec 3D-AD root; writes <out>/manifest.json")->excludes(zs_manifest);
    zeroshot->add_option("-o,--out", out)->required();
    zeroshot->add_flag("--heatmaps", heatmaps, "also write PGM heatmaps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : Exit::config;
    }

    try {
        const ExperimentConfig cfg = common.resolve();
        const fs::path dir(out);

        if (synth->parsed()) {
            stage("synth", Exit::data, [&] {
                synthesize_dataset(cfg.synth, cfg.image_size, cfg.data_seed(), dir);
                echo_config(dir, cfg);
            });
            std::cout << "wrote " << (dir / "manifest.json").string() << "\n";
        } else if (preview->parsed()) {
            const auto d = load_data(manifest, cfg);
            stage("pseudo-preview", Exit::data, [&] {
                preview_pseudo(d, cfg, count, dir);
                echo_config(dir, cfg);
            });
        } else if (train_cmd->parsed()) {
            const auto d = load_data(manifest, cfg);
            const auto r = stage("train", Exit::training, [&] { return run_train(d, cfg); });
            stage("train", Exit::training, [&] {
                echo_config(dir, cfg);
                save_checkpoint(dir / "checkpoint.zalw", r.models.encoder, r.models.classifier);
                save_loss_log(dir / "loss_log.csv", r.models.log);
            });
            std::cout << "positives " << r.positives << ", adding " << r.adding << ", removing " << r.removing << "\n";
        } else if (bank_cmd->parsed()) {
            const auto d = load_data(manifest, cfg);
            stage("bank", Exit::banking, [&] {
                const auto models = load_checkpoint(checkpoint);
                const auto b = run_bank(d, models.first, cfg);
                echo_config(dir, cfg);
                save_bank(b, dir / "bank.zalb");
                std::cout << "bank rows " << b.features.rows() << "\n";
            });
        } else if (score_cmd->parsed()) {
            const auto d = load_data(manifest, cfg);
            stage("score", Exit::scoring, [&] {
                const auto models = load_checkpoint(checkpoint);
                const auto b = load_bank(bank_path);
                const auto results = run_score(d, models.first, &models.second, b, cfg);
                echo_config(dir, cfg);
                write_score_outputs(dir, results, heatmaps);
            });
        } else if (eval_cmd->parsed()) {
            const auto d = load_data(manifest, cfg);
            const auto results = stage("eval", Exit::evaluation, [&] { return read_score_outputs(scores_dir, d); });
            stage("eval", Exit::evaluation, [&] {
                const auto m = run_eval(results, cfg);
                write_metrics(dir, m, cfg);
                std::printf("image AUROC %.4f  pixel AUPRO %.4f\n", m.image_auroc, m.pixel_aupro);
            });
        } else if (zeroshot->parsed()) {
            const auto t0 = std::chrono::steady_clock::now();
            if (!mvtec_root.empty()) {
                manifest = (dir / "manifest.json").string();
                stage("data", Exit::data, [&] { mvtec_manifest(mvtec_root, cfg, manifest); });
            } else if (manifest.empty()) {
                std::cerr << "error [config]: zeroshot needs --manifest or --mvtec\n";
                return Exit::config;
            }
            const auto d = load_data(manifest, cfg);
            echo_config(dir, cfg);
            const auto trained = stage("train", Exit::training, [&] { return run_train(d, cfg); });
            const auto t_train = seconds_since(t0);
            const auto b = stage("bank", Exit::banking, [&] { return run_bank(d, trained.models.encoder, cfg); });
            const auto t_bank = seconds_since(t0);
            const auto results = stage("score", Exit::scoring, [&] {
                return run_score(d, trained.models.encoder, cfg.use_classifier ? &trained.models.classifier : nullptr, b,
                                 cfg);
            });
            const auto t_score = seconds_since(t0);
            stage("score", Exit::scoring, [&] {
                save_checkpoint(dir / "checkpoint.zalw", trained.models.encoder, trained.models.classifier);
                save_loss_log(dir / "loss_log.csv", trained.models.log);
                save_bank(b, dir / "bank.zalb");
                write_score_outputs(dir, results, heatmaps);
            });
            stage("eval", Exit::evaluation, [&] {
                const auto m = run_eval(results, cfg);
                write_metrics(dir, m, cfg);
                nlohmann::ordered_json t;
                t["train_s"] = t_train;
                t["bank_s"] = t_bank - t_train;
                t["score_s"] = t_score - t_bank;
                t["total_s"] = seconds_since(t0);
                std::ofstream(dir / "timings.json") << t.dump(2) << "\n";
                std::printf("image AUROC %.4f  pixel AUPRO %.4f\n", m.image_auroc, m.pixel_aupro);
            });
        }
    } catch (const StageFailure& f) {
        std::cerr << "error [" << f.stage << "]: " << f.message << "\n";
        return f.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::internal;
    }
    return Exit::ok;
}
