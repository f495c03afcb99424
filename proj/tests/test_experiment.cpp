#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"
#include "zal3d/experiment.hpp"

using namespace zal3d;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> tree_digest(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = test::read_bytes(e.path());
    return out;
}

std::size_t count_ext(const fs::path& root, const std::string& ext) {
    std::size_t n = 0;
    for (const auto& e : fs::recursive_directory_iterator(root)) n += e.path().extension() == ext;
    return n;
}

// Small, fast settings shared by the CLI tests.
const char* kSmallConfig = R"([experiment]
train_classes = box
test_class = sphere
irrelevant_classes = wavy-plane
seed = 3
[synthesis]
tau = 0.02
max_positives_per_map = 2
[features]
image_size = 64
[train]
epochs = 1
[synth]
train_kinds = box
train_count = 3
test_kind = sphere
test_normal = 2
test_anomalous = 2
irrelevant_kinds = wavy-plane
irrelevant_count = 2
anomaly_radius_px = 5
)";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(ZAL3D_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, IniRoundTrip) {
    ExperimentConfig c;
    c.set("experiment.train_classes=box, cylinder");
    c.set("score.eta=0.25");
    c.set("train.epochs=7");
    c.set("randnet.padding=zeros");
    c.set("score.classifier=false");
    const auto text = c.to_ini();
    const auto back = ExperimentConfig::parse_ini(text);
    EXPECT_EQ(back.to_ini(), text);
    EXPECT_EQ(back.train_classes, (std::vector<std::string>{"box", "cylinder"}));
    EXPECT_EQ(back.score.eta, 0.25);
    EXPECT_EQ(back.train.epochs, 7u);
    EXPECT_EQ(back.randnet.padding, PaddingMode::zeros);
    EXPECT_FALSE(back.use_classifier);
    EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
}

TEST(Config, DefaultsFollowTheMethod) {
    const ExperimentConfig c;
    EXPECT_EQ(c.synthesis.tau, 0.001);
    EXPECT_EQ(c.synthesis.surrounding, 16u);
    EXPECT_EQ(c.synthesis.negatives_per_positive, 16u);
    EXPECT_EQ(c.train.epochs, 5u);
    EXPECT_EQ(c.train.loss.temperature, 0.07);
    EXPECT_EQ(c.score.b, 3u);
    EXPECT_EQ(c.score.eta, 0.1);
    EXPECT_EQ(c.patch_size, 8u);
    EXPECT_EQ(c.coreset_ratio, 0.1);
    EXPECT_EQ(c.fpr_limit, 0.3);
}

TEST(Config, RejectsUnknownAndMalformed) {
    EXPECT_THROW(ExperimentConfig::parse_ini("[score]\nbogus = 1\n"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse_ini("[nowhere]\nseed = 1\n"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse_ini("[score]\neta = fast\n"), ConfigError);
    ExperimentConfig c;
    EXPECT_THROW(c.set("score.eta"), ConfigError);
    EXPECT_THROW(c.set("train.epochs=-1"), ConfigError);
}

TEST(Config, ZeroShotConstraintAtValidation) {
    ExperimentConfig c;
    EXPECT_NO_THROW(c.validate());
    c.irrelevant_classes = {"cylinder", "sphere"};
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.train_classes = {"sphere"};
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.train_classes = {"wavy-plane", "box"};  // multi-class training
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, SeedEnvironmentOverride) {
    ExperimentConfig c;
    const auto base = c.train_seed();
    ::setenv("ZAL3D_SEED", "42", 1);
    c.apply_seed_env();
    EXPECT_EQ(c.seed, 42u);
    EXPECT_NE(c.train_seed(), base);
    ::setenv("ZAL3D_SEED", "4x2", 1);
    EXPECT_THROW(c.apply_seed_env(), ConfigError);
    ::unsetenv("ZAL3D_SEED");
    ExperimentConfig d;
    d.apply_seed_env();
    EXPECT_EQ(d.seed, 0u);
    const std::set<std::uint64_t> seeds{d.randnet_seed(), d.synthesis_seed(), d.train_seed(), d.coreset_seed(),
                                        d.data_seed()};
    EXPECT_EQ(seeds.size(), 5u);
}

TEST(Synth, CountsAndLayout) {
    SynthDatasetConfig s;
    s.irrelevant_count = 3;
    test::TempDir dir("synth");
    const auto m = synthesize_dataset(s, 64, 1, dir.path());
    EXPECT_EQ(count_ext(dir / "train", ".opm") + count_ext(dir / "test", ".opm"), 40u);
    EXPECT_EQ(count_ext(dir.path(), ".msk"), 10u);
    EXPECT_EQ(count_ext(dir / "irrelevant", ".opm"), 3u);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_EQ(m.with_role(SampleRole::train).size(), 20u);
    EXPECT_EQ(m.with_role(SampleRole::test_normal).size(), 10u);
    EXPECT_EQ(m.with_role(SampleRole::test_anomalous).size(), 10u);
    for (const auto& e : m.with_role(SampleRole::test_anomalous)) {
        ASSERT_TRUE(e.gt_path.has_value());
        const auto mask = load_msk(dir.path() / *e.gt_path);
        std::size_t on = 0;
        for (auto v : mask.values()) on += v;
        EXPECT_GT(on, 0u);
    }
}

TEST(Synth, SameSeedSameDirectory) {
    SynthDatasetConfig s;
    s.train_count = 3;
    s.test_normal = s.test_anomalous = 2;
    s.irrelevant_count = 2;
    test::TempDir a("synth_a"), b("synth_b"), c("synth_c");
    synthesize_dataset(s, 64, 9, a.path());
    synthesize_dataset(s, 64, 9, b.path());
    synthesize_dataset(s, 64, 10, c.path());
    EXPECT_EQ(tree_digest(a.path()), tree_digest(b.path()));
    EXPECT_NE(tree_digest(a.path()), tree_digest(c.path()));
}

TEST(Synth, OverlappingRolesRejected) {
    SynthDatasetConfig s;
    s.irrelevant_kinds = {"sphere"};
    EXPECT_THROW(s.validate(), ValidationError);
    s = {};
    s.train_kinds = {"sphere"};
    EXPECT_THROW(s.validate(), ValidationError);
    s = {};
    s.anomaly_kinds = {"scratch"};
    EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Resize, NearestKeepsSentinels) {
    std::mt19937_64 rng(4);
    const auto m = test::random_map(32, 32, rng, 0.3);
    EXPECT_EQ(resize_map_nearest(m, 32, 32), m);
    const auto big = resize_map_nearest(m, 64, 64);
    for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(big.at(r, c), m.at(r / 2, c / 2));
    GroundTruthMask g(4, 4, 0);
    g(1, 2) = 1;
    const auto g2 = resize_mask_nearest(g, 8, 8);
    EXPECT_EQ(g2(2, 4), 1);
    EXPECT_EQ(g2(3, 5), 1);
    EXPECT_EQ(g2(4, 4), 0);
}

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new test::TempDir("cli");
        std::ofstream(*dir_ / "small.ini") << kSmallConfig;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static std::string at(const std::string& name) { return (dir_->path() / name).string(); }
    static std::string cfg() { return " -c " + at("small.ini") + " --threads 1"; }
    static test::TempDir* dir_;
};

test::TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, StagedPipelineAndExitCodes) {
    ASSERT_EQ(run_cli("synth" + cfg() + " -o " + at("data")), 0);
    const std::string m = " -m " + at("data/manifest.json");
    EXPECT_TRUE(fs::exists(at("data/config.ini")));

    EXPECT_EQ(run_cli("pseudo-preview" + cfg() + m + " -n 1 -o " + at("preview")), 0);
    EXPECT_TRUE(fs::exists(at("preview/preview.json")));

    ASSERT_EQ(run_cli("train" + cfg() + m + " -o " + at("train")), 0);
    EXPECT_TRUE(fs::exists(at("train/checkpoint.zalw")));
    EXPECT_TRUE(fs::exists(at("train/loss_log.csv")));
    ASSERT_EQ(run_cli("bank" + cfg() + m + " --checkpoint " + at("train/checkpoint.zalw") + " -o " + at("bank")), 0);
    ASSERT_EQ(run_cli("score" + cfg() + m + " --checkpoint " + at("train/checkpoint.zalw") + " --bank " +
                      at("bank/bank.zalb") + " -o " + at("score") + " --heatmaps"),
              0);
    EXPECT_TRUE(fs::exists(at("score/scores.csv")));
    ASSERT_EQ(run_cli("eval" + cfg() + m + " --scores " + at("score") + " -o " + at("eval1")), 0);
    ASSERT_EQ(run_cli("eval" + cfg() + m + " --scores " + at("score") + " -o " + at("eval2")), 0);
    // re-evaluating stored maps is bit-stable
    EXPECT_EQ(test::read_bytes(at("eval1/metrics.json")), test::read_bytes(at("eval2/metrics.json")));
    EXPECT_EQ(test::read_bytes(at("eval1/curve.csv")), test::read_bytes(at("eval2/curve.csv")));

    // stage-tagged failures
    EXPECT_EQ(run_cli("train" + cfg() + m + " -o " + at("x") + " --set bogus.key=1"), 2);
    EXPECT_EQ(run_cli("train" + cfg() + " -m " + at("missing.json") + " -o " + at("x")), 3);
    test::write_bytes(at("broken.zalw"), "ZALX");
    EXPECT_EQ(run_cli("bank" + cfg() + m + " --checkpoint " + at("broken.zalw") + " -o " + at("x")), 5);
    EXPECT_EQ(run_cli("score" + cfg() + m + " --checkpoint " + at("train/checkpoint.zalw") + " --bank " +
                      at("broken.zalw") + " -o " + at("x")),
              6);
    EXPECT_EQ(run_cli("eval" + cfg() + m + " --scores " + at("bank") + " -o " + at("x")), 7);
    EXPECT_EQ(run_cli("zeroshot" + cfg() + " -o " + at("x")), 2);
    EXPECT_EQ(run_cli("train --no-such-flag"), 2);
    EXPECT_EQ(run_cli("--help"), 0);
}

TEST_F(CliTest, ZeroShotIsDeterministicAndRecordsConfig) {
    ASSERT_EQ(run_cli("synth" + cfg() + " -o " + at("zs_data")), 0);
    const std::string m = " -m " + at("zs_data/manifest.json");
    ASSERT_EQ(run_cli("zeroshot" + cfg() + m + " -o " + at("zs1")), 0);
    ASSERT_EQ(run_cli("zeroshot" + cfg() + m + " -o " + at("zs2")), 0);
    for (const char* f : {"metrics.json", "scores.csv", "checkpoint.zalw", "bank.zalb", "config.ini"})
        EXPECT_EQ(test::read_bytes(at(std::string("zs1/") + f)), test::read_bytes(at(std::string("zs2/") + f))) << f;
    const auto maps1 = tree_digest(at("zs1/maps")), maps2 = tree_digest(at("zs2/maps"));
    EXPECT_EQ(maps1, maps2);
    EXPECT_EQ(maps1.size(), 4u * 3u);

    const auto metrics = nlohmann::json::parse(test::read_bytes(at("zs1/metrics.json")));
    EXPECT_EQ(metrics.at("fpr_limit").get<double>(), 0.3);
    EXPECT_EQ(metrics.at("config").at("experiment").at("test_class").get<std::string>(), "sphere");
    const auto resolved = ExperimentConfig::load(at("zs1/config.ini"));
    EXPECT_EQ(resolved.image_size, 64u);

    ASSERT_EQ(run_cli("zeroshot" + cfg() + m + " --distance-only -o " + at("zs3")), 0);
    std::ifstream scores(at("zs3/scores.csv"));
    std::string header, row;
    std::getline(scores, header);
    EXPECT_EQ(header, "sample_id,S_dist,S_cls,S,label");
    std::getline(scores, row);
    EXPECT_NE(row.find(",,"), std::string::npos);  // no classification score
}
