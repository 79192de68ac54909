#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "outlierlab/experiment.hpp"

using namespace outlierlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<std::string> fast_overrides(const std::string& out_dir) {
    return {
        "corpus.vocab_size=105",      "corpus.n_documents=60",
        "train.total_steps=4",        "train.checkpoint_interval=2",
        "train.warmup_steps=1",       "train.batch_size=4",
        "model.n_layers=2",           "model.hidden_dim=16",
        "model.n_heads=2",            "model.ffn_dim=32",
        "scheme.max_seq_len=16",      "probe.n_train=32",
        "probe.n_eval=32",            "probe.fine_tune_steps=3",
        "probe.fine_tune_warmup=1",   "detect.eval_rows=16",
        "diagnostics.max_rows=16",    "output.dir=" + out_dir,
    };
}

}  // namespace

TEST_CASE("the default configuration text parses to valid defaults") {
    const ExperimentConfig cfg = resolve_config_text(default_config_text(), {});
    CHECK(cfg.corpus.vocab_size == 2005);
    CHECK(cfg.corpus.zipf_exponent == 1.1);
    CHECK(cfg.model.n_layers == 4);
    CHECK(cfg.model.hidden_dim == 64);
    CHECK(cfg.model.n_heads == 4);
    CHECK(cfg.model.ffn_dim == 256);
    CHECK(cfg.train.total_steps == 20000);
    CHECK(cfg.train.peak_lr == 1e-4);
    CHECK(cfg.train.warmup_steps == 500);
    CHECK(cfg.train.batch_size == 32);
    CHECK(cfg.max_seq_len == 64);
    CHECK(cfg.scheme == Scheme::Split);
    CHECK(cfg.ratio_threshold == 5.0);
    CHECK(cfg.n_random_baseline == 10);
    // shared dimensions propagate
    CHECK(cfg.model.vocab_size == cfg.corpus.vocab_size);
    CHECK(cfg.model.max_seq_len == cfg.max_seq_len);
}

TEST_CASE("overrides out-rank the file and are type-checked") {
    const ExperimentConfig cfg = resolve_config_text(
        default_config_text(), {"train.total_steps=123", "train.warmup_steps=50",
                                "scheme.name=RANDOMIZE", "ablate.dims=3+17", "output.seed=999"});
    CHECK(cfg.train.total_steps == 123);
    CHECK(cfg.scheme == Scheme::Randomize);
    CHECK(cfg.ablate_dims == std::vector<int>{3, 17});
    CHECK(cfg.master_seed == 999);

    CHECK_THROWS_WITH_AS(resolve_config_text(default_config_text(), {"train.total_steps=abc"}),
                         doctest::Contains("train.total_steps"), ConfigError);
}

TEST_CASE("unknown keys are rejected by their full path") {
    CHECK_THROWS_WITH_AS(resolve_config_text(default_config_text(), {"modle.d=3"}),
                         doctest::Contains("modle.d"), ConfigError);
    CHECK_THROWS_WITH_AS(resolve_config_text("[model]\nd = 3\n", {}),
                         doctest::Contains("model.d"), ConfigError);
    CHECK_THROWS_AS(resolve_config_text("stray = 1\n", {}), ConfigError);
}

TEST_CASE("seed fan-out keys stage seeds off the master seed") {
    const ExperimentConfig a = resolve_config_text(default_config_text(), {"output.seed=1"});
    const ExperimentConfig b = resolve_config_text(default_config_text(), {"output.seed=2"});
    CHECK(a.corpus.seed != b.corpus.seed);
    CHECK(a.train.seed != b.train.seed);
    CHECK(a.corpus.seed != a.train.seed);
    CHECK(a.model.seed != a.train.seed);
}

TEST_CASE("sha256 matches the published test vector") {
    CHECK(sha256_string("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_string("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("manifest round-trips and verify flags tampering") {
    TempDir dir("outlierlab_test_manifest");
    {
        std::ofstream out(dir.path / "data.txt");
        out << "hello\n";
    }
    RunManifest m = RunManifest::load_or_create(dir.path.string(), "confhash");
    m.record_file("data.txt");
    m.mark_stage("gen-corpus");
    m.save();

    RunManifest loaded = RunManifest::load(dir.path.string());
    CHECK(loaded.stage_done("gen-corpus"));
    CHECK(!loaded.stage_done("train"));
    std::vector<std::string> problems;
    CHECK(loaded.verify(problems));
    CHECK(problems.empty());

    {
        std::ofstream out(dir.path / "data.txt");
        out << "tampered\n";
    }
    CHECK(!loaded.verify(problems));
    REQUIRE(problems.size() == 1);
    CHECK(problems[0].find("data.txt") != std::string::npos);

    fs::remove(dir.path / "data.txt");
    problems.clear();
    CHECK(!loaded.verify(problems));
    CHECK(problems[0].find("missing") != std::string::npos);
}

TEST_CASE("manifest load throws when absent") {
    TempDir dir("outlierlab_test_nomanifest");
    CHECK_THROWS_WITH_AS(RunManifest::load(dir.path.string()), doctest::Contains("no manifest"),
                         std::runtime_error);
}

TEST_CASE("run_command exit codes: usage, invalid config, stage failure") {
    TempDir dir("outlierlab_test_codes");
    std::string err;
    CHECK(run_command("explode", "", {}, dir.path.string(), "", err) == 2);
    CHECK(err.find("unknown command") != std::string::npos);

    CHECK(run_command("gen-corpus", "", {"modle.d=3"}, dir.path.string(), "", err) == 3);
    CHECK(err.find("modle.d") != std::string::npos);

    CHECK(run_command("gen-corpus", "/nonexistent/config.ini", {}, dir.path.string(), "", err) ==
          3);

    // report before anything ran: no manifest
    CHECK(run_command("report", "", {}, dir.path.string(), "", err) == 1);
    CHECK(err.find("no manifest found") != std::string::npos);

    // train before gen-corpus: missing stream is a stage failure
    CHECK(run_command("train", "", fast_overrides(dir.path.string()), "", "", err) == 1);
}

TEST_CASE("a stale lock blocks the directory until removed") {
    TempDir dir("outlierlab_test_lock");
    {
        std::ofstream out(dir.path / ".lock");
        out << "locked\n";
    }
    std::string err;
    CHECK(run_command("gen-corpus", "", fast_overrides(dir.path.string()), "", "", err) == 1);
    CHECK(err.find("locked") != std::string::npos);
    fs::remove(dir.path / ".lock");
    CHECK(run_command("gen-corpus", "", fast_overrides(dir.path.string()), "", "", err) == 0);
    CHECK(!fs::exists(dir.path / ".lock"));  // released on success
}

TEST_CASE("the pipeline stages chain through the artifact directory") {
    TempDir dir("outlierlab_test_pipeline");
    const auto overrides = fast_overrides(dir.path.string());
    std::string err;
    REQUIRE(run_command("gen-corpus", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "corpus.txt"));
    CHECK(fs::exists(dir.path / "stream.txt"));
    CHECK(fs::exists(dir.path / "frequency.csv"));

    REQUIRE(run_command("train", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "losses.csv"));
    CHECK(fs::exists(dir.path / "ckpt_main_step0000000.ckpt"));
    CHECK(fs::exists(dir.path / "ckpt_main_step0000004.ckpt"));

    REQUIRE(run_command("detect", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "outlier_report.csv"));
    CHECK(fs::exists(dir.path / "candidates.csv"));
    CHECK(fs::exists(dir.path / "detect_summary.txt"));

    auto with_ablate = overrides;
    with_ablate.push_back("ablate.dims=3");
    REQUIRE(run_command("ablate", "", with_ablate, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "ckpt_ablated.ckpt"));

    REQUIRE(run_command("sweep", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "sweep.csv"));

    REQUIRE(run_command("diagnose", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "freq_correlation.csv"));
    CHECK(fs::exists(dir.path / "attention_correlation.csv"));
    CHECK(fs::exists(dir.path / "generation_shift.csv"));

    REQUIRE(run_command("dynamics", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "dynamics.csv"));

    REQUIRE(run_command("report", "", overrides, "", "", err) == 0);
    CHECK(fs::exists(dir.path / "report.txt"));
    CHECK(fs::exists(dir.path / "manifest.json"));
}

TEST_CASE("--seed and --out style overrides reach the config") {
    TempDir dir("outlierlab_test_outseed");
    std::string err;
    auto overrides = fast_overrides("ignored");
    overrides.pop_back();  // drop output.dir; use the out override instead
    REQUIRE(run_command("gen-corpus", "", overrides, dir.path.string(), "4321", err) == 0);
    std::ifstream in(dir.path / "config_resolved.json");
    const std::string text((std::istreambuf_iterator<char>(in)), {});
    CHECK(text.find("4321") != std::string::npos);
    CHECK(text.find(dir.path.string()) != std::string::npos);
}
