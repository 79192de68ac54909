#pragma once

#include <map>
#include <string>
#include <vector>

#include "outlierlab/corpus.hpp"
#include "outlierlab/diagnostics.hpp"
#include "outlierlab/model.hpp"
#include "outlierlab/outlier.hpp"
#include "outlierlab/train.hpp"

namespace outlierlab {

inline constexpr const char* kToolVersion = "0.1.0";

struct ExperimentConfig {
    CorpusSpec corpus;
    Scheme scheme = Scheme::Split;
    int max_seq_len = 64;
    double freq_threshold = 1e-5;
    double replace_prob = 0.5;
    ModelConfig model;
    TrainConfig train;
    ProbeTask probe;
    int fine_tune_steps = 2000;
    double fine_tune_lr = 1e-4;
    int fine_tune_warmup = 100;
    double k_sigma = 3.0;
    double min_coverage = 0.5;
    double ratio_threshold = 5.0;
    int n_random_baseline = 10;
    int eval_rows = 256;
    std::vector<int> ablate_dims;
    std::vector<int> ablate_layers;
    int sweep_dim = -1;  // -1: first verified (or top candidate) dim
    bool diag_freq_correlation = true;
    bool diag_attention_correlation = true;
    bool diag_generation_shift = true;
    bool diag_include_special = false;
    int diag_n_bins = 20;
    int diag_n_control_dims = 10;
    int diag_max_rows = 256;
    std::string out_dir = "out";
    std::uint64_t master_seed = 1234;

    void validate() const;
    std::string to_json() const;
    TrainConfig fine_tune_config() const;
};

// Flat `[section]` / `key = value` file; overrides as `section.key=value`.
ExperimentConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides);
ExperimentConfig resolve_config_text(const std::string& text,
                                     const std::vector<std::string>& overrides);
std::string default_config_text();

std::string sha256_file(const std::string& path);
std::string sha256_string(const std::string& data);

class RunManifest {
public:
    static RunManifest load_or_create(const std::string& out_dir, const std::string& config_hash);
    static RunManifest load(const std::string& out_dir);  // throws if absent

    void record_file(const std::string& name);
    void mark_stage(const std::string& stage);
    bool stage_done(const std::string& stage) const;
    void save() const;
    bool verify(std::vector<std::string>& problems) const;
    const std::map<std::string, std::string>& files() const { return files_; }
    const std::map<std::string, bool>& stages() const { return stages_; }

private:
    std::string out_dir_;
    std::string config_hash_;
    std::map<std::string, std::string> files_;  // name -> sha256
    std::map<std::string, bool> stages_;
    friend class ManifestIo;
};

// Pipeline stages. Each reads its inputs from and writes its outputs to the
// artifact directory, updating the manifest.
void stage_gen_corpus(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_train(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_detect(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_ablate(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_sweep(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_diagnose(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_dynamics(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_compare_schemes(const ExperimentConfig& cfg, RunManifest& manifest);
void stage_report(const ExperimentConfig& cfg, RunManifest& manifest);

// Entry point shared by the CLI binary and the acceptance suite. Returns the
// process exit code: 0 success, 1 stage failure, 2 usage, 3 invalid config.
int run_command(const std::string& command, const std::string& config_path,
                const std::vector<std::string>& overrides, const std::string& out_override,
                const std::string& seed_override, std::string& error_message);

}  // namespace outlierlab
