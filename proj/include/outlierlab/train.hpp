#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "outlierlab/corpus.hpp"
#include "outlierlab/model.hpp"

namespace outlierlab {

struct TrainConfig {
    int total_steps = 20000;
    int batch_size = 32;
    double peak_lr = 1e-4;
    int warmup_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double weight_decay = 0.01;
    double mask_rate = 0.15;
    int checkpoint_interval = 2000;
    std::uint64_t seed = 0;

    void validate() const {
        if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
        if (batch_size <= 0) throw ConfigError("train.batch_size must be > 0");
        if (peak_lr <= 0.0) throw ConfigError("train.peak_lr must be > 0");
        if (warmup_steps < 0 || warmup_steps > std::max(total_steps, 1))
            throw ConfigError("train.warmup_steps must be in [0, total_steps]");
        if (checkpoint_interval <= 0) throw ConfigError("train.checkpoint_interval must be > 0");
        if (mask_rate < 0.0 || mask_rate >= 1.0) throw ConfigError("train.mask_rate must be in [0,1)");
    }
};

// Linear warmup to peak_lr, then linear decay to 0 at total_steps.
double lr_at_step(const TrainConfig& cfg, int step);

struct AdamState {
    ParametersF m;
    ParametersF v;
};

void adam_step(ParametersF& params, const ParametersF& grads, AdamState& state, int step,
               const TrainConfig& cfg);

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    ParametersF params;
    AdamState adam;
    int step = 0;
    std::string scheme = "SPLIT";
    double running_mlm_loss = 0.0;
};

struct TrainResult {
    std::vector<Checkpoint> checkpoints;
    std::vector<double> step_losses;  // one entry per optimizer step
};

// MLM pre-training. Emits a checkpoint at step 0, every checkpoint_interval
// steps, and at the final step.
TrainResult train_mlm(const TrainConfig& train_config, const ModelConfig& model_config,
                      const TrainingStream& stream);

// Label 1 iff both marker tokens occur within `window` positions of each
// other somewhere in the row. Balanced by construction.
struct ProbeTask {
    TokenId marker1 = 0;
    TokenId marker2 = 0;
    int window = 6;
    int n_train = 4096;
    int n_eval = 1024;

    void validate(int vocab_size) const {
        if (marker1 == marker2) throw ConfigError("probe markers must differ");
        if (marker1 < Vocabulary::kNumSpecial || marker1 >= vocab_size ||
            marker2 < Vocabulary::kNumSpecial || marker2 >= vocab_size)
            throw ConfigError("probe markers must be content tokens");
        if (window < 1) throw ConfigError("probe window must be >= 1");
        if (n_train <= 0 || n_eval <= 0) throw ConfigError("probe set sizes must be > 0");
    }
};

struct ProbeDataset {
    TrainingStream rows;       // same framing as a training stream
    std::vector<int> labels;   // 0/1 per row
};

// Rows are sampled from the corpus generator's sentence model, scrubbed of
// natural marker occurrences, then markers are planted per the label rule.
ProbeDataset make_probe_dataset(const ProbeTask& task, const CorpusSpec& corpus_spec,
                                int max_seq_len, int n_examples, std::uint64_t seed);

struct FineTuneResult {
    Checkpoint checkpoint;
    double eval_accuracy = 0.0;
};

FineTuneResult fine_tune_probe(const Checkpoint& start, const ProbeTask& task,
                               const CorpusSpec& corpus_spec, const TrainConfig& ft_config);

double probe_accuracy(const ParametersF& params, const ProbeDataset& eval_set,
                      const AblationMask& ablation = {});

double eval_mlm_loss(const ParametersF& params, const TrainingStream& stream, int max_rows,
                     double mask_rate, std::uint64_t seed, const AblationMask& ablation = {});

// Probe dataset file format: the stream line format with a trailing label column.
void save_probe_dataset(const ProbeDataset& ds, const std::string& path);
ProbeDataset load_probe_dataset(const std::string& path, int max_seq_len);

}  // namespace outlierlab
