#pragma once

#include <optional>
#include <string>
#include <vector>

#include "outlierlab/model.hpp"
#include "outlierlab/outlier.hpp"
#include "outlierlab/train.hpp"

namespace outlierlab {

// Sample Pearson correlation; nullopt when n < 2 or either variance is 0.
// Streaming accumulator so pair sources can feed it incrementally.
class PearsonAccumulator {
public:
    void add(double x, double y);
    std::optional<double> result() const;
    std::int64_t count() const { return n_; }

private:
    std::int64_t n_ = 0;
    double mean_x_ = 0.0, mean_y_ = 0.0;
    double m2x_ = 0.0, m2y_ = 0.0, cxy_ = 0.0;
};

std::optional<double> pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// Rank-transform Pearson, for sensitivity checks.
std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys);

struct CorrelationEntry {
    int layer = 0;
    int head = -1;  // -1 for frequency tables
    int dim = 0;
    bool include_special = false;
    bool is_control = false;
    std::optional<double> r;
    std::int64_t n = 0;
};

struct CorrelationTable {
    std::vector<CorrelationEntry> entries;
    std::vector<int> control_dims;

    // mean of |r| over defined control-dim entries at one layer (and head)
    std::optional<double> control_mean_abs_r(int layer, int head = -1) const;
    std::optional<double> entry_r(int layer, int dim, int head = -1) const;
};

struct FreqCorrelationOptions {
    bool include_special = false;
    bool per_type = false;       // average magnitudes per token type first
    bool use_spearman = false;
    int n_control_dims = 10;
    std::uint64_t control_seed = 0;
    int max_rows = 256;
};

// Pairs (|hs_l[token, dim]|, log10 relative frequency of the token type) per
// layer and dim; PAD always excluded, CLS/SEP per the flag. Control dims are
// sampled uniformly outside `dims`.
CorrelationTable freq_magnitude_correlation(const ParametersF& params, const TrainingStream& stream,
                                            const FrequencyTable& freq, const std::vector<int>& dims,
                                            const FreqCorrelationOptions& opts);

struct AttnCorrelationOptions {
    bool include_special = false;
    int n_control_dims = 10;
    std::uint64_t control_seed = 0;
    int max_rows = 128;
};

// Pairs (|hs_l[j, dim]|, column mean of the post-softmax attention received
// by token j) per layer, head and dim.
CorrelationTable attention_query_correlation(const ParametersF& params,
                                             const TrainingStream& stream,
                                             const std::vector<int>& dims,
                                             const AttnCorrelationOptions& opts);

struct GenerationShift {
    std::vector<double> bin_edges;  // n_bins + 1, log10 relative frequency
    std::vector<std::string> condition_names;
    std::vector<std::vector<std::int64_t>> counts;  // per condition, per bin
    std::int64_t n_masked = 0;
};

struct NamedAblation {
    std::string name;
    AblationMask mask;
};

// Argmax MLM predictions at masked positions, binned by log10 relative corpus
// frequency; identical masks across conditions.
GenerationShift generation_frequency_shift(const ParametersF& params, const TrainingStream& stream,
                                           const FrequencyTable& freq,
                                           const std::vector<NamedAblation>& conditions,
                                           double mask_rate, int n_bins, std::uint64_t seed,
                                           int max_rows = 256);

struct DynamicsRow {
    int step = 0;
    std::string condition;
    double probe_acc = 0.0;
    double mlm_loss = 0.0;
};

struct DynamicsSeries {
    std::vector<DynamicsRow> rows;
};

// For each checkpoint: fine-tune the probe, then evaluate full / each single
// dim / all dims. Ablation is applied after fine-tuning; MLM loss is measured
// on the pre-trained parameters.
DynamicsSeries checkpoint_dynamics(const std::vector<Checkpoint>& checkpoints,
                                   const ProbeTask& probe_task, const CorpusSpec& corpus_spec,
                                   const TrainConfig& ft_config, const TrainingStream& eval_stream,
                                   const std::vector<int>& dims);

// CSV contracts for downstream plotting.
void write_correlation_csv(const CorrelationTable& table, const std::string& path);
void write_shift_csv(const GenerationShift& shift, const std::string& path);
void write_dynamics_csv(const DynamicsSeries& series, const std::string& path);

}  // namespace outlierlab
