#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "outlierlab/model.hpp"
#include "outlierlab/train.hpp"

namespace outlierlab {

struct CandidateOutlier {
    int dim = -1;
    std::vector<double> per_layer_z;  // z-score of the post-FFN LayerNorm weight, per layer
    double coverage = 0.0;            // fraction of layers with |z| > k_sigma
    double max_abs_z = 0.0;
};

// Scans the post-FFN LayerNorm weight vectors. A dim is a candidate iff its
// weight sits beyond k_sigma layer standard deviations from the layer mean in
// at least min_coverage of the layers. Layers with zero spread contribute no
// exceedances.
std::vector<CandidateOutlier> find_candidates(const ParametersF& params, double k_sigma = 3.0,
                                              double min_coverage = 0.5);

// Copy with gamma and beta zeroed at dims for both LayerNorms of each listed
// layer (1-based; empty layers = all).
ParametersF ablate(const ParametersF& params, const std::vector<int>& dims,
                   const std::vector<int>& layers = {});

struct DamageReport {
    std::vector<int> dims;
    std::vector<int> layers;
    double delta_mlm_loss = 0.0;        // nats, higher = worse
    double delta_probe_acc = 0.0;       // accuracy points lost, higher = worse
    double baseline_mean_mlm = 0.0;
    double baseline_sigma_mlm = 0.0;
    double baseline_mean_probe = 0.0;
    double baseline_sigma_probe = 0.0;
    double damage_ratio = 0.0;          // probe delta / max(baseline probe mean, floor)
    bool verified = false;
};

struct BaselineStats {
    std::vector<int> sampled_dims;
    double mean_mlm = 0.0;
    double sigma_mlm = 0.0;
    double mean_probe = 0.0;
    double sigma_probe = 0.0;
};

// Evaluation hooks shared by the damage operations: the pre-trained model for
// MLM loss and the fine-tuned model for probe accuracy.
struct DamageContext {
    const ParametersF* pretrained = nullptr;  // MLM metric
    const ParametersF* fine_tuned = nullptr;  // probe metric
    const TrainingStream* eval_stream = nullptr;
    const ProbeDataset* probe_eval = nullptr;
    int eval_rows = 256;
    double mask_rate = 0.15;
    std::uint64_t eval_seed = 0;
    // floor on the baseline probe-accuracy delta (accuracy points) that the
    // damage ratio divides by
    double ratio_floor = 0.001;
};

// Per-condition metrics. The ablation is applied as a mask, never by
// mutating the context models.
struct ConditionMetrics {
    double mlm_loss = 0.0;
    double probe_acc = 0.0;
};

ConditionMetrics evaluate_condition(const DamageContext& ctx, const AblationMask& ablation);

BaselineStats random_baseline_damage(const DamageContext& ctx, int n_random,
                                     const std::vector<int>& excluded_dims, std::uint64_t seed);

DamageReport measure_damage(const DamageContext& ctx, const std::vector<int>& dims,
                            const std::vector<int>& layers, const BaselineStats& baseline,
                            double ratio_threshold = 5.0);

struct VerifiedOutlier {
    CandidateOutlier candidate;
    DamageReport report;
};

std::vector<VerifiedOutlier> verify_outliers(const std::vector<CandidateOutlier>& candidates,
                                             const DamageContext& ctx,
                                             const BaselineStats& baseline,
                                             double ratio_threshold = 5.0);

// L+1 reports for one dim: one per single-layer ablation plus the all-layers row.
std::vector<DamageReport> layerwise_sweep(const DamageContext& ctx, int dim,
                                          const BaselineStats& baseline);

// CSV: dim,layer,delta_mlm_loss,delta_probe_acc,baseline_mean,baseline_sigma,damage_ratio,verified
void write_damage_csv(const std::vector<DamageReport>& reports, const std::string& path);

}  // namespace outlierlab
