#include "outlierlab/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace outlierlab {

std::vector<CandidateOutlier> find_candidates(const ParametersF& params, double k_sigma,
                                              double min_coverage) {
    if (k_sigma <= 0.0) throw ConfigError("k_sigma must be > 0");
    if (min_coverage <= 0.0 || min_coverage > 1.0) throw ConfigError("min_coverage must be in (0,1]");
    const int L = params.config.n_layers;
    const int d = params.config.hidden_dim;

    // z-scores of the post-FFN LayerNorm weight per layer
    std::vector<std::vector<double>> z(L, std::vector<double>(d, 0.0));
    std::vector<bool> layer_has_spread(L, false);
    for (int l = 0; l < L; ++l) {
        const auto& w = params.layers[l].ln2_g;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += static_cast<double>(w(0, j));
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = static_cast<double>(w(0, j)) - mean;
            var += c * c;
        }
        var /= d;
        const double sigma = std::sqrt(var);
        if (sigma > 0.0) {
            layer_has_spread[l] = true;
            for (int j = 0; j < d; ++j) z[l][j] = (static_cast<double>(w(0, j)) - mean) / sigma;
        }
    }

    std::vector<CandidateOutlier> candidates;
    for (int j = 0; j < d; ++j) {
        CandidateOutlier c;
        c.dim = j;
        c.per_layer_z.resize(L);
        int exceed = 0;
        for (int l = 0; l < L; ++l) {
            c.per_layer_z[l] = z[l][j];
            if (layer_has_spread[l] && std::abs(z[l][j]) > k_sigma) ++exceed;
            c.max_abs_z = std::max(c.max_abs_z, std::abs(z[l][j]));
        }
        c.coverage = static_cast<double>(exceed) / L;
        if (c.coverage >= min_coverage) candidates.push_back(std::move(c));
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const CandidateOutlier& a, const CandidateOutlier& b) {
                         if (a.coverage != b.coverage) return a.coverage > b.coverage;
                         if (a.max_abs_z != b.max_abs_z) return a.max_abs_z > b.max_abs_z;
                         return a.dim < b.dim;
                     });
    return candidates;
}

ParametersF ablate(const ParametersF& params, const std::vector<int>& dims,
                   const std::vector<int>& layers) {
    const int L = params.config.n_layers;
    const int d = params.config.hidden_dim;
    for (int dim : dims)
        if (dim < 0 || dim >= d) throw std::out_of_range("ablate: dim out of range");
    for (int l : layers)
        if (l < 1 || l > L) throw std::out_of_range("ablate: layer out of range");

    ParametersF out = params;
    auto apply = [&](int layer_index) {
        auto& lp = out.layers[layer_index];
        for (int dim : dims) {
            lp.ln1_g(0, dim) = 0.0f;
            lp.ln1_b(0, dim) = 0.0f;
            lp.ln2_g(0, dim) = 0.0f;
            lp.ln2_b(0, dim) = 0.0f;
        }
    };
    if (layers.empty()) {
        for (int l = 0; l < L; ++l) apply(l);
    } else {
        for (int l : layers) apply(l - 1);
    }
    return out;
}

ConditionMetrics evaluate_condition(const DamageContext& ctx, const AblationMask& ablation) {
    if (!ctx.pretrained || !ctx.fine_tuned || !ctx.eval_stream || !ctx.probe_eval)
        throw ConfigError("damage context incomplete");
    ConditionMetrics m;
    m.mlm_loss = eval_mlm_loss(*ctx.pretrained, *ctx.eval_stream, ctx.eval_rows, ctx.mask_rate,
                               ctx.eval_seed, ablation);
    m.probe_acc = probe_accuracy(*ctx.fine_tuned, *ctx.probe_eval, ablation);
    return m;
}

BaselineStats random_baseline_damage(const DamageContext& ctx, int n_random,
                                     const std::vector<int>& excluded_dims, std::uint64_t seed) {
    if (n_random < 10) throw ConfigError("random_baseline_damage: n_random must be >= 10");
    const int d = ctx.pretrained->config.hidden_dim;
    std::vector<bool> excluded(d, false);
    int n_excluded = 0;
    for (int dim : excluded_dims)
        if (dim >= 0 && dim < d && !excluded[dim]) {
            excluded[dim] = true;
            ++n_excluded;
        }
    if (n_random > d - n_excluded)
        throw ConfigError("random_baseline_damage: not enough non-excluded dims");

    Rng rng(seed);
    BaselineStats stats;
    std::vector<bool> taken(d, false);
    while (static_cast<int>(stats.sampled_dims.size()) < n_random) {
        const int dim = static_cast<int>(rng.uniform_int(d));
        if (excluded[dim] || taken[dim]) continue;
        taken[dim] = true;
        stats.sampled_dims.push_back(dim);
    }

    const ConditionMetrics full = evaluate_condition(ctx, {});
    std::vector<double> dmlm, dprobe;
    for (int dim : stats.sampled_dims) {
        const ConditionMetrics abl = evaluate_condition(ctx, AblationMask{{dim}, {}});
        dmlm.push_back(abl.mlm_loss - full.mlm_loss);
        dprobe.push_back(full.probe_acc - abl.probe_acc);
    }
    auto mean_sigma = [](const std::vector<double>& xs, double& mean, double& sigma) {
        mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        sigma = std::sqrt(var / static_cast<double>(xs.size()));
    };
    mean_sigma(dmlm, stats.mean_mlm, stats.sigma_mlm);
    mean_sigma(dprobe, stats.mean_probe, stats.sigma_probe);
    return stats;
}

DamageReport measure_damage(const DamageContext& ctx, const std::vector<int>& dims,
                            const std::vector<int>& layers, const BaselineStats& baseline,
                            double ratio_threshold) {
    DamageReport report;
    report.dims = dims;
    report.layers = layers;
    report.baseline_mean_mlm = baseline.mean_mlm;
    report.baseline_sigma_mlm = baseline.sigma_mlm;
    report.baseline_mean_probe = baseline.mean_probe;
    report.baseline_sigma_probe = baseline.sigma_probe;
    if (dims.empty()) return report;

    const ConditionMetrics full = evaluate_condition(ctx, {});
    const ConditionMetrics abl = evaluate_condition(ctx, AblationMask{dims, layers});
    report.delta_mlm_loss = abl.mlm_loss - full.mlm_loss;
    report.delta_probe_acc = full.probe_acc - abl.probe_acc;
    // classification damage is the primary verification criterion
    report.damage_ratio =
        report.delta_probe_acc / std::max(baseline.mean_probe, ctx.ratio_floor);
    report.verified = report.damage_ratio >= ratio_threshold;
    return report;
}

std::vector<VerifiedOutlier> verify_outliers(const std::vector<CandidateOutlier>& candidates,
                                             const DamageContext& ctx,
                                             const BaselineStats& baseline,
                                             double ratio_threshold) {
    std::vector<VerifiedOutlier> verified;
    for (const auto& cand : candidates) {
        DamageReport report = measure_damage(ctx, {cand.dim}, {}, baseline, ratio_threshold);
        if (report.verified) verified.push_back(VerifiedOutlier{cand, std::move(report)});
    }
    return verified;
}

std::vector<DamageReport> layerwise_sweep(const DamageContext& ctx, int dim,
                                          const BaselineStats& baseline) {
    const int L = ctx.pretrained->config.n_layers;
    if (dim < 0 || dim >= ctx.pretrained->config.hidden_dim)
        throw std::out_of_range("layerwise_sweep: dim out of range");
    std::vector<DamageReport> reports;
    for (int l = 1; l <= L; ++l)
        reports.push_back(measure_damage(ctx, {dim}, {l}, baseline));
    reports.push_back(measure_damage(ctx, {dim}, {}, baseline));
    return reports;
}

void write_damage_csv(const std::vector<DamageReport>& reports, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "dim,layer,delta_mlm_loss,delta_probe_acc,baseline_mean,baseline_sigma,damage_ratio,"
           "verified\n";
    out.precision(10);
    for (const auto& r : reports) {
        std::string dims;
        for (std::size_t i = 0; i < r.dims.size(); ++i)
            dims += (i ? "+" : "") + std::to_string(r.dims[i]);
        std::string layers = r.layers.empty() ? "all" : "";
        for (std::size_t i = 0; i < r.layers.size(); ++i)
            layers += (i ? "+" : "") + std::to_string(r.layers[i]);
        out << dims << ',' << layers << ',' << r.delta_mlm_loss << ',' << r.delta_probe_acc << ','
            << r.baseline_mean_probe << ',' << r.baseline_sigma_probe << ',' << r.damage_ratio
            << ',' << (r.verified ? 1 : 0) << '\n';
    }
}

}  // namespace outlierlab
