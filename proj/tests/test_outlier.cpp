#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "outlierlab/outlier.hpp"

using namespace outlierlab;

namespace {

ModelConfig tiny_model(std::uint64_t seed = 41) {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.hidden_dim = 16;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.vocab_size = 55;
    cfg.max_seq_len = 16;
    cfg.seed = seed;
    return cfg;
}

// ln2 weights with mild noise so the layer sigma is nonzero
ParametersF noisy_params(std::uint64_t seed = 41) {
    ParametersF p = init_parameters<float>(tiny_model(seed));
    Rng rng(derive_seed(seed, "ln-noise"));
    for (auto& layer : p.layers)
        for (Eigen::Index i = 0; i < layer.ln2_g.size(); ++i)
            layer.ln2_g.data()[i] += static_cast<float>(0.01 * rng.normal());
    return p;
}

TrainingStream tiny_stream() {
    CorpusSpec spec;
    spec.vocab_size = 55;
    spec.n_documents = 40;
    spec.sentences_per_document = 4;
    spec.min_sentence_len = 4;
    spec.max_sentence_len = 10;
    spec.seed = 5;
    return apply_tokenization_scheme(generate_corpus(spec), Scheme::Split, 16, 1e-3, 0.5, 2);
}

}  // namespace

TEST_CASE("planted outlier is detected with full coverage and nothing else") {
    ParametersF p = noisy_params();
    // plant: mean + 10 sigma at dim 7, in every layer
    for (auto& layer : p.layers) {
        const auto& g = layer.ln2_g;
        double mean = 0.0, var = 0.0;
        for (Eigen::Index i = 0; i < g.size(); ++i) mean += g.data()[i];
        mean /= static_cast<double>(g.size());
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            const double dlt = g.data()[i] - mean;
            var += dlt * dlt;
        }
        var /= static_cast<double>(g.size());
        layer.ln2_g(0, 7) = static_cast<float>(mean + 10.0 * std::sqrt(var));
    }
    const auto candidates = find_candidates(p, 3.0, 0.5);
    REQUIRE(candidates.size() == 1);
    CHECK(candidates[0].dim == 7);
    CHECK(candidates[0].coverage == doctest::Approx(1.0));
    CHECK(candidates[0].max_abs_z > 3.0);
    REQUIRE(candidates[0].per_layer_z.size() == 3);
    for (double z : candidates[0].per_layer_z) CHECK(z > 3.0);
}

TEST_CASE("uniform layer-norm weights yield no candidates") {
    const ParametersF p = init_parameters<float>(tiny_model());  // all gains exactly 1
    CHECK(find_candidates(p, 3.0, 0.5).empty());
}

TEST_CASE("detection is equivariant under dimension permutations") {
    ParametersF base = noisy_params(43);
    for (auto& layer : base.layers) layer.ln2_g(0, 5) += 3.0f;  // strong outlier at dim 5
    const auto base_cands = find_candidates(base, 3.0, 0.5);
    REQUIRE(!base_cands.empty());

    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> perm(16);
        for (int i = 0; i < 16; ++i) perm[i] = i;
        for (int i = 15; i > 0; --i)
            std::swap(perm[i], perm[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);

        ParametersF permuted = base;
        for (std::size_t l = 0; l < base.layers.size(); ++l)
            for (int i = 0; i < 16; ++i)
                permuted.layers[l].ln2_g(0, perm[i]) = base.layers[l].ln2_g(0, i);

        const auto cands = find_candidates(permuted, 3.0, 0.5);
        REQUIRE(cands.size() == base_cands.size());
        std::set<int> expected, got;
        for (const auto& c : base_cands) expected.insert(perm[c.dim]);
        for (const auto& c : cands) got.insert(c.dim);
        REQUIRE(expected == got);
    }
}

TEST_CASE("ablate zeroes both LayerNorms of the listed layers only") {
    const ParametersF p = noisy_params();
    const ParametersF ab = ablate(p, {2, 9}, {2});
    for (int dim : {2, 9}) {
        CHECK(ab.layers[1].ln1_g(0, dim) == 0.0f);
        CHECK(ab.layers[1].ln1_b(0, dim) == 0.0f);
        CHECK(ab.layers[1].ln2_g(0, dim) == 0.0f);
        CHECK(ab.layers[1].ln2_b(0, dim) == 0.0f);
        CHECK(ab.layers[0].ln2_g(0, dim) == p.layers[0].ln2_g(0, dim));
        CHECK(ab.layers[2].ln2_g(0, dim) == p.layers[2].ln2_g(0, dim));
    }
    CHECK(ab.layers[1].ln2_g(0, 0) == p.layers[1].ln2_g(0, 0));
    CHECK(ab.tok_emb == p.tok_emb);
    // original untouched
    CHECK(p.layers[1].ln2_g(0, 2) != 0.0f);

    const ParametersF all = ablate(p, {4});
    for (const auto& layer : all.layers) {
        CHECK(layer.ln1_g(0, 4) == 0.0f);
        CHECK(layer.ln2_b(0, 4) == 0.0f);
    }
    CHECK_THROWS_AS(ablate(p, {16}), std::out_of_range);
    CHECK_THROWS_AS(ablate(p, {0}, {4}), std::out_of_range);
}

TEST_CASE("mask-based and parameter-based ablation are bitwise identical") {
    const ParametersF p = noisy_params();
    const TrainingStream stream = tiny_stream();
    BatchView view{stream.row(0), stream.valid_len.data(), 3, stream.max_seq_len};

    AblationMask mask;
    mask.dims = {3, 7};
    mask.layers = {1, 3};
    const ForwardResult<float> via_mask = forward(p, view, mask);
    const ParametersF zeroed = ablate(p, mask.dims, mask.layers);
    const ForwardResult<float> via_params = forward(zeroed, view);

    REQUIRE(via_mask.mlm_logits == via_params.mlm_logits);
    for (std::size_t l = 0; l < via_mask.trace.hidden_states.size(); ++l)
        REQUIRE(via_mask.trace.hidden_states[l] == via_params.trace.hidden_states[l]);
    for (std::size_t l = 0; l < via_mask.trace.attention.size(); ++l)
        for (std::size_t h = 0; h < via_mask.trace.attention[l].size(); ++h)
            REQUIRE(via_mask.trace.attention[l][h] == via_params.trace.attention[l][h]);
}

namespace {

struct DamageFixture {
    ParametersF pretrained = noisy_params();
    ParametersF fine_tuned = noisy_params(47);
    TrainingStream stream = tiny_stream();
    ProbeDataset probe;
    DamageContext ctx;

    DamageFixture() {
        CorpusSpec spec;
        spec.vocab_size = 55;
        spec.seed = 3;
        ProbeTask task;
        task.marker1 = 15;
        task.marker2 = 16;
        probe = make_probe_dataset(task, spec, 16, 64, 8);
        ctx.pretrained = &pretrained;
        ctx.fine_tuned = &fine_tuned;
        ctx.eval_stream = &stream;
        ctx.probe_eval = &probe;
        ctx.eval_rows = 32;
        ctx.eval_seed = 77;
    }
};

}  // namespace

TEST_CASE("random baseline requires at least ten dims and avoids exclusions") {
    DamageFixture fx;
    CHECK_THROWS_AS(random_baseline_damage(fx.ctx, 9, {}, 1), ConfigError);
    const BaselineStats stats = random_baseline_damage(fx.ctx, 10, {3, 7}, 1);
    REQUIRE(stats.sampled_dims.size() == 10);
    std::set<int> seen;
    for (int dlt : stats.sampled_dims) {
        CHECK(dlt != 3);
        CHECK(dlt != 7);
        CHECK(dlt >= 0);
        CHECK(dlt < 16);
        seen.insert(dlt);
    }
    CHECK(seen.size() == 10);  // without replacement
    CHECK(stats.sigma_mlm >= 0.0);
}

TEST_CASE("measure_damage: empty dims give zero deltas; floor guards the ratio") {
    DamageFixture fx;
    BaselineStats baseline;  // zero means
    const DamageReport empty = measure_damage(fx.ctx, {}, {}, baseline, 5.0);
    CHECK(empty.delta_mlm_loss == 0.0);
    CHECK(empty.delta_probe_acc == 0.0);
    CHECK(empty.damage_ratio == 0.0);
    CHECK(!empty.verified);

    const DamageReport r = measure_damage(fx.ctx, {3}, {}, baseline, 5.0);
    // baseline probe mean is 0 -> denominator is the floor
    CHECK(r.damage_ratio ==
          doctest::Approx(r.delta_probe_acc / fx.ctx.ratio_floor).epsilon(1e-9));
}

TEST_CASE("damage verification thresholds at the requested ratio") {
    DamageFixture fx;
    const BaselineStats baseline = random_baseline_damage(fx.ctx, 10, {3}, 1);
    const DamageReport r = measure_damage(fx.ctx, {3}, {}, baseline, 5.0);
    CHECK(r.verified == (r.damage_ratio >= 5.0));
    CHECK(r.baseline_mean_probe == doctest::Approx(baseline.mean_probe).epsilon(1e-12));
}

TEST_CASE("layerwise sweep produces one report per layer plus the all-layers row") {
    DamageFixture fx;
    const BaselineStats baseline = random_baseline_damage(fx.ctx, 10, {6}, 1);
    const auto reports = layerwise_sweep(fx.ctx, 6, baseline);
    REQUIRE(reports.size() == 4);  // 3 layers + all
    for (int l = 0; l < 3; ++l) {
        REQUIRE(reports[l].layers == std::vector<int>{l + 1});
        CHECK(reports[l].dims == std::vector<int>{6});
    }
    CHECK(reports[3].layers.empty());
}

TEST_CASE("damage CSV has the documented header and one line per report") {
    DamageFixture fx;
    BaselineStats baseline;
    std::vector<DamageReport> reports = {measure_damage(fx.ctx, {3}, {}, baseline, 5.0),
                                         measure_damage(fx.ctx, {3, 5}, {2}, baseline, 5.0)};
    const auto path = std::filesystem::temp_directory_path() / "outlierlab_test_damage.csv";
    write_damage_csv(reports, path.string());
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line ==
          "dim,layer,delta_mlm_loss,delta_probe_acc,baseline_mean,baseline_sigma,damage_ratio,"
          "verified");
    REQUIRE(std::getline(in, line));
    CHECK(line.rfind("3,all,", 0) == 0);
    REQUIRE(std::getline(in, line));
    CHECK(line.rfind("3+5,2,", 0) == 0);
    CHECK(!std::getline(in, line));
    std::filesystem::remove(path);
}

TEST_CASE("evaluate_condition is deterministic and mask-driven") {
    DamageFixture fx;
    const ConditionMetrics full1 = evaluate_condition(fx.ctx, {});
    const ConditionMetrics full2 = evaluate_condition(fx.ctx, {});
    CHECK(full1.mlm_loss == full2.mlm_loss);
    CHECK(full1.probe_acc == full2.probe_acc);
    AblationMask mask;
    mask.dims = {0, 1, 2, 3, 4, 5, 6, 7};
    const ConditionMetrics cut = evaluate_condition(fx.ctx, mask);
    CHECK(cut.mlm_loss != full1.mlm_loss);  // half the width gone must move the loss
}
