#include <cmath>
#include <vector>

#include "doctest.h"
#include "outlierlab/model.hpp"

using namespace outlierlab;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 21) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.hidden_dim = 16;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.vocab_size = 37;
    cfg.max_seq_len = 8;
    cfg.n_classes = 2;
    cfg.seed = seed;
    return cfg;
}

struct TinyBatch {
    std::vector<TokenId> tokens;
    std::vector<int> valid_len;
    std::vector<TokenId> labels;       // per position, kIgnore where unmasked
    std::vector<int> class_labels;     // per row, for the probe loss

    BatchView view() const {
        return BatchView{tokens.data(), valid_len.data(), static_cast<int>(valid_len.size()),
                         static_cast<int>(tokens.size() / valid_len.size())};
    }
};

TinyBatch tiny_batch(const ModelConfig& cfg, std::uint64_t seed = 77) {
    TinyBatch b;
    Rng rng(seed);
    const int B = 2, T = cfg.max_seq_len;
    b.valid_len = {T, T - 3};
    b.labels.assign(B * T, MaskedBatch::kIgnore);
    for (int r = 0; r < B; ++r) {
        for (int t = 0; t < T; ++t) {
            TokenId tok;
            if (t == 0) tok = Vocabulary::kCls;
            else if (t >= b.valid_len[r]) tok = Vocabulary::kPad;
            else tok = Vocabulary::kNumSpecial +
                       static_cast<TokenId>(rng.uniform_int(cfg.vocab_size - Vocabulary::kNumSpecial));
            b.tokens.push_back(tok);
        }
        // a few masked positions with labels, inputs replaced by MASK
        for (int t : {1, 3}) {
            b.labels[r * T + t] = b.tokens[r * T + t];
            b.tokens[r * T + t] = Vocabulary::kMask;
        }
        b.class_labels.push_back(r % 2);
    }
    return b;
}

// independent probe-loss oracle: mean softmax cross-entropy over CLS logits
double probe_loss_oracle(const Parameters<double>& p, const TinyBatch& b) {
    const Mat<double> logits = probe_forward(p, b.view());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        double mx = logits.row(r).maxCoeff();
        double denom = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) denom += std::exp(logits(r, c) - mx);
        loss += std::log(denom) - (logits(r, b.class_labels[r]) - mx);
    }
    return loss / static_cast<double>(logits.rows());
}

double mlm_loss_at(const Parameters<double>& p, const TinyBatch& b) {
    const ForwardResult<double> res = forward(p, b.view());
    return mlm_loss(res.mlm_logits, b.labels);
}

}  // namespace

TEST_CASE("layer_norm matches the hand-computed example") {
    const std::vector<double> x = {1.0, 2.0, 3.0};
    const std::vector<double> ones = {1.0, 1.0, 1.0};
    const std::vector<double> zeros = {0.0, 0.0, 0.0};
    const auto y = layer_norm(x, ones, zeros, 1e-12);
    // (x - 2) / sqrt(2/3)
    CHECK(y[0] == doctest::Approx(-1.2247448714).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    CHECK(y[2] == doctest::Approx(1.2247448714).epsilon(1e-9));

    const std::vector<double> gamma = {2.0, 2.0, 2.0};
    const std::vector<double> beta = {1.0, 1.0, 1.0};
    const auto z = layer_norm(x, gamma, beta, 1e-12);
    CHECK(z[0] == doctest::Approx(2.0 * y[0] + 1.0).epsilon(1e-9));
    CHECK(z[2] == doctest::Approx(2.0 * y[2] + 1.0).epsilon(1e-9));
}

TEST_CASE("mlm_loss oracles: uniform, hand value, saturation") {
    Mat<double> logits(1, 3);
    logits << 0.0, 0.0, 0.0;
    CHECK(mlm_loss(logits, {1}) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    logits << 1.0, 2.0, 3.0;
    // logsumexp([1,2,3]) - 3 = 0.40760596444...
    CHECK(mlm_loss(logits, {2}) == doctest::Approx(0.4076059644).epsilon(1e-9));

    logits << 50.0, 0.0, 0.0;
    CHECK(mlm_loss(logits, {0}) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(mlm_loss(logits, {1}) == doctest::Approx(50.0).epsilon(1e-9));

    // ignored positions contribute nothing
    Mat<double> two(2, 3);
    two << 0.0, 0.0, 0.0, 99.0, -99.0, 0.0;
    CHECK(mlm_loss(two, {1, MaskedBatch::kIgnore}) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("initialization: gains one, biases zero, weights truncated-normal") {
    const ModelConfig cfg = tiny_config();
    Parameters<float> p = init_parameters<float>(cfg);
    CHECK(p.lne_g.isOnes());
    CHECK(p.lne_b.isZero());
    CHECK(p.layers[0].ln1_g.isOnes());
    CHECK(p.layers[1].ln2_b.isZero());
    CHECK(p.mlm_out_b.isZero());
    CHECK(p.layers[0].bq.isZero());
    CHECK(p.cls_b.isZero());

    double sumsq = 0.0;
    for (Eigen::Index i = 0; i < p.tok_emb.size(); ++i) {
        REQUIRE(std::abs(p.tok_emb.data()[i]) <= 0.04f);
        sumsq += static_cast<double>(p.tok_emb.data()[i]) * p.tok_emb.data()[i];
    }
    const double std_est = std::sqrt(sumsq / static_cast<double>(p.tok_emb.size()));
    CHECK(std_est == doctest::Approx(0.02 * 0.88).epsilon(0.15));  // clipped-normal std

    Parameters<float> q = init_parameters<float>(cfg);
    CHECK(p.tok_emb == q.tok_emb);
    ModelConfig cfg2 = cfg;
    cfg2.seed = 22;
    Parameters<float> r = init_parameters<float>(cfg2);
    CHECK(p.tok_emb != r.tok_emb);
}

TEST_CASE("attention rows are a distribution over valid columns, PAD exactly 0") {
    const ModelConfig cfg = tiny_config();
    const Parameters<float> p = init_parameters<float>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    const ForwardResult<float> res = forward(p, b.view());
    REQUIRE(res.trace.attention.size() == 2);
    const int T = cfg.max_seq_len;
    for (int l = 0; l < 2; ++l) {
        for (int row = 0; row < 2; ++row) {
            const int vl = b.valid_len[row];
            for (int h = 0; h < cfg.n_heads; ++h) {
                const Mat<float>& a = res.trace.attention[l][row * cfg.n_heads + h];
                REQUIRE(a.rows() == T);
                for (int i = 0; i < T; ++i) {
                    double sum = 0.0;
                    for (int j = 0; j < T; ++j) {
                        if (j >= vl) REQUIRE(a(i, j) == 0.0f);
                        else REQUIRE(a(i, j) >= 0.0f);
                        sum += a(i, j);
                    }
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
                }
            }
        }
    }
}

TEST_CASE("ablated coordinates are exactly zero in traced hidden states") {
    const ModelConfig cfg = tiny_config();
    const Parameters<float> p = init_parameters<float>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    AblationMask mask;
    mask.dims = {3, 11};
    mask.layers = {2};
    const ForwardResult<float> res = forward(p, b.view(), mask);
    // layer 1 untouched, layer 2 zeroed at the ablated dims
    bool layer1_nonzero = false;
    for (Eigen::Index r = 0; r < res.trace.hidden_states[1].rows(); ++r) {
        if (res.trace.hidden_states[1](r, 3) != 0.0f) layer1_nonzero = true;
        CHECK(res.trace.hidden_states[2](r, 3) == 0.0f);
        CHECK(res.trace.hidden_states[2](r, 11) == 0.0f);
    }
    CHECK(layer1_nonzero);

    AblationMask all_layers;
    all_layers.dims = {5};
    const ForwardResult<float> res2 = forward(p, b.view(), all_layers);
    for (int l = 1; l <= cfg.n_layers; ++l)
        for (Eigen::Index r = 0; r < res2.trace.hidden_states[l].rows(); ++r)
            REQUIRE(res2.trace.hidden_states[l](r, 5) == 0.0f);
}

TEST_CASE("ablation rejects out-of-range dims and layers") {
    const ModelConfig cfg = tiny_config();
    const Parameters<float> p = init_parameters<float>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    AblationMask bad_dim;
    bad_dim.dims = {16};
    CHECK_THROWS_AS(forward(p, b.view(), bad_dim), std::out_of_range);
    AblationMask bad_layer;
    bad_layer.dims = {0};
    bad_layer.layers = {3};
    CHECK_THROWS_AS(forward(p, b.view(), bad_layer), std::out_of_range);
}

TEST_CASE("out-of-range token ids are reported with row and position") {
    const ModelConfig cfg = tiny_config();
    const Parameters<float> p = init_parameters<float>(cfg);
    TinyBatch b = tiny_batch(cfg);
    b.tokens[5] = 37;
    CHECK_THROWS_WITH_AS(forward(p, b.view()), doctest::Contains("out of range"),
                         std::out_of_range);
}

TEST_CASE("mlm_backward loss agrees with the full-logits path") {
    const ModelConfig cfg = tiny_config();
    const Parameters<double> p = init_parameters<double>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    Parameters<double> grads = zeros_like(p);
    const double loss = mlm_backward(p, b.view(), b.labels, {}, grads);
    CHECK(loss == doctest::Approx(mlm_loss_at(p, b)).epsilon(1e-12));
}

TEST_CASE("every MLM gradient matches central finite differences") {
    const ModelConfig cfg = tiny_config();
    Parameters<double> p = init_parameters<double>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    Parameters<double> grads = zeros_like(p);
    mlm_backward(p, b.view(), b.labels, {}, grads);

    const double h = 1e-4;
    double worst = 0.0;
    visit_tensors(p, [&](const std::string& name, Mat<double>& t) {
        if (name.rfind("cls_", 0) == 0) return;  // not part of the MLM loss
        Mat<double>* g = nullptr;
        visit_tensors(grads, [&](const std::string& gname, Mat<double>& gt) {
            if (gname == name) g = &gt;
        });
        REQUIRE(g != nullptr);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double lp = mlm_loss_at(p, b);
            t.data()[i] = orig - h;
            const double lm = mlm_loss_at(p, b);
            t.data()[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = g->data()[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    });
    CHECK(worst < 1e-4);
}

TEST_CASE("every probe gradient matches central finite differences") {
    const ModelConfig cfg = tiny_config();
    Parameters<double> p = init_parameters<double>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    Parameters<double> grads = zeros_like(p);
    const double loss = probe_backward(p, b.view(), b.class_labels, {}, grads);
    CHECK(loss == doctest::Approx(probe_loss_oracle(p, b)).epsilon(1e-10));

    const double h = 1e-4;
    double worst = 0.0;
    visit_tensors(p, [&](const std::string& name, Mat<double>& t) {
        if (name.rfind("mlm", 0) == 0) return;  // MLM head unused by the probe
        Mat<double>* g = nullptr;
        visit_tensors(grads, [&](const std::string& gname, Mat<double>& gt) {
            if (gname == name) g = &gt;
        });
        REQUIRE(g != nullptr);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double lp = probe_loss_oracle(p, b);
            t.data()[i] = orig - h;
            const double lm = probe_loss_oracle(p, b);
            t.data()[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = g->data()[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    });
    CHECK(worst < 1e-4);
}

TEST_CASE("gradients under ablation also match finite differences") {
    const ModelConfig cfg = tiny_config();
    Parameters<double> p = init_parameters<double>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    AblationMask mask;
    mask.dims = {2, 9};
    mask.layers = {1};
    Parameters<double> grads = zeros_like(p);
    mlm_backward(p, b.view(), b.labels, mask, grads);

    // ablated LayerNorm coordinates receive exactly zero gradient
    CHECK(grads.layers[0].ln1_g(0, 2) == 0.0);
    CHECK(grads.layers[0].ln2_b(0, 9) == 0.0);

    auto loss_at = [&]() {
        const ForwardResult<double> res = forward(p, b.view(), mask);
        return mlm_loss(res.mlm_logits, b.labels);
    };
    const double h = 1e-4;
    double worst = 0.0;
    // spot-check a couple of tensors end to end under the mask
    for (Mat<double>* t : {&p.tok_emb, &p.layers[0].w1, &p.layers[1].ln2_g}) {
        Mat<double>* g = nullptr;
        visit_tensors(p, [&](const std::string& name, Mat<double>& pt) {
            if (&pt == t)
                visit_tensors(grads, [&](const std::string& gname, Mat<double>& gt) {
                    if (gname == name) g = &gt;
                });
        });
        REQUIRE(g != nullptr);
        for (Eigen::Index i = 0; i < t->size(); i += 7) {
            const double orig = t->data()[i];
            t->data()[i] = orig + h;
            const double lp = loss_at();
            t->data()[i] = orig - h;
            const double lm = loss_at();
            t->data()[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = g->data()[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("rows in a batch do not interact") {
    const ModelConfig cfg = tiny_config();
    const Parameters<float> p = init_parameters<float>(cfg);
    const TinyBatch b = tiny_batch(cfg);
    const ForwardResult<float> both = forward(p, b.view());
    // row 0 alone
    BatchView single{b.tokens.data(), b.valid_len.data(), 1, cfg.max_seq_len};
    const ForwardResult<float> alone = forward(p, single);
    for (int t = 0; t < cfg.max_seq_len; ++t)
        for (int dcol = 0; dcol < cfg.hidden_dim; ++dcol)
            REQUIRE(both.trace.hidden_states[2](t, dcol) ==
                    alone.trace.hidden_states[2](t, dcol));
}
