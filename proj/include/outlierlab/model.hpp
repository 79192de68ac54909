#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "outlierlab/common.hpp"
#include "outlierlab/corpus.hpp"

namespace outlierlab {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int n_layers = 4;
    int hidden_dim = 64;
    int n_heads = 4;
    int ffn_dim = 256;
    int vocab_size = 2005;
    int max_seq_len = 64;
    int n_classes = 2;
    double layernorm_epsilon = 1e-12;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers <= 0 || hidden_dim <= 0 || n_heads <= 0 || ffn_dim <= 0 ||
            vocab_size <= 0 || max_seq_len <= 0 || n_classes <= 0)
            throw ConfigError("model: all dimensions must be positive");
        if (hidden_dim % n_heads != 0)
            throw ConfigError("model: hidden_dim must be divisible by n_heads");
        if (layernorm_epsilon <= 0.0) throw ConfigError("model: layernorm_epsilon must be > 0");
    }
};

template <typename S>
struct LayerParams {
    Mat<S> wq, wk, wv, wo;      // each [d x d]
    Mat<S> bq, bk, bv, bo;      // each [1 x d]
    Mat<S> w1, w2;              // [d x ffn], [ffn x d]
    Mat<S> b1, b2;              // [1 x ffn], [1 x d]
    Mat<S> ln1_g, ln1_b;        // post-attention LayerNorm
    Mat<S> ln2_g, ln2_b;        // post-FFN LayerNorm (the outlier host)
};

// All learnable weights. The MLM decoder is tied to tok_emb.
template <typename S>
struct Parameters {
    ModelConfig config;
    Mat<S> tok_emb;               // [vocab x d]
    Mat<S> pos_emb;               // [max_seq_len x d]
    Mat<S> lne_g, lne_b;          // embedding LayerNorm
    std::vector<LayerParams<S>> layers;
    Mat<S> mlm_w, mlm_b;          // [d x d], [1 x d]
    Mat<S> mlmln_g, mlmln_b;      // MLM head output LayerNorm
    Mat<S> mlm_out_b;             // [1 x vocab]
    Mat<S> cls_w, cls_b;          // [d x n_classes], [1 x n_classes]
};

// Visits every tensor in a fixed manifest order (checkpoint layout, Adam
// slots and gradient checks all rely on this order being stable).
template <typename Params, typename F>
void visit_tensors(Params& p, F&& f) {
    f("tok_emb", p.tok_emb);
    f("pos_emb", p.pos_emb);
    f("lne_g", p.lne_g);
    f("lne_b", p.lne_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l + 1) + ".";
        auto& lp = p.layers[l];
        f(prefix + "wq", lp.wq);
        f(prefix + "bq", lp.bq);
        f(prefix + "wk", lp.wk);
        f(prefix + "bk", lp.bk);
        f(prefix + "wv", lp.wv);
        f(prefix + "bv", lp.bv);
        f(prefix + "wo", lp.wo);
        f(prefix + "bo", lp.bo);
        f(prefix + "ln1_g", lp.ln1_g);
        f(prefix + "ln1_b", lp.ln1_b);
        f(prefix + "w1", lp.w1);
        f(prefix + "b1", lp.b1);
        f(prefix + "w2", lp.w2);
        f(prefix + "b2", lp.b2);
        f(prefix + "ln2_g", lp.ln2_g);
        f(prefix + "ln2_b", lp.ln2_b);
    }
    f("mlm_w", p.mlm_w);
    f("mlm_b", p.mlm_b);
    f("mlmln_g", p.mlmln_g);
    f("mlmln_b", p.mlmln_b);
    f("mlm_out_b", p.mlm_out_b);
    f("cls_w", p.cls_w);
    f("cls_b", p.cls_b);
}

// dims to knock out, at which layers (1-based; empty = all layers).
struct AblationMask {
    std::vector<int> dims;
    std::vector<int> layers;

    bool empty() const { return dims.empty(); }
    bool applies_to(int layer) const {
        if (dims.empty()) return false;
        if (layers.empty()) return true;
        for (int l : layers)
            if (l == layer) return true;
        return false;
    }
};

template <typename S>
struct LayerTrace {
    // hidden_states[l] for l = 0 (post-embedding-LN) .. L, each [n_tokens x d]
    std::vector<Mat<S>> hidden_states;
    // attention[l-1][b * H + h] is the post-softmax [T x T] map of row b, head h
    std::vector<std::vector<Mat<S>>> attention;
};

template <typename S>
struct ForwardResult {
    Mat<S> mlm_logits;  // [n_tokens x vocab]
    LayerTrace<S> trace;
};

struct BatchView {
    const TokenId* tokens = nullptr;
    const int* valid_len = nullptr;
    int n_rows = 0;
    int seq_len = 0;
};

template <typename S>
Parameters<S> init_parameters(const ModelConfig& config);

template <typename S>
Parameters<S> zeros_like(const Parameters<S>& p);

template <typename S, typename T>
Parameters<T> cast_parameters(const Parameters<S>& p);

// y_i = g_i * (x_i - mu) / sqrt(var + eps) + b_i, moments in 64-bit.
template <typename S>
void layer_norm_row(const S* x, const S* gamma, const S* beta, double eps, int d, S* y);

template <typename S>
std::vector<S> layer_norm(const std::vector<S>& x, const std::vector<S>& gamma,
                          const std::vector<S>& beta, double eps);

template <typename S>
ForwardResult<S> forward(const Parameters<S>& p, const BatchView& batch,
                         const AblationMask& ablation = {});

// Mean cross-entropy over positions whose label != MaskedBatch::kIgnore.
// logits has one row per token position (row-major over the batch).
template <typename S>
double mlm_loss(const Mat<S>& logits, const std::vector<TokenId>& labels);

template <typename S>
Mat<S> probe_forward(const Parameters<S>& p, const BatchView& batch,
                     const AblationMask& ablation = {});

// Exact analytic gradients of the mean masked cross-entropy. Returns the loss.
template <typename S>
double mlm_backward(const Parameters<S>& p, const BatchView& batch,
                    const std::vector<TokenId>& labels, const AblationMask& ablation,
                    Parameters<S>& grads);

// Same, for the classification loss on the CLS position.
template <typename S>
double probe_backward(const Parameters<S>& p, const BatchView& batch,
                      const std::vector<int>& class_labels, const AblationMask& ablation,
                      Parameters<S>& grads);

inline BatchView batch_view(const MaskedBatch& b) {
    return BatchView{b.inputs.data(), b.valid_len.data(), b.n_rows(), b.seq_len};
}

using ParametersF = Parameters<float>;
using ParametersD = Parameters<double>;

}  // namespace outlierlab

#include "outlierlab/model_impl.hpp"
