#pragma once

// Implementation of the encoder math. Everything is templated on the scalar
// so the training path runs in float while gradient checks run in double.

#include <limits>
#include <stdexcept>

namespace outlierlab {
namespace detail {

template <typename S>
S gelu(S x) {
    // tanh approximation
    const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
    const S inner = c * (x + static_cast<S>(0.044715) * x * x * x);
    return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::tanh(inner));
}

template <typename S>
S gelu_prime(S x) {
    const S c = static_cast<S>(0.7978845608028654);
    const S inner = c * (x + static_cast<S>(0.044715) * x * x * x);
    const S t = std::tanh(inner);
    const S dinner = c * (static_cast<S>(1) + static_cast<S>(3) * static_cast<S>(0.044715) * x * x);
    return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
           static_cast<S>(0.5) * x * (static_cast<S>(1) - t * t) * dinner;
}

template <typename S>
struct LnCache {
    Mat<S> xhat;            // normalized input
    std::vector<S> rstd;    // 1/sqrt(var + eps) per row
};

// Rowwise LayerNorm with 64-bit moments. gamma/beta are the effective
// (possibly ablated) vectors.
template <typename S>
void ln_forward(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta, double eps,
                LnCache<S>& cache, Mat<S>& y) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    cache.xhat.resize(n, d);
    cache.rstd.resize(n);
    y.resize(n, d);
    for (int i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += static_cast<double>(x(i, j));
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = static_cast<double>(x(i, j)) - mean;
            var += c * c;
        }
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + eps);
        cache.rstd[i] = static_cast<S>(rstd);
        for (int j = 0; j < d; ++j) {
            const S xhat = static_cast<S>((static_cast<double>(x(i, j)) - mean) * rstd);
            cache.xhat(i, j) = xhat;
            y(i, j) = gamma(0, j) * xhat + beta(0, j);
        }
    }
}

// dgamma_raw/dbeta_raw get the unmasked reductions; the caller zeroes ablated
// entries before accumulating into the gradient tensors.
template <typename S>
void ln_backward(const Mat<S>& dy, const LnCache<S>& cache, const Mat<S>& gamma,
                 Mat<S>& dx, Mat<S>& dgamma_raw, Mat<S>& dbeta_raw) {
    const int n = static_cast<int>(dy.rows());
    const int d = static_cast<int>(dy.cols());
    dx.resize(n, d);
    dgamma_raw = Mat<S>::Zero(1, d);
    dbeta_raw = Mat<S>::Zero(1, d);
    for (int i = 0; i < n; ++i) {
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxhat = static_cast<double>(dy(i, j)) * static_cast<double>(gamma(0, j));
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * static_cast<double>(cache.xhat(i, j));
            dgamma_raw(0, j) += dy(i, j) * cache.xhat(i, j);
            dbeta_raw(0, j) += dy(i, j);
        }
        const double mean_dxhat = sum_dxhat / d;
        const double mean_dxhat_xhat = sum_dxhat_xhat / d;
        const double rstd = static_cast<double>(cache.rstd[i]);
        for (int j = 0; j < d; ++j) {
            const double dxhat = static_cast<double>(dy(i, j)) * static_cast<double>(gamma(0, j));
            dx(i, j) = static_cast<S>(
                rstd * (dxhat - mean_dxhat - static_cast<double>(cache.xhat(i, j)) * mean_dxhat_xhat));
        }
    }
}

template <typename S>
struct LayerCache {
    Mat<S> q, k, v;              // [n x d]
    std::vector<Mat<S>> attn;    // B*H maps, each [T x T]
    Mat<S> ctx;                  // [n x d]
    Mat<S> r1;                   // residual before LN1
    LnCache<S> ln1;
    Mat<S> h1;
    Mat<S> u;                    // FFN pre-activation [n x ffn]
    Mat<S> g;                    // gelu(u)
    Mat<S> r2;                   // residual before LN2
    LnCache<S> ln2;
    Mat<S> h;                    // layer output
};

template <typename S>
struct EncoderCache {
    Mat<S> emb_sum;
    LnCache<S> lne;
    Mat<S> h0;
    std::vector<LayerCache<S>> layers;
};

// Effective LayerNorm affine vectors for one layer under an ablation mask.
template <typename S>
void effective_ln(const Mat<S>& g, const Mat<S>& b, bool ablated, const std::vector<int>& dims,
                  Mat<S>& g_eff, Mat<S>& b_eff) {
    g_eff = g;
    b_eff = b;
    if (ablated) {
        for (int dim : dims) {
            g_eff(0, dim) = S(0);
            b_eff(0, dim) = S(0);
        }
    }
}

template <typename S>
void check_ablation(const ModelConfig& cfg, const AblationMask& ab) {
    for (int dim : ab.dims)
        if (dim < 0 || dim >= cfg.hidden_dim)
            throw std::out_of_range("ablation dim out of range: " + std::to_string(dim));
    for (int l : ab.layers)
        if (l < 1 || l > cfg.n_layers)
            throw std::out_of_range("ablation layer out of range: " + std::to_string(l));
}

// Runs the encoder, filling the cache; the final hidden state is
// cache.layers.back().h (or cache.h0 when n_layers == 0).
template <typename S>
const Mat<S>& encoder_forward(const Parameters<S>& p, const BatchView& batch,
                              const AblationMask& ablation, EncoderCache<S>& cache,
                              LayerTrace<S>* trace) {
    const ModelConfig& cfg = p.config;
    check_ablation<S>(cfg, ablation);
    const int B = batch.n_rows;
    const int T = batch.seq_len;
    const int n = B * T;
    const int d = cfg.hidden_dim;
    const int H = cfg.n_heads;
    const int dh = d / H;
    if (T > cfg.max_seq_len) throw std::out_of_range("sequence length exceeds max_seq_len");

    cache.emb_sum.resize(n, d);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            const TokenId id = batch.tokens[b * T + t];
            if (id < 0 || id >= cfg.vocab_size)
                throw std::out_of_range("token id " + std::to_string(id) + " out of range at row " +
                                        std::to_string(b) + ", position " + std::to_string(t));
            cache.emb_sum.row(b * T + t) = p.tok_emb.row(id) + p.pos_emb.row(t);
        }
    }
    ln_forward(cache.emb_sum, p.lne_g, p.lne_b, cfg.layernorm_epsilon, cache.lne, cache.h0);
    if (trace) {
        trace->hidden_states.clear();
        trace->attention.clear();
        trace->hidden_states.push_back(cache.h0);
    }

    cache.layers.resize(cfg.n_layers);
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const Mat<S>* x = &cache.h0;
    for (int l = 1; l <= cfg.n_layers; ++l) {
        LayerCache<S>& lc = cache.layers[l - 1];
        const LayerParams<S>& lp = p.layers[l - 1];
        const bool ablated = ablation.applies_to(l);

        lc.q.noalias() = *x * lp.wq;
        lc.q.rowwise() += lp.bq.row(0);
        lc.k.noalias() = *x * lp.wk;
        lc.k.rowwise() += lp.bk.row(0);
        lc.v.noalias() = *x * lp.wv;
        lc.v.rowwise() += lp.bv.row(0);

        lc.attn.assign(static_cast<std::size_t>(B) * H, Mat<S>());
        lc.ctx.resize(n, d);
        for (int b = 0; b < B; ++b) {
            const int vl = batch.valid_len[b];
            for (int h = 0; h < H; ++h) {
                auto qb = lc.q.block(b * T, h * dh, T, dh);
                auto kb = lc.k.block(b * T, h * dh, T, dh);
                auto vb = lc.v.block(b * T, h * dh, T, dh);
                Mat<S> scores = qb * kb.transpose() * scale;
                Mat<S>& a = lc.attn[static_cast<std::size_t>(b) * H + h];
                a = Mat<S>::Zero(T, T);
                // Softmax over valid columns only; PAD columns get exact 0.
                for (int i = 0; i < T; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int j = 0; j < vl; ++j)
                        mx = std::max(mx, static_cast<double>(scores(i, j)));
                    double denom = 0.0;
                    for (int j = 0; j < vl; ++j)
                        denom += std::exp(static_cast<double>(scores(i, j)) - mx);
                    for (int j = 0; j < vl; ++j)
                        a(i, j) = static_cast<S>(std::exp(static_cast<double>(scores(i, j)) - mx) / denom);
                }
                lc.ctx.block(b * T, h * dh, T, dh).noalias() = a * vb;
            }
        }

        Mat<S> attn_out = lc.ctx * lp.wo;
        attn_out.rowwise() += lp.bo.row(0);
        lc.r1 = *x + attn_out;
        Mat<S> g1, b1v;
        effective_ln(lp.ln1_g, lp.ln1_b, ablated, ablation.dims, g1, b1v);
        ln_forward(lc.r1, g1, b1v, cfg.layernorm_epsilon, lc.ln1, lc.h1);

        lc.u.noalias() = lc.h1 * lp.w1;
        lc.u.rowwise() += lp.b1.row(0);
        lc.g = lc.u.unaryExpr([](S v) { return gelu(v); });
        Mat<S> f = lc.g * lp.w2;
        f.rowwise() += lp.b2.row(0);
        lc.r2 = lc.h1 + f;
        Mat<S> g2, b2v;
        effective_ln(lp.ln2_g, lp.ln2_b, ablated, ablation.dims, g2, b2v);
        ln_forward(lc.r2, g2, b2v, cfg.layernorm_epsilon, lc.ln2, lc.h);

        if (trace) {
            trace->hidden_states.push_back(lc.h);
            trace->attention.push_back(lc.attn);
        }
        x = &lc.h;
    }
    return *x;
}

// Backpropagates d_final (gradient w.r.t. the final hidden state) through the
// encoder, accumulating into grads.
template <typename S>
void encoder_backward(const Parameters<S>& p, const BatchView& batch,
                      const AblationMask& ablation, const EncoderCache<S>& cache,
                      Mat<S> d_final, Parameters<S>& grads) {
    const ModelConfig& cfg = p.config;
    const int B = batch.n_rows;
    const int T = batch.seq_len;
    const int d = cfg.hidden_dim;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat<S> dh_cur = std::move(d_final);
    for (int l = cfg.n_layers; l >= 1; --l) {
        const LayerCache<S>& lc = cache.layers[l - 1];
        const LayerParams<S>& lp = p.layers[l - 1];
        LayerParams<S>& lg = grads.layers[l - 1];
        const bool ablated = ablation.applies_to(l);
        const Mat<S>& x = (l == 1) ? cache.h0 : cache.layers[l - 2].h;

        Mat<S> g2, b2v;
        effective_ln(lp.ln2_g, lp.ln2_b, ablated, ablation.dims, g2, b2v);
        Mat<S> dr2, dg_raw, db_raw;
        ln_backward(dh_cur, lc.ln2, g2, dr2, dg_raw, db_raw);
        if (ablated)
            for (int dim : ablation.dims) {
                dg_raw(0, dim) = S(0);
                db_raw(0, dim) = S(0);
            }
        lg.ln2_g += dg_raw;
        lg.ln2_b += db_raw;

        // FFN
        Mat<S> dh1 = dr2;  // residual branch
        Mat<S> dgm = dr2 * lp.w2.transpose();
        lg.w2.noalias() += lc.g.transpose() * dr2;
        lg.b2 += dr2.colwise().sum();
        Mat<S> du(dgm.rows(), dgm.cols());
        for (Eigen::Index i = 0; i < du.rows(); ++i)
            for (Eigen::Index j = 0; j < du.cols(); ++j)
                du(i, j) = dgm(i, j) * gelu_prime(lc.u(i, j));
        lg.w1.noalias() += lc.h1.transpose() * du;
        lg.b1 += du.colwise().sum();
        dh1.noalias() += du * lp.w1.transpose();

        Mat<S> g1, b1v;
        effective_ln(lp.ln1_g, lp.ln1_b, ablated, ablation.dims, g1, b1v);
        Mat<S> dr1;
        ln_backward(dh1, lc.ln1, g1, dr1, dg_raw, db_raw);
        if (ablated)
            for (int dim : ablation.dims) {
                dg_raw(0, dim) = S(0);
                db_raw(0, dim) = S(0);
            }
        lg.ln1_g += dg_raw;
        lg.ln1_b += db_raw;

        // attention output projection
        Mat<S> dx = dr1;  // residual branch
        Mat<S> dctx = dr1 * lp.wo.transpose();
        lg.wo.noalias() += lc.ctx.transpose() * dr1;
        lg.bo += dr1.colwise().sum();

        Mat<S> dq = Mat<S>::Zero(B * T, d);
        Mat<S> dk = Mat<S>::Zero(B * T, d);
        Mat<S> dv = Mat<S>::Zero(B * T, d);
        for (int b = 0; b < B; ++b) {
            const int vl = batch.valid_len[b];
            for (int h = 0; h < H; ++h) {
                const Mat<S>& a = lc.attn[static_cast<std::size_t>(b) * H + h];
                auto qb = lc.q.block(b * T, h * dh, T, dh);
                auto kb = lc.k.block(b * T, h * dh, T, dh);
                auto vb = lc.v.block(b * T, h * dh, T, dh);
                auto dctxb = dctx.block(b * T, h * dh, T, dh);
                Mat<S> da = dctxb * vb.transpose();
                dv.block(b * T, h * dh, T, dh).noalias() += a.transpose() * dctxb;
                // softmax backward over valid columns, 64-bit reductions
                Mat<S> ds = Mat<S>::Zero(T, T);
                for (int i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < vl; ++j)
                        dot += static_cast<double>(da(i, j)) * static_cast<double>(a(i, j));
                    for (int j = 0; j < vl; ++j)
                        ds(i, j) = static_cast<S>(static_cast<double>(a(i, j)) *
                                                  (static_cast<double>(da(i, j)) - dot));
                }
                dq.block(b * T, h * dh, T, dh).noalias() += ds * kb * scale;
                dk.block(b * T, h * dh, T, dh).noalias() += ds.transpose() * qb * scale;
            }
        }
        lg.wq.noalias() += x.transpose() * dq;
        lg.bq += dq.colwise().sum();
        lg.wk.noalias() += x.transpose() * dk;
        lg.bk += dk.colwise().sum();
        lg.wv.noalias() += x.transpose() * dv;
        lg.bv += dv.colwise().sum();
        dx.noalias() += dq * lp.wq.transpose();
        dx.noalias() += dk * lp.wk.transpose();
        dx.noalias() += dv * lp.wv.transpose();
        dh_cur = std::move(dx);
    }

    Mat<S> demb, dg_raw, db_raw;
    ln_backward(dh_cur, cache.lne, p.lne_g, demb, dg_raw, db_raw);
    grads.lne_g += dg_raw;
    grads.lne_b += db_raw;
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const TokenId id = batch.tokens[b * T + t];
            grads.tok_emb.row(id) += demb.row(b * T + t);
            grads.pos_emb.row(t) += demb.row(b * T + t);
        }
}

template <typename S>
struct MlmHeadCache {
    Mat<S> h_sel;  // gathered hidden rows
    Mat<S> t1;     // dense pre-activation
    Mat<S> t2;     // gelu(t1)
    LnCache<S> ln;
    Mat<S> t3;     // normalized
};

template <typename S>
Mat<S> mlm_head_forward(const Parameters<S>& p, const Mat<S>& hidden,
                        const std::vector<int>& positions, MlmHeadCache<S>& cache) {
    const int m = static_cast<int>(positions.size());
    cache.h_sel.resize(m, p.config.hidden_dim);
    for (int i = 0; i < m; ++i) cache.h_sel.row(i) = hidden.row(positions[i]);
    cache.t1.noalias() = cache.h_sel * p.mlm_w;
    cache.t1.rowwise() += p.mlm_b.row(0);
    cache.t2 = cache.t1.unaryExpr([](S v) { return gelu(v); });
    ln_forward(cache.t2, p.mlmln_g, p.mlmln_b, p.config.layernorm_epsilon, cache.ln, cache.t3);
    Mat<S> logits = cache.t3 * p.tok_emb.transpose();
    logits.rowwise() += p.mlm_out_b.row(0);
    return logits;
}

// Cross-entropy over rows of logits; targets indexes columns. Returns mean
// loss and fills dlogits with the 1/m-scaled softmax-minus-onehot gradient.
template <typename S>
double cross_entropy(const Mat<S>& logits, const std::vector<int>& targets, Mat<S>* dlogits) {
    const int m = static_cast<int>(logits.rows());
    const int v = static_cast<int>(logits.cols());
    if (m == 0) throw std::invalid_argument("cross_entropy: no target positions");
    if (dlogits) dlogits->resize(m, v);
    double loss = 0.0;
    const double inv_m = 1.0 / m;
    for (int i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(logits(i, j)));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(logits(i, j)) - mx);
        const double lse = mx + std::log(denom);
        loss += lse - static_cast<double>(logits(i, targets[i]));
        if (dlogits) {
            for (int j = 0; j < v; ++j) {
                double g = std::exp(static_cast<double>(logits(i, j)) - lse) * inv_m;
                if (j == targets[i]) g -= inv_m;
                (*dlogits)(i, j) = static_cast<S>(g);
            }
        }
    }
    return loss * inv_m;
}

}  // namespace detail

template <typename S>
Parameters<S> allocate_parameters(const ModelConfig& config) {
    config.validate();
    Parameters<S> p;
    p.config = config;
    const int d = config.hidden_dim;
    p.tok_emb.resize(config.vocab_size, d);
    p.pos_emb.resize(config.max_seq_len, d);
    p.lne_g.resize(1, d);
    p.lne_b.resize(1, d);
    p.layers.resize(config.n_layers);
    for (auto& lp : p.layers) {
        lp.wq.resize(d, d);
        lp.wk.resize(d, d);
        lp.wv.resize(d, d);
        lp.wo.resize(d, d);
        lp.bq.resize(1, d);
        lp.bk.resize(1, d);
        lp.bv.resize(1, d);
        lp.bo.resize(1, d);
        lp.w1.resize(d, config.ffn_dim);
        lp.b1.resize(1, config.ffn_dim);
        lp.w2.resize(config.ffn_dim, d);
        lp.b2.resize(1, d);
        lp.ln1_g.resize(1, d);
        lp.ln1_b.resize(1, d);
        lp.ln2_g.resize(1, d);
        lp.ln2_b.resize(1, d);
    }
    p.mlm_w.resize(d, d);
    p.mlm_b.resize(1, d);
    p.mlmln_g.resize(1, d);
    p.mlmln_b.resize(1, d);
    p.mlm_out_b.resize(1, config.vocab_size);
    p.cls_w.resize(d, config.n_classes);
    p.cls_b.resize(1, config.n_classes);
    return p;
}

template <typename S>
Parameters<S> init_parameters(const ModelConfig& config) {
    Parameters<S> p = allocate_parameters<S>(config);
    Rng rng(config.seed);
    visit_tensors(p, [&](const std::string& name, Mat<S>& m) {
        const std::string leaf = name.substr(name.find('.') + 1);
        if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0) {
            m.setOnes();
        } else if ((name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0) ||
                   leaf[0] == 'b') {
            m.setZero();
        } else {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j)
                    m(i, j) = static_cast<S>(rng.truncated_normal(config.init_std, 2.0));
        }
    });
    return p;
}

template <typename S>
Parameters<S> zeros_like(const Parameters<S>& p) {
    Parameters<S> z = allocate_parameters<S>(p.config);
    visit_tensors(z, [](const std::string&, Mat<S>& m) { m.setZero(); });
    return z;
}

template <typename S, typename T>
Parameters<T> cast_parameters(const Parameters<S>& p) {
    Parameters<T> out = allocate_parameters<T>(p.config);
    std::vector<const Mat<S>*> src;
    visit_tensors(p, [&](const std::string&, const Mat<S>& m) { src.push_back(&m); });
    std::vector<Mat<T>*> dst;
    visit_tensors(out, [&](const std::string&, Mat<T>& m) { dst.push_back(&m); });
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<T>();
    return out;
}

template <typename S>
void layer_norm_row(const S* x, const S* gamma, const S* beta, double eps, int d, S* y) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += static_cast<double>(x[j]);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double c = static_cast<double>(x[j]) - mean;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
        y[j] = static_cast<S>(gamma[j] * static_cast<S>((static_cast<double>(x[j]) - mean) * rstd)) +
               beta[j];
}

template <typename S>
std::vector<S> layer_norm(const std::vector<S>& x, const std::vector<S>& gamma,
                          const std::vector<S>& beta, double eps) {
    if (x.size() != gamma.size() || x.size() != beta.size())
        throw std::invalid_argument("layer_norm: size mismatch");
    std::vector<S> y(x.size());
    layer_norm_row(x.data(), gamma.data(), beta.data(), eps, static_cast<int>(x.size()), y.data());
    return y;
}

template <typename S>
ForwardResult<S> forward(const Parameters<S>& p, const BatchView& batch,
                         const AblationMask& ablation) {
    ForwardResult<S> result;
    detail::EncoderCache<S> cache;
    const Mat<S>& hidden = detail::encoder_forward(p, batch, ablation, cache, &result.trace);
    std::vector<int> positions(static_cast<std::size_t>(batch.n_rows) * batch.seq_len);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    detail::MlmHeadCache<S> head;
    result.mlm_logits = detail::mlm_head_forward(p, hidden, positions, head);
    return result;
}

template <typename S>
double mlm_loss(const Mat<S>& logits, const std::vector<TokenId>& labels) {
    std::vector<int> rows, targets;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != MaskedBatch::kIgnore) {
            rows.push_back(static_cast<int>(i));
            targets.push_back(labels[i]);
        }
    if (rows.empty()) throw std::invalid_argument("mlm_loss: no label positions");
    Mat<S> sel(rows.size(), logits.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) sel.row(i) = logits.row(rows[i]);
    return detail::cross_entropy<S>(sel, targets, nullptr);
}

template <typename S>
Mat<S> probe_forward(const Parameters<S>& p, const BatchView& batch, const AblationMask& ablation) {
    detail::EncoderCache<S> cache;
    const Mat<S>& hidden = detail::encoder_forward<S>(p, batch, ablation, cache, nullptr);
    Mat<S> h_cls(batch.n_rows, p.config.hidden_dim);
    for (int b = 0; b < batch.n_rows; ++b) h_cls.row(b) = hidden.row(b * batch.seq_len);
    Mat<S> logits = h_cls * p.cls_w;
    logits.rowwise() += p.cls_b.row(0);
    return logits;
}

template <typename S>
double mlm_backward(const Parameters<S>& p, const BatchView& batch,
                    const std::vector<TokenId>& labels, const AblationMask& ablation,
                    Parameters<S>& grads) {
    detail::EncoderCache<S> cache;
    const Mat<S>& hidden = detail::encoder_forward<S>(p, batch, ablation, cache, nullptr);
    std::vector<int> positions, targets;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != MaskedBatch::kIgnore) {
            positions.push_back(static_cast<int>(i));
            targets.push_back(labels[i]);
        }
    if (positions.empty()) throw std::invalid_argument("mlm_backward: no label positions");

    detail::MlmHeadCache<S> head;
    Mat<S> logits = detail::mlm_head_forward(p, hidden, positions, head);
    Mat<S> dlogits;
    const double loss = detail::cross_entropy<S>(logits, targets, &dlogits);

    grads.mlm_out_b += dlogits.colwise().sum();
    Mat<S> dt3 = dlogits * p.tok_emb;
    grads.tok_emb.noalias() += dlogits.transpose() * head.t3;
    Mat<S> dt2, dg_raw, db_raw;
    detail::ln_backward(dt3, head.ln, p.mlmln_g, dt2, dg_raw, db_raw);
    grads.mlmln_g += dg_raw;
    grads.mlmln_b += db_raw;
    Mat<S> dt1(dt2.rows(), dt2.cols());
    for (Eigen::Index i = 0; i < dt1.rows(); ++i)
        for (Eigen::Index j = 0; j < dt1.cols(); ++j)
            dt1(i, j) = dt2(i, j) * detail::gelu_prime(head.t1(i, j));
    grads.mlm_w.noalias() += head.h_sel.transpose() * dt1;
    grads.mlm_b += dt1.colwise().sum();
    Mat<S> dh_sel = dt1 * p.mlm_w.transpose();

    Mat<S> d_hidden = Mat<S>::Zero(hidden.rows(), hidden.cols());
    for (std::size_t i = 0; i < positions.size(); ++i) d_hidden.row(positions[i]) += dh_sel.row(i);
    detail::encoder_backward<S>(p, batch, ablation, cache, std::move(d_hidden), grads);
    return loss;
}

template <typename S>
double probe_backward(const Parameters<S>& p, const BatchView& batch,
                      const std::vector<int>& class_labels, const AblationMask& ablation,
                      Parameters<S>& grads) {
    detail::EncoderCache<S> cache;
    const Mat<S>& hidden = detail::encoder_forward<S>(p, batch, ablation, cache, nullptr);
    Mat<S> h_cls(batch.n_rows, p.config.hidden_dim);
    for (int b = 0; b < batch.n_rows; ++b) h_cls.row(b) = hidden.row(b * batch.seq_len);
    Mat<S> logits = h_cls * p.cls_w;
    logits.rowwise() += p.cls_b.row(0);
    Mat<S> dlogits;
    const double loss = detail::cross_entropy<S>(logits, class_labels, &dlogits);

    grads.cls_w.noalias() += h_cls.transpose() * dlogits;
    grads.cls_b += dlogits.colwise().sum();
    Mat<S> dh_cls = dlogits * p.cls_w.transpose();
    Mat<S> d_hidden = Mat<S>::Zero(hidden.rows(), hidden.cols());
    for (int b = 0; b < batch.n_rows; ++b) d_hidden.row(b * batch.seq_len) += dh_cls.row(b);
    detail::encoder_backward<S>(p, batch, ablation, cache, std::move(d_hidden), grads);
    return loss;
}

}  // namespace outlierlab
