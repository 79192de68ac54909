#include "outlierlab/train.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace outlierlab {

double lr_at_step(const TrainConfig& cfg, int step) {
    if (step <= 0) return 0.0;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
    const int decay_span = cfg.total_steps - cfg.warmup_steps;
    if (decay_span <= 0) return cfg.peak_lr;
    const double frac = static_cast<double>(cfg.total_steps - step) / decay_span;
    return cfg.peak_lr * std::max(0.0, frac);
}

void adam_step(ParametersF& params, const ParametersF& grads, AdamState& state, int step,
               const TrainConfig& cfg) {
    std::vector<Mat<float>*> ps, ms, vs;
    std::vector<const Mat<float>*> gs;
    visit_tensors(params, [&](const std::string&, Mat<float>& m) { ps.push_back(&m); });
    visit_tensors(grads, [&](const std::string&, const Mat<float>& m) { gs.push_back(&m); });
    visit_tensors(state.m, [&](const std::string&, Mat<float>& m) { ms.push_back(&m); });
    visit_tensors(state.v, [&](const std::string&, Mat<float>& m) { vs.push_back(&m); });

    const double lr = lr_at_step(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step);
    for (std::size_t t = 0; t < ps.size(); ++t) {
        float* p = ps[t]->data();
        const float* g = gs[t]->data();
        float* m = ms[t]->data();
        float* v = vs[t]->data();
        const std::size_t n = ps[t]->size();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p[i] = static_cast<float>(
                p[i] - lr * (mhat / (std::sqrt(vhat) + cfg.adam_epsilon) + cfg.weight_decay * p[i]));
        }
    }
}

namespace {

Checkpoint snapshot(const ModelConfig& mc, const TrainConfig& tc, const ParametersF& params,
                    const AdamState& adam, int step, double running_loss) {
    Checkpoint c{mc, tc, params, adam, step, "SPLIT", running_loss};
    return c;
}

}  // namespace

TrainResult train_mlm(const TrainConfig& train_config, const ModelConfig& model_config,
                      const TrainingStream& stream) {
    train_config.validate();
    model_config.validate();
    if (stream.n_rows() == 0) throw ConfigError("train_mlm: empty stream");

    ParametersF params = init_parameters<float>(model_config);
    AdamState adam{zeros_like(params), zeros_like(params)};
    Rng order_rng(derive_seed(train_config.seed, "batch-order"));

    TrainResult result;
    double running = 0.0;
    const std::string scheme = scheme_name(stream.scheme);
    auto emit = [&](int step) {
        Checkpoint c = snapshot(model_config, train_config, params, adam, step, running);
        c.scheme = scheme;
        result.checkpoints.push_back(std::move(c));
    };
    emit(0);

    ParametersF grads = zeros_like(params);
    for (int step = 1; step <= train_config.total_steps; ++step) {
        std::vector<int> rows(train_config.batch_size);
        for (int& r : rows) r = static_cast<int>(order_rng.uniform_int(stream.n_rows()));
        const std::uint64_t mask_seed =
            derive_seed(train_config.seed, "mask-step-" + std::to_string(step));
        MaskedBatch batch = mask_batch(stream, rows, model_config.vocab_size,
                                       train_config.mask_rate, mask_seed);
        if (batch.n_label_positions() == 0) {
            result.step_losses.push_back(result.step_losses.empty() ? 0.0 : result.step_losses.back());
            continue;
        }
        visit_tensors(grads, [](const std::string&, Mat<float>& m) { m.setZero(); });
        const double loss = mlm_backward(params, batch_view(batch), batch.labels, {}, grads);
        adam_step(params, grads, adam, step, train_config);
        result.step_losses.push_back(loss);
        // running loss: mean over the trailing 100 steps
        const std::size_t k = std::min<std::size_t>(result.step_losses.size(), 100);
        running = std::accumulate(result.step_losses.end() - k, result.step_losses.end(), 0.0) / k;
        if (step % train_config.checkpoint_interval == 0 && step < train_config.total_steps)
            emit(step);
    }
    if (train_config.total_steps > 0) emit(train_config.total_steps);
    return result;
}

ProbeDataset make_probe_dataset(const ProbeTask& task, const CorpusSpec& corpus_spec,
                                int max_seq_len, int n_examples, std::uint64_t seed) {
    task.validate(corpus_spec.vocab_size);
    ProbeDataset ds;
    ds.rows.scheme = Scheme::Split;
    ds.rows.max_seq_len = max_seq_len;

    // Gather enough base rows from the sentence model.
    CorpusSpec cs = corpus_spec;
    cs.seed = derive_seed(seed, "probe-base-corpus");
    const double avg_len = 0.5 * (cs.min_sentence_len + cs.max_sentence_len) + 1.0;
    cs.n_documents = std::max(
        4, static_cast<int>(1.3 * n_examples * max_seq_len /
                            (cs.sentences_per_document * avg_len)));
    TrainingStream base;
    for (;;) {
        const Corpus corpus = generate_corpus(cs);
        base = apply_tokenization_scheme(corpus, Scheme::Split, max_seq_len, 0.5, 0.0,
                                         derive_seed(seed, "probe-pack"));
        if (base.n_rows() >= n_examples) break;
        cs.n_documents *= 2;
    }

    Rng rng(derive_seed(seed, "probe-plant"));
    const int content_lo = Vocabulary::kNumSpecial;
    const int content_n = corpus_spec.vocab_size - content_lo;
    auto fresh_content = [&]() {
        TokenId t;
        do {
            t = content_lo + static_cast<TokenId>(rng.uniform_int(content_n));
        } while (t == task.marker1 || t == task.marker2);
        return t;
    };

    for (int i = 0; i < n_examples; ++i) {
        const TokenId* src = base.row(i);
        const int vl = base.valid_len[i];
        std::vector<TokenId> row(src, src + max_seq_len);
        std::vector<int> content_pos;
        for (int j = 0; j < vl; ++j) {
            if (row[j] == task.marker1 || row[j] == task.marker2) row[j] = fresh_content();
            if (row[j] >= content_lo) content_pos.push_back(j);
        }
        const int label = static_cast<int>(rng.uniform_int(2));
        if (content_pos.size() >= 2) {
            const int a = static_cast<int>(rng.uniform_int(content_pos.size()));
            std::vector<int> near, far;
            for (std::size_t c = 0; c < content_pos.size(); ++c) {
                if (static_cast<int>(c) == a) continue;
                const int dist = std::abs(content_pos[c] - content_pos[a]);
                (dist <= task.window ? near : far).push_back(content_pos[c]);
            }
            if (label == 1 && !near.empty()) {
                row[content_pos[a]] = task.marker1;
                row[near[rng.uniform_int(near.size())]] = task.marker2;
            } else if (label == 0) {
                row[content_pos[a]] = task.marker1;
                // half the negatives also contain marker2, but out of range
                if (!far.empty() && rng.uniform() < 0.5)
                    row[far[rng.uniform_int(far.size())]] = task.marker2;
            }
            // label==1 with no near position is left unplanted; it is a
            // valid negative, so fix the label
        }
        int final_label = 0;
        for (std::size_t p1 = 0; p1 < row.size(); ++p1)
            if (row[p1] == task.marker1)
                for (std::size_t p2 = 0; p2 < row.size(); ++p2)
                    if (row[p2] == task.marker2 &&
                        std::abs(static_cast<int>(p1) - static_cast<int>(p2)) <= task.window)
                        final_label = 1;
        ds.rows.tokens.insert(ds.rows.tokens.end(), row.begin(), row.end());
        ds.rows.valid_len.push_back(vl);
        ds.labels.push_back(final_label);
    }
    return ds;
}

double probe_accuracy(const ParametersF& params, const ProbeDataset& eval_set,
                      const AblationMask& ablation) {
    const int n = eval_set.rows.n_rows();
    if (n == 0) throw ConfigError("probe_accuracy: empty eval set");
    const int chunk = 64;
    int correct = 0;
    for (int start = 0; start < n; start += chunk) {
        const int m = std::min(chunk, n - start);
        BatchView view{eval_set.rows.row(start), eval_set.rows.valid_len.data() + start, m,
                       eval_set.rows.max_seq_len};
        Mat<float> logits = probe_forward(params, view, ablation);
        for (int b = 0; b < m; ++b) {
            Eigen::Index best;
            logits.row(b).maxCoeff(&best);
            if (static_cast<int>(best) == eval_set.labels[start + b]) ++correct;
        }
    }
    return static_cast<double>(correct) / n;
}

double eval_mlm_loss(const ParametersF& params, const TrainingStream& stream, int max_rows,
                     double mask_rate, std::uint64_t seed, const AblationMask& ablation) {
    const int n = std::min(stream.n_rows(), max_rows);
    if (n == 0) throw ConfigError("eval_mlm_loss: empty stream");
    const int chunk = 64;
    double total_nll = 0.0;
    std::int64_t total_positions = 0;
    for (int start = 0; start < n; start += chunk) {
        const int m = std::min(chunk, n - start);
        std::vector<int> rows(m);
        for (int i = 0; i < m; ++i) rows[i] = start + i;
        MaskedBatch batch = mask_batch(stream, rows, params.config.vocab_size, mask_rate,
                                       derive_seed(seed, "eval-mask-" + std::to_string(start)));
        std::vector<int> positions, targets;
        for (std::size_t i = 0; i < batch.labels.size(); ++i)
            if (batch.labels[i] != MaskedBatch::kIgnore) {
                positions.push_back(static_cast<int>(i));
                targets.push_back(batch.labels[i]);
            }
        if (positions.empty()) continue;
        detail::EncoderCache<float> cache;
        const Mat<float>& hidden =
            detail::encoder_forward(params, batch_view(batch), ablation, cache, static_cast<LayerTrace<float>*>(nullptr));
        detail::MlmHeadCache<float> head;
        Mat<float> logits = detail::mlm_head_forward(params, hidden, positions, head);
        const double loss = detail::cross_entropy<float>(logits, targets, nullptr);
        total_nll += loss * static_cast<double>(positions.size());
        total_positions += static_cast<std::int64_t>(positions.size());
    }
    if (total_positions == 0) throw ConfigError("eval_mlm_loss: no masked positions");
    return total_nll / static_cast<double>(total_positions);
}

FineTuneResult fine_tune_probe(const Checkpoint& start, const ProbeTask& task,
                               const CorpusSpec& corpus_spec, const TrainConfig& ft_config) {
    ft_config.validate();
    const int T = start.model_config.max_seq_len;
    ProbeDataset train_set = make_probe_dataset(task, corpus_spec, T, task.n_train,
                                                derive_seed(ft_config.seed, "probe-train"));
    ProbeDataset eval_set = make_probe_dataset(task, corpus_spec, T, task.n_eval,
                                               derive_seed(ft_config.seed, "probe-eval"));

    FineTuneResult result;
    result.checkpoint = start;
    ParametersF& params = result.checkpoint.params;
    AdamState adam{zeros_like(params), zeros_like(params)};
    ParametersF grads = zeros_like(params);
    Rng order_rng(derive_seed(ft_config.seed, "probe-batch-order"));

    for (int step = 1; step <= ft_config.total_steps; ++step) {
        std::vector<TokenId> tokens;
        std::vector<int> valid, labels;
        tokens.reserve(static_cast<std::size_t>(ft_config.batch_size) * T);
        for (int b = 0; b < ft_config.batch_size; ++b) {
            const int r = static_cast<int>(order_rng.uniform_int(train_set.rows.n_rows()));
            const TokenId* row = train_set.rows.row(r);
            tokens.insert(tokens.end(), row, row + T);
            valid.push_back(train_set.rows.valid_len[r]);
            labels.push_back(train_set.labels[r]);
        }
        BatchView view{tokens.data(), valid.data(), ft_config.batch_size, T};
        visit_tensors(grads, [](const std::string&, Mat<float>& m) { m.setZero(); });
        probe_backward(params, view, labels, {}, grads);
        adam_step(params, grads, adam, step, ft_config);
    }
    result.checkpoint.adam = std::move(adam);
    result.checkpoint.step = ft_config.total_steps;
    result.eval_accuracy = probe_accuracy(params, eval_set);
    return result;
}

void save_probe_dataset(const ProbeDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    for (int r = 0; r < ds.rows.n_rows(); ++r) {
        const TokenId* row = ds.rows.row(r);
        for (int i = 0; i < ds.rows.max_seq_len; ++i) out << row[i] << ' ';
        out << ds.labels[r] << '\n';
    }
}

ProbeDataset load_probe_dataset(const std::string& path, int max_seq_len) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    ProbeDataset ds;
    ds.rows.scheme = Scheme::Split;
    ds.rows.max_seq_len = max_seq_len;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream iss(line);
        std::vector<long> vals;
        long v;
        while (iss >> v) vals.push_back(v);
        if (static_cast<int>(vals.size()) != max_seq_len + 1)
            throw std::runtime_error("probe dataset row length mismatch in " + path);
        int valid = 0;
        for (int i = 0; i < max_seq_len; ++i) {
            ds.rows.tokens.push_back(static_cast<TokenId>(vals[i]));
            if (vals[i] != Vocabulary::kPad) valid = i + 1;
        }
        ds.rows.valid_len.push_back(valid);
        ds.labels.push_back(static_cast<int>(vals.back()));
    }
    return ds;
}

}  // namespace outlierlab
