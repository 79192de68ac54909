#include "outlierlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace outlierlab {

void PearsonAccumulator::add(double x, double y) {
    ++n_;
    const double dx = x - mean_x_;
    const double dy = y - mean_y_;
    mean_x_ += dx / static_cast<double>(n_);
    mean_y_ += dy / static_cast<double>(n_);
    m2x_ += dx * (x - mean_x_);
    m2y_ += dy * (y - mean_y_);
    cxy_ += dx * (y - mean_y_);
}

std::optional<double> PearsonAccumulator::result() const {
    if (n_ < 2 || m2x_ <= 0.0 || m2y_ <= 0.0) return std::nullopt;
    return cxy_ / std::sqrt(m2x_ * m2y_);
}

std::optional<double> pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("pearson: length mismatch");
    PearsonAccumulator acc;
    for (std::size_t i = 0; i < xs.size(); ++i) acc.add(xs[i], ys[i]);
    return acc.result();
}

namespace {

std::vector<double> ranks(const std::vector<double>& xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> r(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    return pearson(ranks(xs), ranks(ys));
}

std::optional<double> CorrelationTable::control_mean_abs_r(int layer, int head) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& e : entries)
        if (e.is_control && e.layer == layer && e.head == head && e.r) {
            sum += std::abs(*e.r);
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

std::optional<double> CorrelationTable::entry_r(int layer, int dim, int head) const {
    for (const auto& e : entries)
        if (!e.is_control && e.layer == layer && e.head == head && e.dim == dim) return e.r;
    return std::nullopt;
}

namespace {

std::vector<int> sample_control_dims(int d, const std::vector<int>& excluded, int n,
                                     std::uint64_t seed) {
    std::vector<bool> taken(d, false);
    for (int dim : excluded)
        if (dim >= 0 && dim < d) taken[dim] = true;
    std::vector<int> out;
    Rng rng(seed);
    int avail = 0;
    for (int j = 0; j < d; ++j)
        if (!taken[j]) ++avail;
    n = std::min(n, avail);
    while (static_cast<int>(out.size()) < n) {
        const int dim = static_cast<int>(rng.uniform_int(d));
        if (taken[dim]) continue;
        taken[dim] = true;
        out.push_back(dim);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Runs the model over the stream in chunks and hands each chunk's trace plus
// batch view to the sink.
template <typename F>
void for_each_trace(const ParametersF& params, const TrainingStream& stream, int max_rows, F&& f) {
    const int n = std::min(stream.n_rows(), max_rows);
    if (n == 0) throw ConfigError("diagnostics: empty stream");
    const int chunk = 32;
    for (int start = 0; start < n; start += chunk) {
        const int m = std::min(chunk, n - start);
        BatchView view{stream.row(start), stream.valid_len.data() + start, m, stream.max_seq_len};
        detail::EncoderCache<float> cache;
        LayerTrace<float> trace;
        detail::encoder_forward(params, view, AblationMask{}, cache, &trace);
        f(view, trace);
    }
}

bool counted_position(TokenId t, bool include_special) {
    if (t == Vocabulary::kPad) return false;
    if (!include_special && t < Vocabulary::kNumSpecial) return false;
    return true;
}

}  // namespace

CorrelationTable freq_magnitude_correlation(const ParametersF& params, const TrainingStream& stream,
                                            const FrequencyTable& freq, const std::vector<int>& dims,
                                            const FreqCorrelationOptions& opts) {
    const int L = params.config.n_layers;
    CorrelationTable table;
    table.control_dims =
        sample_control_dims(params.config.hidden_dim, dims, opts.n_control_dims, opts.control_seed);

    std::vector<int> all_dims = dims;
    all_dims.insert(all_dims.end(), table.control_dims.begin(), table.control_dims.end());

    // (layer, dim index in all_dims) -> pair lists
    const int n_layers = L + 1;
    std::vector<std::vector<double>> xs(n_layers * all_dims.size());
    std::vector<std::vector<double>> ys(n_layers * all_dims.size());

    for_each_trace(params, stream, opts.max_rows, [&](const BatchView& view,
                                                      const LayerTrace<float>& trace) {
        for (int b = 0; b < view.n_rows; ++b) {
            for (int t = 0; t < view.valid_len[b]; ++t) {
                const TokenId tok = view.tokens[b * view.seq_len + t];
                if (!counted_position(tok, opts.include_special)) continue;
                if (freq.counts[tok] <= 0) continue;  // log frequency undefined
                const double logf = std::log10(freq.relative(tok));
                const int row = b * view.seq_len + t;
                for (int l = 0; l < n_layers; ++l) {
                    for (std::size_t k = 0; k < all_dims.size(); ++k) {
                        const double mag =
                            std::abs(static_cast<double>(trace.hidden_states[l](row, all_dims[k])));
                        xs[l * all_dims.size() + k].push_back(mag);
                        ys[l * all_dims.size() + k].push_back(logf);
                    }
                }
            }
        }
    });

    for (int l = 0; l < n_layers; ++l) {
        for (std::size_t k = 0; k < all_dims.size(); ++k) {
            auto& x = xs[l * all_dims.size() + k];
            auto& y = ys[l * all_dims.size() + k];
            if (opts.per_type) {
                // average magnitude per distinct log-frequency value (token type)
                std::map<double, std::pair<double, int>> by_type;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    auto& slot = by_type[y[i]];
                    slot.first += x[i];
                    slot.second += 1;
                }
                x.clear();
                y.clear();
                for (const auto& [logf, acc] : by_type) {
                    x.push_back(acc.first / acc.second);
                    y.push_back(logf);
                }
            }
            CorrelationEntry e;
            e.layer = l;
            e.dim = all_dims[k];
            e.include_special = opts.include_special;
            e.is_control = k >= dims.size();
            e.n = static_cast<std::int64_t>(x.size());
            e.r = opts.use_spearman ? spearman(x, y) : pearson(x, y);
            table.entries.push_back(std::move(e));
        }
    }
    return table;
}

CorrelationTable attention_query_correlation(const ParametersF& params,
                                             const TrainingStream& stream,
                                             const std::vector<int>& dims,
                                             const AttnCorrelationOptions& opts) {
    const int L = params.config.n_layers;
    const int H = params.config.n_heads;
    CorrelationTable table;
    table.control_dims =
        sample_control_dims(params.config.hidden_dim, dims, opts.n_control_dims, opts.control_seed);
    std::vector<int> all_dims = dims;
    all_dims.insert(all_dims.end(), table.control_dims.begin(), table.control_dims.end());

    // (layer-1, head, dim index) -> accumulator
    std::vector<PearsonAccumulator> acc(static_cast<std::size_t>(L) * H * all_dims.size());
    auto slot = [&](int l, int h, std::size_t k) -> PearsonAccumulator& {
        return acc[(static_cast<std::size_t>(l - 1) * H + h) * all_dims.size() + k];
    };

    for_each_trace(params, stream, opts.max_rows, [&](const BatchView& view,
                                                      const LayerTrace<float>& trace) {
        const int T = view.seq_len;
        for (int b = 0; b < view.n_rows; ++b) {
            const int vl = view.valid_len[b];
            for (int l = 1; l <= L; ++l) {
                for (int h = 0; h < H; ++h) {
                    const auto& a = trace.attention[l - 1][static_cast<std::size_t>(b) * H + h];
                    for (int j = 0; j < vl; ++j) {
                        const TokenId tok = view.tokens[b * T + j];
                        if (!counted_position(tok, opts.include_special)) continue;
                        // average attention received by token j over valid rows
                        double col_mean = 0.0;
                        for (int i = 0; i < vl; ++i) col_mean += static_cast<double>(a(i, j));
                        col_mean /= vl;
                        const int row = b * T + j;
                        for (std::size_t k = 0; k < all_dims.size(); ++k) {
                            const double mag = std::abs(
                                static_cast<double>(trace.hidden_states[l](row, all_dims[k])));
                            slot(l, h, k).add(mag, col_mean);
                        }
                    }
                }
            }
        }
    });

    for (int l = 1; l <= L; ++l)
        for (int h = 0; h < H; ++h)
            for (std::size_t k = 0; k < all_dims.size(); ++k) {
                CorrelationEntry e;
                e.layer = l;
                e.head = h;
                e.dim = all_dims[k];
                e.include_special = opts.include_special;
                e.is_control = k >= dims.size();
                e.n = slot(l, h, k).count();
                e.r = slot(l, h, k).result();
                table.entries.push_back(std::move(e));
            }
    return table;
}

GenerationShift generation_frequency_shift(const ParametersF& params, const TrainingStream& stream,
                                           const FrequencyTable& freq,
                                           const std::vector<NamedAblation>& conditions,
                                           double mask_rate, int n_bins, std::uint64_t seed,
                                           int max_rows) {
    if (n_bins < 2) throw ConfigError("generation_frequency_shift: bins must be >= 2");
    GenerationShift shift;
    const double lo = -6.0, hi = 0.0;
    for (int b = 0; b <= n_bins; ++b)
        shift.bin_edges.push_back(lo + (hi - lo) * b / n_bins);
    auto bin_of = [&](TokenId tok) {
        const double rel = freq.relative(tok);
        if (rel <= 0.0) return 0;
        const double logf = std::log10(rel);
        int b = static_cast<int>(std::floor((logf - lo) / (hi - lo) * n_bins));
        return std::clamp(b, 0, n_bins - 1);
    };

    const int n = std::min(stream.n_rows(), max_rows);
    if (n == 0) throw ConfigError("generation_frequency_shift: empty stream");
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    const MaskedBatch batch = mask_batch(stream, rows, params.config.vocab_size, mask_rate, seed);
    std::vector<int> positions;
    for (std::size_t i = 0; i < batch.labels.size(); ++i)
        if (batch.labels[i] != MaskedBatch::kIgnore) positions.push_back(static_cast<int>(i));
    shift.n_masked = static_cast<std::int64_t>(positions.size());

    for (const auto& cond : conditions) {
        shift.condition_names.push_back(cond.name);
        std::vector<std::int64_t> counts(n_bins, 0);
        detail::EncoderCache<float> cache;
        const Mat<float>& hidden =
            detail::encoder_forward(params, batch_view(batch), cond.mask, cache, static_cast<LayerTrace<float>*>(nullptr));
        detail::MlmHeadCache<float> head;
        Mat<float> logits = detail::mlm_head_forward(params, hidden, positions, head);
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            Eigen::Index best;
            logits.row(i).maxCoeff(&best);
            ++counts[bin_of(static_cast<TokenId>(best))];
        }
        shift.counts.push_back(std::move(counts));
    }
    return shift;
}

DynamicsSeries checkpoint_dynamics(const std::vector<Checkpoint>& checkpoints,
                                   const ProbeTask& probe_task, const CorpusSpec& corpus_spec,
                                   const TrainConfig& ft_config, const TrainingStream& eval_stream,
                                   const std::vector<int>& dims) {
    if (checkpoints.empty()) throw ConfigError("checkpoint_dynamics: no checkpoints");
    DynamicsSeries series;
    std::vector<std::pair<std::string, AblationMask>> conditions;
    conditions.emplace_back("full", AblationMask{});
    for (int dim : dims)
        conditions.emplace_back("dim" + std::to_string(dim), AblationMask{{dim}, {}});
    if (dims.size() > 1) conditions.emplace_back("all_dims", AblationMask{dims, {}});

    for (const Checkpoint& ckpt : checkpoints) {
        FineTuneResult ft = fine_tune_probe(ckpt, probe_task, corpus_spec, ft_config);
        ProbeDataset eval_set =
            make_probe_dataset(probe_task, corpus_spec, ckpt.model_config.max_seq_len,
                               probe_task.n_eval, derive_seed(ft_config.seed, "probe-eval"));
        for (const auto& [name, mask] : conditions) {
            DynamicsRow row;
            row.step = ckpt.step;
            row.condition = name;
            row.probe_acc = probe_accuracy(ft.checkpoint.params, eval_set, mask);
            row.mlm_loss = eval_mlm_loss(ckpt.params, eval_stream, 256, ckpt.train_config.mask_rate,
                                         derive_seed(ft_config.seed, "dynamics-mlm"), mask);
            series.rows.push_back(std::move(row));
        }
    }
    return series;
}

void write_correlation_csv(const CorrelationTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "layer,head,dim,include_special,r,n\n";
    out.precision(10);
    for (const auto& e : table.entries) {
        out << e.layer << ',';
        if (e.head >= 0) out << e.head;
        out << ',' << e.dim << ',' << (e.include_special ? 1 : 0) << ',';
        if (e.r) out << *e.r;  // undefined stays an empty cell, never 0
        out << ',' << e.n << '\n';
    }
}

void write_shift_csv(const GenerationShift& shift, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "condition,bin_lo,bin_hi,count\n";
    out.precision(10);
    for (std::size_t c = 0; c < shift.condition_names.size(); ++c)
        for (std::size_t b = 0; b + 1 < shift.bin_edges.size(); ++b)
            out << shift.condition_names[c] << ',' << shift.bin_edges[b] << ','
                << shift.bin_edges[b + 1] << ',' << shift.counts[c][b] << '\n';
}

void write_dynamics_csv(const DynamicsSeries& series, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "step,condition,probe_acc,mlm_loss\n";
    out.precision(10);
    for (const auto& r : series.rows)
        out << r.step << ',' << r.condition << ',' << r.probe_acc << ',' << r.mlm_loss << '\n';
}

}  // namespace outlierlab
