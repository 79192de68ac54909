#include "outlierlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace outlierlab {

void CorpusSpec::validate() const {
    if (vocab_size < 16) throw ConfigError("corpus.vocab_size must be >= 16");
    if (zipf_exponent <= 0.0) throw ConfigError("corpus.zipf_exponent must be > 0");
    if (n_documents < 0) throw ConfigError("corpus.n_documents must be >= 0");
    if (sentences_per_document <= 0) throw ConfigError("corpus.sentences_per_document must be > 0");
    if (min_sentence_len <= 0) throw ConfigError("corpus.min_sentence_len must be > 0");
    if (min_sentence_len > max_sentence_len)
        throw ConfigError("corpus.min_sentence_len must be <= max_sentence_len");
}

std::string scheme_name(Scheme s) {
    switch (s) {
        case Scheme::Split: return "SPLIT";
        case Scheme::OneSep: return "ONE_SEP";
        case Scheme::Randomize: return "RANDOMIZE";
    }
    return "?";
}

Scheme scheme_from_name(const std::string& name) {
    if (name == "SPLIT") return Scheme::Split;
    if (name == "ONE_SEP") return Scheme::OneSep;
    if (name == "RANDOMIZE") return Scheme::Randomize;
    throw ConfigError("unknown scheme: " + name);
}

int MaskedBatch::n_label_positions() const {
    int n = 0;
    for (TokenId t : labels)
        if (t != kIgnore) ++n;
    return n;
}

ZipfVocabulary build_zipf_vocabulary(int vocab_size, double zipf_exponent, std::uint64_t seed) {
    (void)seed;  // id assignment is rank order; no randomness needed yet
    if (vocab_size < 16) throw ConfigError("vocab_size must be >= 16");
    if (zipf_exponent <= 0.0) throw ConfigError("zipf_exponent must be > 0");

    ZipfVocabulary zv;
    zv.vocab.size = vocab_size;
    const int n = zv.vocab.content_count();
    zv.rank_prob.resize(n);
    double norm = 0.0;
    for (int r = 1; r <= n; ++r) norm += std::pow(static_cast<double>(r), -zipf_exponent);
    for (int r = 1; r <= n; ++r)
        zv.rank_prob[r - 1] = std::pow(static_cast<double>(r), -zipf_exponent) / norm;
    return zv;
}

namespace {

// Geometric rank bands for the Markov tail rotations. Ranks below kFixedRanks
// are never moved.
constexpr int kFixedRanks = 10;

struct Bands {
    // band_of[r0] for 0-based rank r0; bands as (lo, len) in 0-based ranks
    std::vector<std::pair<int, int>> spans;

    explicit Bands(int n) {
        int lo = kFixedRanks;
        int width = kFixedRanks;
        while (lo < n) {
            const int len = std::min(width, n - lo);
            spans.emplace_back(lo, len);
            lo += len;
            width *= 2;
        }
    }

    // Maps a sampled 0-based rank through the state's rotation.
    int rotate(int rank0, std::uint64_t state_key) const {
        if (rank0 < kFixedRanks) return rank0;
        for (std::size_t b = 0; b < spans.size(); ++b) {
            const auto [lo, len] = spans[b];
            if (rank0 < lo + len) {
                const auto rot = static_cast<int>(splitmix64(state_key + b) % static_cast<std::uint64_t>(len));
                return lo + (rank0 - lo + rot) % len;
            }
        }
        return rank0;
    }
};

// Mixture weights of the transition rows.
constexpr double kGlobalWeight = 0.45;  // draw from the global Zipf target
constexpr double kRepeatWeight = 0.25;  // repeat the previous token
// remainder: Zipf draw through the state's tail rotation

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    const ZipfVocabulary zv = build_zipf_vocabulary(spec.vocab_size, spec.zipf_exponent, spec.seed);
    const DiscreteSampler zipf(zv.rank_prob);
    const Bands bands(zv.vocab.content_count());
    Rng rng(spec.seed);
    const std::uint64_t perm_key = splitmix64(spec.seed ^ 0x6f75746c696572ULL);

    Corpus corpus;
    corpus.reserve(spec.n_documents);
    const int len_range = spec.max_sentence_len - spec.min_sentence_len + 1;
    for (int d = 0; d < spec.n_documents; ++d) {
        Document doc;
        doc.reserve(spec.sentences_per_document);
        for (int s = 0; s < spec.sentences_per_document; ++s) {
            const int len = spec.min_sentence_len + static_cast<int>(rng.uniform_int(len_range));
            Sentence sent;
            sent.reserve(len);
            TokenId prev = -1;
            for (int i = 0; i < len; ++i) {
                TokenId tok;
                if (prev < 0) {
                    tok = zv.vocab.content_begin() + static_cast<TokenId>(zipf.sample(rng));
                } else {
                    const double u = rng.uniform();
                    if (u < kGlobalWeight) {
                        tok = zv.vocab.content_begin() + static_cast<TokenId>(zipf.sample(rng));
                    } else if (u < kGlobalWeight + kRepeatWeight) {
                        tok = prev;
                    } else {
                        const int rank0 = static_cast<int>(zipf.sample(rng));
                        const std::uint64_t state_key =
                            splitmix64(perm_key ^ static_cast<std::uint64_t>(prev) * 0x9e3779b97f4a7c15ULL);
                        tok = zv.vocab.content_begin() + static_cast<TokenId>(bands.rotate(rank0, state_key));
                    }
                }
                sent.push_back(tok);
                prev = tok;
            }
            doc.push_back(std::move(sent));
        }
        corpus.push_back(std::move(doc));
    }
    return corpus;
}

namespace {

struct RowPacker {
    TrainingStream& stream;
    int max_seq_len;
    std::vector<TokenId> current;

    explicit RowPacker(TrainingStream& s) : stream(s), max_seq_len(s.max_seq_len) {
        current.reserve(max_seq_len);
        current.push_back(Vocabulary::kCls);
    }

    int room() const { return max_seq_len - static_cast<int>(current.size()); }

    void flush() {
        if (current.size() <= 1) return;
        stream.valid_len.push_back(static_cast<int>(current.size()));
        current.resize(max_seq_len, Vocabulary::kPad);
        stream.tokens.insert(stream.tokens.end(), current.begin(), current.end());
        current.clear();
        current.push_back(Vocabulary::kCls);
    }

    void add_sentence(const Sentence& sent, bool sep_after) {
        const int need = static_cast<int>(sent.size()) + (sep_after ? 1 : 0);
        if (need > room()) flush();
        int take = static_cast<int>(sent.size());
        if (take + (sep_after ? 1 : 0) > room()) {
            take = room() - (sep_after ? 1 : 0);
            ++stream.truncated_sentences;
        }
        current.insert(current.end(), sent.begin(), sent.begin() + take);
        if (sep_after) current.push_back(Vocabulary::kSep);
    }
};

}  // namespace

TrainingStream apply_tokenization_scheme(const Corpus& corpus, Scheme scheme, int max_seq_len,
                                         double freq_threshold, double replace_prob,
                                         std::uint64_t seed) {
    if (corpus.empty()) throw ConfigError("apply_tokenization_scheme: empty corpus");
    if (max_seq_len < 4) throw ConfigError("max_seq_len must be >= 4");
    if (scheme == Scheme::Randomize) {
        if (freq_threshold <= 0.0 || freq_threshold >= 1.0)
            throw ConfigError("freq_threshold must be in (0,1)");
        if (replace_prob < 0.0 || replace_prob > 1.0)
            throw ConfigError("replace_prob must be in [0,1]");
    }

    TrainingStream stream;
    stream.scheme = scheme;
    stream.max_seq_len = max_seq_len;

    // RANDOMIZE replacement: occurrences of above-threshold tokens become,
    // with replace_prob, a uniform draw from the below-threshold pool.
    int vocab_size = 0;
    for (const auto& doc : corpus)
        for (const auto& sent : doc)
            for (TokenId t : sent) vocab_size = std::max(vocab_size, t + 1);
    std::vector<bool> above;
    std::vector<TokenId> below_pool;
    if (scheme == Scheme::Randomize) {
        const FrequencyTable freq = estimate_frequency(corpus, vocab_size);
        above.assign(vocab_size, false);
        for (TokenId id = Vocabulary::kNumSpecial; id < vocab_size; ++id) {
            if (freq.relative(id) > freq_threshold)
                above[id] = true;
            else
                below_pool.push_back(id);
        }
    }

    Rng rng(seed);
    RowPacker packer(stream);
    for (const auto& doc : corpus) {
        for (const auto& sent : doc) {
            if (scheme == Scheme::OneSep) {
                // Concatenate everything; SEP only at the end of each row.
                for (TokenId t : sent) {
                    if (packer.room() <= 1) {
                        packer.current.push_back(Vocabulary::kSep);
                        packer.flush();
                    }
                    packer.current.push_back(t);
                }
            } else if (scheme == Scheme::Randomize && !below_pool.empty()) {
                Sentence replaced = sent;
                for (TokenId& t : replaced) {
                    if (above[t] && rng.uniform() < replace_prob)
                        t = below_pool[rng.uniform_int(below_pool.size())];
                }
                packer.add_sentence(replaced, /*sep_after=*/true);
            } else {
                packer.add_sentence(sent, /*sep_after=*/true);
            }
        }
    }
    if (scheme == Scheme::OneSep) {
        if (packer.current.size() > 1) packer.current.push_back(Vocabulary::kSep);
        packer.flush();
    } else {
        packer.flush();
    }
    return stream;
}

FrequencyTable estimate_frequency(const Corpus& corpus, int vocab_size) {
    if (corpus.empty()) throw ConfigError("estimate_frequency: empty corpus");
    FrequencyTable table;
    table.counts.assign(vocab_size, 0);
    for (const auto& doc : corpus)
        for (const auto& sent : doc)
            for (TokenId t : sent) {
                ++table.counts[t];
                ++table.total;
            }
    if (table.total == 0) throw ConfigError("estimate_frequency: corpus has no tokens");
    return table;
}

FrequencyTable estimate_frequency(const TrainingStream& stream, int vocab_size,
                                  bool include_special) {
    if (stream.n_rows() == 0) throw ConfigError("estimate_frequency: empty stream");
    FrequencyTable table;
    table.counts.assign(vocab_size, 0);
    for (int r = 0; r < stream.n_rows(); ++r) {
        const TokenId* row = stream.row(r);
        for (int i = 0; i < stream.valid_len[r]; ++i) {
            const TokenId t = row[i];
            if (t == Vocabulary::kPad) continue;
            if (!include_special && t < Vocabulary::kNumSpecial) continue;
            ++table.counts[t];
            ++table.total;
        }
    }
    return table;
}

MaskedBatch mask_batch(const TrainingStream& stream, const std::vector<int>& row_indices,
                       int vocab_size, double mask_rate, std::uint64_t seed) {
    if (mask_rate < 0.0 || mask_rate >= 1.0)
        throw ConfigError("mask_rate must be in [0,1)");
    MaskedBatch batch;
    batch.seq_len = stream.max_seq_len;
    batch.mask_rate = mask_rate;
    batch.seed = seed;
    const int T = batch.seq_len;
    batch.inputs.reserve(row_indices.size() * T);
    batch.labels.assign(row_indices.size() * T, MaskedBatch::kIgnore);
    batch.valid_len.reserve(row_indices.size());

    Rng rng(seed);
    const int content_count = vocab_size - Vocabulary::kNumSpecial;
    for (std::size_t b = 0; b < row_indices.size(); ++b) {
        const TokenId* row = stream.row(row_indices[b]);
        batch.valid_len.push_back(stream.valid_len[row_indices[b]]);
        for (int i = 0; i < T; ++i) {
            TokenId t = row[i];
            if (t >= Vocabulary::kNumSpecial && rng.uniform() < mask_rate) {
                batch.labels[b * T + i] = t;
                const double u = rng.uniform();
                if (u < 0.8) {
                    t = Vocabulary::kMask;
                } else if (u < 0.9) {
                    t = Vocabulary::kNumSpecial + static_cast<TokenId>(rng.uniform_int(content_count));
                }
                // else keep the original token
            }
            batch.inputs.push_back(t);
        }
    }
    return batch;
}

void save_stream(const TrainingStream& stream, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    for (int r = 0; r < stream.n_rows(); ++r) {
        const TokenId* row = stream.row(r);
        for (int i = 0; i < stream.max_seq_len; ++i) {
            if (i) out << ' ';
            out << row[i];
        }
        out << '\n';
    }
}

TrainingStream load_stream(const std::string& path, Scheme scheme, int max_seq_len) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    TrainingStream stream;
    stream.scheme = scheme;
    stream.max_seq_len = max_seq_len;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream iss(line);
        TokenId t;
        int count = 0;
        int valid = 0;
        while (iss >> t) {
            stream.tokens.push_back(t);
            if (t != Vocabulary::kPad) valid = count + 1;
            ++count;
        }
        if (count != max_seq_len)
            throw std::runtime_error("stream row length mismatch in " + path);
        stream.valid_len.push_back(valid);
    }
    return stream;
}

void save_frequency_table(const FrequencyTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "token_id,count\n";
    for (std::size_t id = 0; id < table.counts.size(); ++id)
        out << id << ',' << table.counts[id] << '\n';
}

FrequencyTable load_frequency_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    FrequencyTable table;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("bad frequency row: " + line);
        const long id = std::stol(line.substr(0, comma));
        const long long count = std::stoll(line.substr(comma + 1));
        if (static_cast<std::size_t>(id) >= table.counts.size()) table.counts.resize(id + 1, 0);
        table.counts[id] = count;
        table.total += count;
    }
    return table;
}

}  // namespace outlierlab
