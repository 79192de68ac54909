#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "outlierlab/common.hpp"

namespace outlierlab {

using TokenId = std::int32_t;

// Five reserved ids at the front of the id space, content ids after them.
struct Vocabulary {
    static constexpr TokenId kCls = 0;
    static constexpr TokenId kSep = 1;
    static constexpr TokenId kMask = 2;
    static constexpr TokenId kPad = 3;
    static constexpr TokenId kUnk = 4;
    static constexpr TokenId kNumSpecial = 5;

    int size = 0;

    int content_count() const { return size - kNumSpecial; }
    TokenId content_begin() const { return kNumSpecial; }
    TokenId content_end() const { return size; }
    bool is_special(TokenId id) const { return id < kNumSpecial; }
    bool is_content(TokenId id) const { return id >= kNumSpecial && id < size; }
};

struct FrequencyTable {
    std::vector<std::int64_t> counts;  // indexed by token id
    std::int64_t total = 0;

    double relative(TokenId id) const {
        return total > 0 ? static_cast<double>(counts[id]) / static_cast<double>(total) : 0.0;
    }
};

struct CorpusSpec {
    int vocab_size = 2005;
    double zipf_exponent = 1.1;
    int n_documents = 2000;
    int sentences_per_document = 8;
    int min_sentence_len = 4;
    int max_sentence_len = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

using Sentence = std::vector<TokenId>;
using Document = std::vector<Sentence>;
using Corpus = std::vector<Document>;

enum class Scheme { Split, OneSep, Randomize };

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

struct TrainingStream {
    Scheme scheme = Scheme::Split;
    int max_seq_len = 0;
    std::vector<TokenId> tokens;   // n_rows * max_seq_len, row-major
    std::vector<int> valid_len;    // non-PAD prefix length per row
    int truncated_sentences = 0;   // sentences cut to fit max_seq_len - 2

    int n_rows() const { return static_cast<int>(valid_len.size()); }
    const TokenId* row(int r) const { return tokens.data() + static_cast<std::size_t>(r) * max_seq_len; }
};

struct MaskedBatch {
    static constexpr TokenId kIgnore = -1;

    std::vector<TokenId> inputs;   // n_rows * seq_len
    std::vector<TokenId> labels;   // kIgnore at unmasked positions
    std::vector<int> valid_len;
    int seq_len = 0;
    double mask_rate = 0.0;
    std::uint64_t seed = 0;

    int n_rows() const { return static_cast<int>(valid_len.size()); }
    int n_label_positions() const;
};

// Zipf target over content ranks: p(r) = r^-s / sum_{r'=1..N} r'^-s.
struct ZipfVocabulary {
    Vocabulary vocab;
    std::vector<double> rank_prob;  // rank r (1-based) -> rank_prob[r-1]
};

ZipfVocabulary build_zipf_vocabulary(int vocab_size, double zipf_exponent, std::uint64_t seed);

// Order-1 Markov chain over content tokens. Each transition row mixes the
// global Zipf target, a self-transition (burstiness), and a Zipf-shaped
// component over a state-dependent rotation of tail rank bands. Top ranks are
// fixed points of every rotation, which pins the stationary distribution to
// the Zipf target where the frequency tests look.
Corpus generate_corpus(const CorpusSpec& spec);

TrainingStream apply_tokenization_scheme(const Corpus& corpus, Scheme scheme, int max_seq_len,
                                         double freq_threshold, double replace_prob,
                                         std::uint64_t seed);

FrequencyTable estimate_frequency(const Corpus& corpus, int vocab_size);
FrequencyTable estimate_frequency(const TrainingStream& stream, int vocab_size,
                                  bool include_special);

MaskedBatch mask_batch(const TrainingStream& stream, const std::vector<int>& row_indices,
                       int vocab_size, double mask_rate, std::uint64_t seed);

// Line-oriented stream format: one row per line, base-10 ids, single spaces.
void save_stream(const TrainingStream& stream, const std::string& path);
TrainingStream load_stream(const std::string& path, Scheme scheme, int max_seq_len);

// Two-column CSV `token_id,count` with a header row.
void save_frequency_table(const FrequencyTable& table, const std::string& path);
FrequencyTable load_frequency_table(const std::string& path);

}  // namespace outlierlab
