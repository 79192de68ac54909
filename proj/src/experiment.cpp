#include "outlierlab/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "outlierlab/checkpoint_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace outlierlab {

void ExperimentConfig::validate() const {
    corpus.validate();
    model.validate();
    train.validate();
    probe.validate(corpus.vocab_size);
    if (max_seq_len < 4) throw ConfigError("scheme.max_seq_len must be >= 4");
    if (k_sigma <= 0.0) throw ConfigError("detect.k_sigma must be > 0");
    if (min_coverage <= 0.0 || min_coverage > 1.0)
        throw ConfigError("detect.min_coverage must be in (0,1]");
    if (ratio_threshold <= 0.0) throw ConfigError("detect.ratio_threshold must be > 0");
    if (n_random_baseline < 10) throw ConfigError("detect.n_random_baseline must be >= 10");
    if (fine_tune_steps < 0) throw ConfigError("probe.fine_tune_steps must be >= 0");
    if (out_dir.empty()) throw ConfigError("output.dir must be set");
}

TrainConfig ExperimentConfig::fine_tune_config() const {
    TrainConfig ft = train;
    ft.total_steps = fine_tune_steps;
    ft.peak_lr = fine_tune_lr;
    ft.warmup_steps = std::min(fine_tune_warmup, fine_tune_steps);
    ft.seed = derive_seed(master_seed, "fine-tune");
    return ft;
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["corpus"] = {{"vocab_size", corpus.vocab_size},
                   {"zipf_exponent", corpus.zipf_exponent},
                   {"n_documents", corpus.n_documents},
                   {"sentences_per_document", corpus.sentences_per_document},
                   {"min_sentence_len", corpus.min_sentence_len},
                   {"max_sentence_len", corpus.max_sentence_len}};
    j["scheme"] = {{"name", scheme_name(scheme)},
                   {"max_seq_len", max_seq_len},
                   {"freq_threshold", freq_threshold},
                   {"replace_prob", replace_prob}};
    j["model"] = {{"n_layers", model.n_layers},     {"hidden_dim", model.hidden_dim},
                  {"n_heads", model.n_heads},       {"ffn_dim", model.ffn_dim},
                  {"n_classes", model.n_classes},   {"layernorm_epsilon", model.layernorm_epsilon},
                  {"init_std", model.init_std}};
    j["train"] = {{"total_steps", train.total_steps},
                  {"batch_size", train.batch_size},
                  {"peak_lr", train.peak_lr},
                  {"warmup_steps", train.warmup_steps},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"adam_epsilon", train.adam_epsilon},
                  {"weight_decay", train.weight_decay},
                  {"mask_rate", train.mask_rate},
                  {"checkpoint_interval", train.checkpoint_interval}};
    j["probe"] = {{"marker1", probe.marker1},   {"marker2", probe.marker2},
                  {"window", probe.window},     {"n_train", probe.n_train},
                  {"n_eval", probe.n_eval},     {"fine_tune_steps", fine_tune_steps},
                  {"fine_tune_lr", fine_tune_lr}, {"fine_tune_warmup", fine_tune_warmup}};
    j["detect"] = {{"k_sigma", k_sigma},
                   {"min_coverage", min_coverage},
                   {"ratio_threshold", ratio_threshold},
                   {"n_random_baseline", n_random_baseline},
                   {"eval_rows", eval_rows},
                   {"sweep_dim", sweep_dim}};
    j["ablate"] = {{"dims", ablate_dims}, {"layers", ablate_layers}};
    j["diagnostics"] = {{"freq_correlation", diag_freq_correlation},
                        {"attention_correlation", diag_attention_correlation},
                        {"generation_shift", diag_generation_shift},
                        {"include_special", diag_include_special},
                        {"n_bins", diag_n_bins},
                        {"n_control_dims", diag_n_control_dims},
                        {"max_rows", diag_max_rows}};
    j["output"] = {{"dir", out_dir}, {"seed", master_seed}};
    return j.dump(2) + "\n";
}

std::string default_config_text() {
    return R"([corpus]
vocab_size = 2005
zipf_exponent = 1.1
n_documents = 2000
sentences_per_document = 8
min_sentence_len = 4
max_sentence_len = 20

[scheme]
name = SPLIT
max_seq_len = 64
freq_threshold = 1e-3
replace_prob = 0.5

[model]
n_layers = 4
hidden_dim = 64
n_heads = 4
ffn_dim = 256

[train]
total_steps = 20000
batch_size = 32
peak_lr = 1e-4
warmup_steps = 500
checkpoint_interval = 2000
weight_decay = 0.01
mask_rate = 0.15

[probe]
marker1 = 25
marker2 = 26
window = 6
n_train = 4096
n_eval = 1024
fine_tune_steps = 2000
fine_tune_lr = 1e-4
fine_tune_warmup = 100

[detect]
k_sigma = 3.0
min_coverage = 0.5
ratio_threshold = 5.0
n_random_baseline = 10
eval_rows = 256
sweep_dim = -1

[ablate]
dims =
layers =

[diagnostics]
freq_correlation = true
attention_correlation = true
generation_shift = true
include_special = false
n_bins = 20
n_control_dims = 10
max_rows = 256

[output]
dir = out
seed = 1234
)";
}

namespace {

int parse_int(const std::string& path, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(path + ": expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& path, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(path + ": expected number, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& path, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(path + ": expected unsigned integer, got '" + v + "'");
    }
}

bool parse_bool(const std::string& path, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(path + ": expected true/false, got '" + v + "'");
}

// "3+17+42" or empty
std::vector<int> parse_dims(const std::string& path, const std::string& v) {
    std::vector<int> dims;
    if (v.empty()) return dims;
    std::string part;
    std::istringstream iss(v);
    while (std::getline(iss, part, '+')) dims.push_back(parse_int(path, part));
    return dims;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& path, const std::string&)>;

const std::map<std::string, Setter>& config_schema() {
    static const std::map<std::string, Setter> schema = {
        {"corpus.vocab_size", [](auto& c, auto& p, auto& v) { c.corpus.vocab_size = parse_int(p, v); }},
        {"corpus.zipf_exponent", [](auto& c, auto& p, auto& v) { c.corpus.zipf_exponent = parse_double(p, v); }},
        {"corpus.n_documents", [](auto& c, auto& p, auto& v) { c.corpus.n_documents = parse_int(p, v); }},
        {"corpus.sentences_per_document", [](auto& c, auto& p, auto& v) { c.corpus.sentences_per_document = parse_int(p, v); }},
        {"corpus.min_sentence_len", [](auto& c, auto& p, auto& v) { c.corpus.min_sentence_len = parse_int(p, v); }},
        {"corpus.max_sentence_len", [](auto& c, auto& p, auto& v) { c.corpus.max_sentence_len = parse_int(p, v); }},
        {"scheme.name", [](auto& c, auto&, auto& v) { c.scheme = scheme_from_name(v); }},
        {"scheme.max_seq_len", [](auto& c, auto& p, auto& v) { c.max_seq_len = parse_int(p, v); }},
        {"scheme.freq_threshold", [](auto& c, auto& p, auto& v) { c.freq_threshold = parse_double(p, v); }},
        {"scheme.replace_prob", [](auto& c, auto& p, auto& v) { c.replace_prob = parse_double(p, v); }},
        {"model.n_layers", [](auto& c, auto& p, auto& v) { c.model.n_layers = parse_int(p, v); }},
        {"model.hidden_dim", [](auto& c, auto& p, auto& v) { c.model.hidden_dim = parse_int(p, v); }},
        {"model.n_heads", [](auto& c, auto& p, auto& v) { c.model.n_heads = parse_int(p, v); }},
        {"model.ffn_dim", [](auto& c, auto& p, auto& v) { c.model.ffn_dim = parse_int(p, v); }},
        {"model.n_classes", [](auto& c, auto& p, auto& v) { c.model.n_classes = parse_int(p, v); }},
        {"model.layernorm_epsilon", [](auto& c, auto& p, auto& v) { c.model.layernorm_epsilon = parse_double(p, v); }},
        {"model.init_std", [](auto& c, auto& p, auto& v) { c.model.init_std = parse_double(p, v); }},
        {"train.total_steps", [](auto& c, auto& p, auto& v) { c.train.total_steps = parse_int(p, v); }},
        {"train.batch_size", [](auto& c, auto& p, auto& v) { c.train.batch_size = parse_int(p, v); }},
        {"train.peak_lr", [](auto& c, auto& p, auto& v) { c.train.peak_lr = parse_double(p, v); }},
        {"train.warmup_steps", [](auto& c, auto& p, auto& v) { c.train.warmup_steps = parse_int(p, v); }},
        {"train.beta1", [](auto& c, auto& p, auto& v) { c.train.beta1 = parse_double(p, v); }},
        {"train.beta2", [](auto& c, auto& p, auto& v) { c.train.beta2 = parse_double(p, v); }},
        {"train.adam_epsilon", [](auto& c, auto& p, auto& v) { c.train.adam_epsilon = parse_double(p, v); }},
        {"train.weight_decay", [](auto& c, auto& p, auto& v) { c.train.weight_decay = parse_double(p, v); }},
        {"train.mask_rate", [](auto& c, auto& p, auto& v) { c.train.mask_rate = parse_double(p, v); }},
        {"train.checkpoint_interval", [](auto& c, auto& p, auto& v) { c.train.checkpoint_interval = parse_int(p, v); }},
        {"probe.marker1", [](auto& c, auto& p, auto& v) { c.probe.marker1 = parse_int(p, v); }},
        {"probe.marker2", [](auto& c, auto& p, auto& v) { c.probe.marker2 = parse_int(p, v); }},
        {"probe.window", [](auto& c, auto& p, auto& v) { c.probe.window = parse_int(p, v); }},
        {"probe.n_train", [](auto& c, auto& p, auto& v) { c.probe.n_train = parse_int(p, v); }},
        {"probe.n_eval", [](auto& c, auto& p, auto& v) { c.probe.n_eval = parse_int(p, v); }},
        {"probe.fine_tune_steps", [](auto& c, auto& p, auto& v) { c.fine_tune_steps = parse_int(p, v); }},
        {"probe.fine_tune_lr", [](auto& c, auto& p, auto& v) { c.fine_tune_lr = parse_double(p, v); }},
        {"probe.fine_tune_warmup", [](auto& c, auto& p, auto& v) { c.fine_tune_warmup = parse_int(p, v); }},
        {"detect.k_sigma", [](auto& c, auto& p, auto& v) { c.k_sigma = parse_double(p, v); }},
        {"detect.min_coverage", [](auto& c, auto& p, auto& v) { c.min_coverage = parse_double(p, v); }},
        {"detect.ratio_threshold", [](auto& c, auto& p, auto& v) { c.ratio_threshold = parse_double(p, v); }},
        {"detect.n_random_baseline", [](auto& c, auto& p, auto& v) { c.n_random_baseline = parse_int(p, v); }},
        {"detect.eval_rows", [](auto& c, auto& p, auto& v) { c.eval_rows = parse_int(p, v); }},
        {"detect.sweep_dim", [](auto& c, auto& p, auto& v) { c.sweep_dim = parse_int(p, v); }},
        {"ablate.dims", [](auto& c, auto& p, auto& v) { c.ablate_dims = parse_dims(p, v); }},
        {"ablate.layers", [](auto& c, auto& p, auto& v) { c.ablate_layers = parse_dims(p, v); }},
        {"diagnostics.freq_correlation", [](auto& c, auto& p, auto& v) { c.diag_freq_correlation = parse_bool(p, v); }},
        {"diagnostics.attention_correlation", [](auto& c, auto& p, auto& v) { c.diag_attention_correlation = parse_bool(p, v); }},
        {"diagnostics.generation_shift", [](auto& c, auto& p, auto& v) { c.diag_generation_shift = parse_bool(p, v); }},
        {"diagnostics.include_special", [](auto& c, auto& p, auto& v) { c.diag_include_special = parse_bool(p, v); }},
        {"diagnostics.n_bins", [](auto& c, auto& p, auto& v) { c.diag_n_bins = parse_int(p, v); }},
        {"diagnostics.n_control_dims", [](auto& c, auto& p, auto& v) { c.diag_n_control_dims = parse_int(p, v); }},
        {"diagnostics.max_rows", [](auto& c, auto& p, auto& v) { c.diag_max_rows = parse_int(p, v); }},
        {"output.dir", [](auto& c, auto&, auto& v) { c.out_dir = v; }},
        {"output.seed", [](auto& c, auto& p, auto& v) { c.master_seed = parse_u64(p, v); }},
    };
    return schema;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

void apply_kv(ExperimentConfig& cfg, const std::string& path, const std::string& value) {
    const auto& schema = config_schema();
    const auto it = schema.find(path);
    if (it == schema.end()) throw ConfigError("unknown config key: " + path);
    it->second(cfg, path, value);
}

}  // namespace

ExperimentConfig resolve_config_text(const std::string& text,
                                     const std::vector<std::string>& overrides) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError("config key '" + key + "' outside any section");
        apply_kv(cfg, section + "." + key, value);
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key.path=value: " + ov);
        apply_kv(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    // dimensions shared across modules
    cfg.model.vocab_size = cfg.corpus.vocab_size;
    cfg.model.max_seq_len = cfg.max_seq_len;
    cfg.model.seed = derive_seed(cfg.master_seed, "model-init");
    cfg.corpus.seed = derive_seed(cfg.master_seed, "corpus");
    cfg.train.seed = derive_seed(cfg.master_seed, "train");
    cfg.validate();
    return cfg;
}

ExperimentConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    return resolve_config_text(ss.str(), overrides);
}

std::string sha256_string(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

RunManifest RunManifest::load_or_create(const std::string& out_dir,
                                        const std::string& config_hash) {
    const fs::path path = fs::path(out_dir) / "manifest.json";
    if (fs::exists(path)) {
        RunManifest m = load(out_dir);
        if (m.config_hash_ != config_hash) {
            // new configuration: start a fresh manifest
            m.files_.clear();
            m.stages_.clear();
            m.config_hash_ = config_hash;
        }
        return m;
    }
    RunManifest m;
    m.out_dir_ = out_dir;
    m.config_hash_ = config_hash;
    return m;
}

RunManifest RunManifest::load(const std::string& out_dir) {
    const fs::path path = fs::path(out_dir) / "manifest.json";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("no manifest found in " + out_dir);
    json j;
    in >> j;
    RunManifest m;
    m.out_dir_ = out_dir;
    m.config_hash_ = j.value("config_hash", "");
    const json files = j.value("files", json::object());
    for (const auto& [k, v] : files.items()) m.files_[k] = v.get<std::string>();
    const json stages = j.value("stages", json::object());
    for (const auto& [k, v] : stages.items()) m.stages_[k] = v.get<bool>();
    return m;
}

void RunManifest::record_file(const std::string& name) {
    files_[name] = sha256_file((fs::path(out_dir_) / name).string());
}

void RunManifest::mark_stage(const std::string& stage) { stages_[stage] = true; }

bool RunManifest::stage_done(const std::string& stage) const {
    const auto it = stages_.find(stage);
    return it != stages_.end() && it->second;
}

void RunManifest::save() const {
    json j;
    j["config_hash"] = config_hash_;
    j["tool_version"] = kToolVersion;
    j["files"] = files_;
    j["stages"] = stages_;
    std::ofstream out(fs::path(out_dir_) / "manifest.json");
    out << j.dump(2) << '\n';
}

bool RunManifest::verify(std::vector<std::string>& problems) const {
    bool ok = true;
    for (const auto& [name, digest] : files_) {
        const fs::path p = fs::path(out_dir_) / name;
        if (!fs::exists(p)) {
            problems.push_back("missing file: " + name);
            ok = false;
        } else if (sha256_file(p.string()) != digest) {
            problems.push_back("digest mismatch: " + name);
            ok = false;
        }
    }
    return ok;
}

namespace {

fs::path opath(const ExperimentConfig& cfg, const std::string& name) {
    return fs::path(cfg.out_dir) / name;
}

std::string ckpt_name(const std::string& tag, int step) {
    std::ostringstream os;
    os << "ckpt_" << tag << "_step" << std::setw(7) << std::setfill('0') << step << ".ckpt";
    return os.str();
}

std::vector<std::pair<int, std::string>> list_checkpoints(const ExperimentConfig& cfg,
                                                          const std::string& tag) {
    std::vector<std::pair<int, std::string>> found;
    const std::string prefix = "ckpt_" + tag + "_step";
    for (const auto& entry : fs::directory_iterator(cfg.out_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size() + 5 &&
            name.substr(name.size() - 5) == ".ckpt") {
            const int step = std::stoi(name.substr(prefix.size(), name.size() - prefix.size() - 5));
            found.emplace_back(step, name);
        }
    }
    std::sort(found.begin(), found.end());
    return found;
}

Checkpoint load_final_checkpoint(const ExperimentConfig& cfg, const std::string& tag) {
    const auto found = list_checkpoints(cfg, tag);
    if (found.empty())
        throw std::runtime_error("no checkpoints for '" + tag + "' in " + cfg.out_dir +
                                 " (run the train stage first)");
    return load_checkpoint(opath(cfg, found.back().second).string());
}

TrainingStream load_main_stream(const ExperimentConfig& cfg) {
    return load_stream(opath(cfg, "stream.txt").string(), cfg.scheme, cfg.max_seq_len);
}

std::vector<int> read_dims_file(const fs::path& path) {
    std::vector<int> dims;
    std::ifstream in(path);
    if (!in) return dims;
    int d;
    while (in >> d) dims.push_back(d);
    return dims;
}

// The dims diagnostics focus on: verified outliers first, then top candidates.
std::vector<int> focus_dims(const ExperimentConfig& cfg, const ParametersF& params) {
    std::vector<int> dims = read_dims_file(opath(cfg, "verified_dims.txt"));
    if (!dims.empty()) return dims;
    auto candidates = find_candidates(params, cfg.k_sigma, cfg.min_coverage);
    for (std::size_t i = 0; i < candidates.size() && i < 2; ++i)
        dims.push_back(candidates[i].dim);
    if (dims.empty()) {
        // fall back to the globally most extreme LayerNorm weight
        auto all = find_candidates(params, cfg.k_sigma, 1e-9);
        if (!all.empty()) dims.push_back(all.front().dim);
        else dims.push_back(0);
    }
    return dims;
}

struct DetectArtifacts {
    Checkpoint pretrained;
    Checkpoint fine_tuned;
    double probe_acc_full = 0.0;
};

// Fine-tunes the probe head from the final checkpoint (cached on disk).
DetectArtifacts fine_tuned_model(const ExperimentConfig& cfg, RunManifest& manifest,
                                 const std::string& tag) {
    DetectArtifacts art;
    art.pretrained = load_final_checkpoint(cfg, tag);
    const std::string ft_name = "ckpt_" + tag + "_finetuned.ckpt";
    const TrainConfig ft_cfg = cfg.fine_tune_config();
    if (fs::exists(opath(cfg, ft_name))) {
        art.fine_tuned = load_checkpoint(opath(cfg, ft_name).string());
        ProbeDataset eval_set =
            make_probe_dataset(cfg.probe, cfg.corpus, cfg.max_seq_len, cfg.probe.n_eval,
                               derive_seed(ft_cfg.seed, "probe-eval"));
        art.probe_acc_full = probe_accuracy(art.fine_tuned.params, eval_set);
        return art;
    }
    FineTuneResult ft = fine_tune_probe(art.pretrained, cfg.probe, cfg.corpus, ft_cfg);
    art.fine_tuned = std::move(ft.checkpoint);
    art.probe_acc_full = ft.eval_accuracy;
    save_checkpoint(art.fine_tuned, opath(cfg, ft_name).string());
    manifest.record_file(ft_name);
    return art;
}

struct DetectResult {
    std::vector<CandidateOutlier> candidates;
    std::vector<DamageReport> reports;
    std::vector<int> verified_dims;
    BaselineStats baseline;
    double probe_acc_full = 0.0;
};

DetectResult run_detection(const ExperimentConfig& cfg, RunManifest& manifest,
                           const std::string& tag, const TrainingStream& stream) {
    DetectResult result;
    DetectArtifacts art = fine_tuned_model(cfg, manifest, tag);
    result.probe_acc_full = art.probe_acc_full;
    result.candidates = find_candidates(art.pretrained.params, cfg.k_sigma, cfg.min_coverage);

    ProbeDataset probe_eval =
        make_probe_dataset(cfg.probe, cfg.corpus, cfg.max_seq_len, cfg.probe.n_eval,
                           derive_seed(cfg.fine_tune_config().seed, "probe-eval"));
    DamageContext ctx;
    ctx.pretrained = &art.pretrained.params;
    ctx.fine_tuned = &art.fine_tuned.params;
    ctx.eval_stream = &stream;
    ctx.probe_eval = &probe_eval;
    ctx.eval_rows = cfg.eval_rows;
    ctx.mask_rate = cfg.train.mask_rate;
    ctx.eval_seed = derive_seed(cfg.master_seed, "damage-eval");

    std::vector<int> candidate_dims;
    for (const auto& c : result.candidates) candidate_dims.push_back(c.dim);
    result.baseline = random_baseline_damage(ctx, cfg.n_random_baseline, candidate_dims,
                                             derive_seed(cfg.master_seed, "baseline"));
    for (const auto& c : result.candidates) {
        DamageReport r =
            measure_damage(ctx, {c.dim}, {}, result.baseline, cfg.ratio_threshold);
        if (r.verified) result.verified_dims.push_back(c.dim);
        result.reports.push_back(std::move(r));
    }
    // combined row when there are multiple candidates
    if (candidate_dims.size() > 1)
        result.reports.push_back(
            measure_damage(ctx, candidate_dims, {}, result.baseline, cfg.ratio_threshold));
    return result;
}

void write_candidates_csv(const std::vector<CandidateOutlier>& candidates, const fs::path& path) {
    std::ofstream out(path);
    out << "dim,coverage,max_abs_z\n";
    out.precision(10);
    for (const auto& c : candidates)
        out << c.dim << ',' << c.coverage << ',' << c.max_abs_z << '\n';
}

}  // namespace

void stage_gen_corpus(const ExperimentConfig& cfg, RunManifest& manifest) {
    const Corpus corpus = generate_corpus(cfg.corpus);
    {
        std::ofstream out(opath(cfg, "corpus.txt"));
        for (const auto& doc : corpus) {
            for (const auto& sent : doc) {
                for (std::size_t i = 0; i < sent.size(); ++i) {
                    if (i) out << ' ';
                    out << sent[i];
                }
                out << '\n';
            }
            out << '\n';
        }
    }
    manifest.record_file("corpus.txt");

    const TrainingStream stream =
        apply_tokenization_scheme(corpus, cfg.scheme, cfg.max_seq_len, cfg.freq_threshold,
                                  cfg.replace_prob, derive_seed(cfg.master_seed, "scheme"));
    save_stream(stream, opath(cfg, "stream.txt").string());
    manifest.record_file("stream.txt");

    const FrequencyTable freq = estimate_frequency(stream, cfg.corpus.vocab_size, true);
    save_frequency_table(freq, opath(cfg, "frequency.csv").string());
    manifest.record_file("frequency.csv");

    manifest.mark_stage("gen-corpus");
    manifest.save();
}

void stage_train(const ExperimentConfig& cfg, RunManifest& manifest) {
    const TrainingStream stream = load_main_stream(cfg);
    ModelConfig mc = cfg.model;
    const TrainResult result = train_mlm(cfg.train, mc, stream);
    for (const Checkpoint& ckpt : result.checkpoints) {
        const std::string name = ckpt_name("main", ckpt.step);
        save_checkpoint(ckpt, opath(cfg, name).string());
        manifest.record_file(name);
    }
    {
        std::ofstream out(opath(cfg, "losses.csv"));
        out << "step,mlm_loss\n";
        out.precision(10);
        for (std::size_t i = 0; i < result.step_losses.size(); ++i)
            out << (i + 1) << ',' << result.step_losses[i] << '\n';
    }
    manifest.record_file("losses.csv");
    manifest.mark_stage("train");
    manifest.save();
}

void stage_detect(const ExperimentConfig& cfg, RunManifest& manifest) {
    const TrainingStream stream = load_main_stream(cfg);
    DetectResult result = run_detection(cfg, manifest, "main", stream);

    write_candidates_csv(result.candidates, opath(cfg, "candidates.csv"));
    manifest.record_file("candidates.csv");
    write_damage_csv(result.reports, opath(cfg, "outlier_report.csv").string());
    manifest.record_file("outlier_report.csv");
    {
        std::ofstream out(opath(cfg, "verified_dims.txt"));
        for (int d : result.verified_dims) out << d << '\n';
    }
    manifest.record_file("verified_dims.txt");
    {
        std::ofstream out(opath(cfg, "detect_summary.txt"));
        out.precision(10);
        out << "probe_acc_full " << result.probe_acc_full << '\n';
        out << "n_candidates " << result.candidates.size() << '\n';
        out << "n_verified " << result.verified_dims.size() << '\n';
        out << "baseline_mean_probe_delta " << result.baseline.mean_probe << '\n';
        out << "baseline_mean_mlm_delta " << result.baseline.mean_mlm << '\n';
        if (result.verified_dims.empty()) out << "flag no verified outlier\n";
    }
    manifest.record_file("detect_summary.txt");
    manifest.mark_stage("detect");
    manifest.save();
}

void stage_ablate(const ExperimentConfig& cfg, RunManifest& manifest) {
    Checkpoint ckpt = load_final_checkpoint(cfg, "main");
    ckpt.params = ablate(ckpt.params, cfg.ablate_dims, cfg.ablate_layers);
    save_checkpoint(ckpt, opath(cfg, "ckpt_ablated.ckpt").string());
    manifest.record_file("ckpt_ablated.ckpt");
    manifest.mark_stage("ablate");
    manifest.save();
}

void stage_sweep(const ExperimentConfig& cfg, RunManifest& manifest) {
    const TrainingStream stream = load_main_stream(cfg);
    DetectArtifacts art = fine_tuned_model(cfg, manifest, "main");
    int dim = cfg.sweep_dim;
    if (dim < 0) dim = focus_dims(cfg, art.pretrained.params).front();

    ProbeDataset probe_eval =
        make_probe_dataset(cfg.probe, cfg.corpus, cfg.max_seq_len, cfg.probe.n_eval,
                           derive_seed(cfg.fine_tune_config().seed, "probe-eval"));
    DamageContext ctx;
    ctx.pretrained = &art.pretrained.params;
    ctx.fine_tuned = &art.fine_tuned.params;
    ctx.eval_stream = &stream;
    ctx.probe_eval = &probe_eval;
    ctx.eval_rows = cfg.eval_rows;
    ctx.mask_rate = cfg.train.mask_rate;
    ctx.eval_seed = derive_seed(cfg.master_seed, "damage-eval");
    const BaselineStats baseline = random_baseline_damage(
        ctx, cfg.n_random_baseline, {dim}, derive_seed(cfg.master_seed, "baseline"));
    const auto reports = layerwise_sweep(ctx, dim, baseline);
    write_damage_csv(reports, opath(cfg, "sweep.csv").string());
    manifest.record_file("sweep.csv");
    manifest.mark_stage("sweep");
    manifest.save();
}

void stage_diagnose(const ExperimentConfig& cfg, RunManifest& manifest) {
    const TrainingStream stream = load_main_stream(cfg);
    const Checkpoint ckpt = load_final_checkpoint(cfg, "main");
    const FrequencyTable freq = load_frequency_table(opath(cfg, "frequency.csv").string());
    const std::vector<int> dims = focus_dims(cfg, ckpt.params);

    if (cfg.diag_freq_correlation) {
        FreqCorrelationOptions opts;
        opts.include_special = cfg.diag_include_special;
        opts.n_control_dims = cfg.diag_n_control_dims;
        opts.control_seed = derive_seed(cfg.master_seed, "control-dims");
        opts.max_rows = cfg.diag_max_rows;
        const auto table = freq_magnitude_correlation(ckpt.params, stream, freq, dims, opts);
        write_correlation_csv(table, opath(cfg, "freq_correlation.csv").string());
        manifest.record_file("freq_correlation.csv");
    }
    if (cfg.diag_attention_correlation) {
        AttnCorrelationOptions opts;
        opts.include_special = cfg.diag_include_special;
        opts.n_control_dims = cfg.diag_n_control_dims;
        opts.control_seed = derive_seed(cfg.master_seed, "control-dims");
        opts.max_rows = std::min(cfg.diag_max_rows, 128);
        const auto table = attention_query_correlation(ckpt.params, stream, dims, opts);
        write_correlation_csv(table, opath(cfg, "attention_correlation.csv").string());
        manifest.record_file("attention_correlation.csv");
    }
    if (cfg.diag_generation_shift) {
        std::vector<NamedAblation> conditions;
        conditions.push_back({"full", {}});
        for (int d : dims) conditions.push_back({"dim" + std::to_string(d), AblationMask{{d}, {}}});
        if (dims.size() > 1) conditions.push_back({"all_dims", AblationMask{dims, {}}});
        const auto shift = generation_frequency_shift(
            ckpt.params, stream, freq, conditions, cfg.train.mask_rate, cfg.diag_n_bins,
            derive_seed(cfg.master_seed, "generation-shift"), cfg.diag_max_rows);
        write_shift_csv(shift, opath(cfg, "generation_shift.csv").string());
        manifest.record_file("generation_shift.csv");
    }
    manifest.mark_stage("diagnose");
    manifest.save();
}

void stage_dynamics(const ExperimentConfig& cfg, RunManifest& manifest) {
    const TrainingStream stream = load_main_stream(cfg);
    const auto found = list_checkpoints(cfg, "main");
    if (found.empty()) throw std::runtime_error("no checkpoints (run the train stage first)");
    std::vector<Checkpoint> ckpts;
    for (const auto& [step, name] : found)
        ckpts.push_back(load_checkpoint(opath(cfg, name).string()));
    const std::vector<int> dims = focus_dims(cfg, ckpts.back().params);

    TrainConfig ft_cfg = cfg.fine_tune_config();
    // dynamics fine-tunes once per checkpoint; keep each one short
    ft_cfg.total_steps = std::max(1, cfg.fine_tune_steps / 4);
    ft_cfg.warmup_steps = std::min(ft_cfg.warmup_steps, ft_cfg.total_steps);
    const DynamicsSeries series =
        checkpoint_dynamics(ckpts, cfg.probe, cfg.corpus, ft_cfg, stream, dims);
    write_dynamics_csv(series, opath(cfg, "dynamics.csv").string());
    manifest.record_file("dynamics.csv");
    manifest.mark_stage("dynamics");
    manifest.save();
}

void stage_compare_schemes(const ExperimentConfig& cfg, RunManifest& manifest) {
    const Corpus corpus = generate_corpus(cfg.corpus);
    struct SchemeResult {
        std::string name;
        std::size_t n_candidates = 0;
        double max_ratio = 0.0;
        double probe_acc_full = 0.0;
        double final_loss = 0.0;
        double baseline_sigma_ratio = 0.0;
    };
    std::vector<SchemeResult> results;

    for (const Scheme scheme : {Scheme::Split, Scheme::OneSep, Scheme::Randomize}) {
        const std::string tag = scheme_name(scheme);
        const TrainingStream stream =
            apply_tokenization_scheme(corpus, scheme, cfg.max_seq_len, cfg.freq_threshold,
                                      cfg.replace_prob, derive_seed(cfg.master_seed, "scheme"));
        save_stream(stream, opath(cfg, "stream_" + tag + ".txt").string());
        manifest.record_file("stream_" + tag + ".txt");

        // shared initialization: the model seed is identical across schemes
        const TrainResult tr = train_mlm(cfg.train, cfg.model, stream);
        for (const Checkpoint& ckpt : tr.checkpoints) {
            const std::string name = ckpt_name(tag, ckpt.step);
            save_checkpoint(ckpt, opath(cfg, name).string());
            manifest.record_file(name);
        }

        SchemeResult sr;
        sr.name = tag;
        sr.final_loss = tr.checkpoints.back().running_mlm_loss;
        if (cfg.train.total_steps > 0 && cfg.fine_tune_steps > 0) {
            DetectResult det = run_detection(cfg, manifest, tag, stream);
            sr.n_candidates = det.candidates.size();
            sr.probe_acc_full = det.probe_acc_full;
            for (const auto& r : det.reports)
                if (r.dims.size() == 1) sr.max_ratio = std::max(sr.max_ratio, r.damage_ratio);
            sr.baseline_sigma_ratio =
                det.baseline.sigma_probe / std::max(det.baseline.mean_probe, 0.001);
            write_damage_csv(det.reports, opath(cfg, "outlier_report_" + tag + ".csv").string());
            manifest.record_file("outlier_report_" + tag + ".csv");
        }
        results.push_back(std::move(sr));
    }

    {
        std::ofstream out(opath(cfg, "compare_schemes.csv"));
        out << "scheme,n_candidates,max_damage_ratio,probe_acc_full,final_mlm_loss\n";
        out.precision(10);
        for (const auto& r : results)
            out << r.name << ',' << r.n_candidates << ',' << r.max_ratio << ','
                << r.probe_acc_full << ',' << r.final_loss << '\n';
    }
    manifest.record_file("compare_schemes.csv");
    {
        // directional check: RANDOMIZE is expected not to develop outliers
        // more damaging than SPLIT's (flagged, not a hard gate)
        const double noise =
            2.0 * std::max(results[0].baseline_sigma_ratio, results[2].baseline_sigma_ratio);
        const bool directional = results[2].max_ratio <= results[0].max_ratio + noise;
        std::ofstream out(opath(cfg, "compare_summary.txt"));
        out.precision(10);
        out << "split_max_ratio " << results[0].max_ratio << '\n';
        out << "one_sep_max_ratio " << results[1].max_ratio << '\n';
        out << "randomize_max_ratio " << results[2].max_ratio << '\n';
        out << "noise_margin " << noise << '\n';
        out << "flag randomize_not_more_damaging " << (directional ? "true" : "false") << '\n';
    }
    manifest.record_file("compare_summary.txt");
    manifest.mark_stage("compare-schemes");
    manifest.save();
}

void stage_report(const ExperimentConfig& cfg, RunManifest& manifest) {
    std::vector<std::string> problems;
    const bool ok = manifest.verify(problems);
    std::ofstream out(opath(cfg, "report.txt"));
    out << "outlier-lab run report (tool " << kToolVersion << ")\n\n";
    out << "stages:\n";
    for (const auto& [stage, done] : manifest.stages())
        out << "  " << stage << ": " << (done ? "done" : "pending") << '\n';
    out << "\nfiles (" << manifest.files().size() << "):\n";
    for (const auto& [name, digest] : manifest.files())
        out << "  " << name << "  " << digest.substr(0, 12) << '\n';
    out << "\nmanifest verification: " << (ok ? "ok" : "FAILED") << '\n';
    for (const auto& p : problems) out << "  " << p << '\n';
    out.close();
    if (!ok) throw std::runtime_error("manifest verification failed");
    manifest.mark_stage("report");
    manifest.save();
}

namespace {

// One command per artifact directory at a time.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (fs::exists(path_))
            throw std::runtime_error("artifact directory is locked: " + path_.string() +
                                     " (remove the file if no other run is active)");
        std::ofstream out(path_);
        out << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

}  // namespace

int run_command(const std::string& command, const std::string& config_path,
                const std::vector<std::string>& overrides, const std::string& out_override,
                const std::string& seed_override, std::string& error_message) {
    static const std::vector<std::string> kCommands = {
        "gen-corpus", "train", "detect", "ablate", "sweep",
        "diagnose",   "dynamics", "compare-schemes", "report"};
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
        error_message = "unknown command: " + command;
        return 2;
    }

    ExperimentConfig cfg;
    try {
        std::vector<std::string> all_overrides = overrides;
        if (!out_override.empty()) all_overrides.push_back("output.dir=" + out_override);
        if (!seed_override.empty()) all_overrides.push_back("output.seed=" + seed_override);
        cfg = config_path.empty() ? resolve_config_text(default_config_text(), all_overrides)
                                  : resolve_config(config_path, all_overrides);
    } catch (const ConfigError& e) {
        error_message = std::string("invalid config: ") + e.what();
        return 3;
    }

    try {
        if (command == "report" && !fs::exists(fs::path(cfg.out_dir) / "manifest.json")) {
            error_message = "no manifest found";
            return 1;
        }
        DirLock lock(cfg.out_dir);
        const std::string resolved = cfg.to_json();
        {
            std::ofstream out(fs::path(cfg.out_dir) / "config_resolved.json");
            out << resolved;
        }
        RunManifest manifest =
            RunManifest::load_or_create(cfg.out_dir, sha256_string(resolved));
        manifest.record_file("config_resolved.json");

        if (command == "gen-corpus") stage_gen_corpus(cfg, manifest);
        else if (command == "train") stage_train(cfg, manifest);
        else if (command == "detect") stage_detect(cfg, manifest);
        else if (command == "ablate") stage_ablate(cfg, manifest);
        else if (command == "sweep") stage_sweep(cfg, manifest);
        else if (command == "diagnose") stage_diagnose(cfg, manifest);
        else if (command == "dynamics") stage_dynamics(cfg, manifest);
        else if (command == "compare-schemes") stage_compare_schemes(cfg, manifest);
        else if (command == "report") stage_report(cfg, manifest);
        return 0;
    } catch (const ConfigError& e) {
        error_message = std::string("invalid config: ") + e.what();
        return 3;
    } catch (const std::exception& e) {
        error_message = e.what();
        return 1;
    }
}

}  // namespace outlierlab
