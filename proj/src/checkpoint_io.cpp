#include "outlierlab/checkpoint_io.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace outlierlab {

namespace {

constexpr const char* kMagic = "outlierlab-checkpoint v1";

std::string model_config_line(const ModelConfig& c) {
    std::ostringstream os;
    os << "model n_layers=" << c.n_layers << " hidden_dim=" << c.hidden_dim
       << " n_heads=" << c.n_heads << " ffn_dim=" << c.ffn_dim << " vocab_size=" << c.vocab_size
       << " max_seq_len=" << c.max_seq_len << " n_classes=" << c.n_classes
       << " layernorm_epsilon=" << c.layernorm_epsilon << " init_std=" << c.init_std
       << " seed=" << c.seed;
    return os.str();
}

std::string train_config_line(const TrainConfig& c) {
    std::ostringstream os;
    os << "train total_steps=" << c.total_steps << " batch_size=" << c.batch_size
       << " peak_lr=" << c.peak_lr << " warmup_steps=" << c.warmup_steps << " beta1=" << c.beta1
       << " beta2=" << c.beta2 << " adam_epsilon=" << c.adam_epsilon
       << " weight_decay=" << c.weight_decay << " mask_rate=" << c.mask_rate
       << " checkpoint_interval=" << c.checkpoint_interval << " seed=" << c.seed;
    return os.str();
}

std::map<std::string, std::string> parse_kv(std::istringstream& iss) {
    std::map<std::string, std::string> kv;
    std::string tok;
    while (iss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                  "corrupt header: bad key=value token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

// Tensors in payload order: parameters, then Adam first/second moments.
template <typename F>
void visit_all(Checkpoint& c, F&& f) {
    visit_tensors(c.params, [&](const std::string& n, Mat<float>& m) { f(n, m); });
    visit_tensors(c.adam.m, [&](const std::string& n, Mat<float>& m) { f("adam_m." + n, m); });
    visit_tensors(c.adam.v, [&](const std::string& n, Mat<float>& m) { f("adam_v." + n, m); });
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << kMagic << '\n';
    out << "step " << ckpt.step << '\n';
    out << "scheme " << ckpt.scheme << '\n';
    std::ostringstream loss;
    loss.precision(17);
    loss << ckpt.running_mlm_loss;
    out << "running_mlm_loss " << loss.str() << '\n';
    out << model_config_line(ckpt.model_config) << '\n';
    out << train_config_line(ckpt.train_config) << '\n';

    std::size_t offset = 0;
    auto& mutable_ckpt = const_cast<Checkpoint&>(ckpt);
    visit_all(mutable_ckpt, [&](const std::string& name, Mat<float>& m) {
        out << "tensor " << name << ' ' << m.rows() << 'x' << m.cols() << ' ' << offset << '\n';
        offset += static_cast<std::size_t>(m.size()) * sizeof(float);
    });
    out << '\n';
    visit_all(mutable_ckpt, [&](const std::string&, Mat<float>& m) {
        out.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(m.size() * sizeof(float)));
    });
    if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMagic)
        throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                              "corrupt header: bad magic in " + path);

    Checkpoint ckpt;
    struct ManifestEntry {
        std::string name;
        long rows, cols;
        std::size_t offset;
    };
    std::vector<ManifestEntry> manifest;
    bool have_model = false, have_train = false;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        std::istringstream iss(line);
        std::string key;
        iss >> key;
        if (key == "step") {
            iss >> ckpt.step;
        } else if (key == "scheme") {
            iss >> ckpt.scheme;
        } else if (key == "running_mlm_loss") {
            iss >> ckpt.running_mlm_loss;
        } else if (key == "model") {
            auto kv = parse_kv(iss);
            try {
                ModelConfig& c = ckpt.model_config;
                c.n_layers = std::stoi(kv.at("n_layers"));
                c.hidden_dim = std::stoi(kv.at("hidden_dim"));
                c.n_heads = std::stoi(kv.at("n_heads"));
                c.ffn_dim = std::stoi(kv.at("ffn_dim"));
                c.vocab_size = std::stoi(kv.at("vocab_size"));
                c.max_seq_len = std::stoi(kv.at("max_seq_len"));
                c.n_classes = std::stoi(kv.at("n_classes"));
                c.layernorm_epsilon = std::stod(kv.at("layernorm_epsilon"));
                c.init_std = std::stod(kv.at("init_std"));
                c.seed = std::stoull(kv.at("seed"));
            } catch (const std::exception&) {
                throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                      "corrupt header: bad model config line");
            }
            have_model = true;
        } else if (key == "train") {
            auto kv = parse_kv(iss);
            try {
                TrainConfig& c = ckpt.train_config;
                c.total_steps = std::stoi(kv.at("total_steps"));
                c.batch_size = std::stoi(kv.at("batch_size"));
                c.peak_lr = std::stod(kv.at("peak_lr"));
                c.warmup_steps = std::stoi(kv.at("warmup_steps"));
                c.beta1 = std::stod(kv.at("beta1"));
                c.beta2 = std::stod(kv.at("beta2"));
                c.adam_epsilon = std::stod(kv.at("adam_epsilon"));
                c.weight_decay = std::stod(kv.at("weight_decay"));
                c.mask_rate = std::stod(kv.at("mask_rate"));
                c.checkpoint_interval = std::stoi(kv.at("checkpoint_interval"));
                c.seed = std::stoull(kv.at("seed"));
            } catch (const std::exception&) {
                throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                      "corrupt header: bad train config line");
            }
            have_train = true;
        } else if (key == "tensor") {
            ManifestEntry e;
            std::string shape;
            if (!(iss >> e.name >> shape >> e.offset))
                throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                      "corrupt header: bad tensor line");
            const auto x = shape.find('x');
            if (x == std::string::npos)
                throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                      "corrupt header: bad tensor shape");
            e.rows = std::stol(shape.substr(0, x));
            e.cols = std::stol(shape.substr(x + 1));
            manifest.push_back(std::move(e));
        } else {
            throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                  "corrupt header: unknown key '" + key + "'");
        }
    }
    if (!have_model || !have_train || manifest.empty())
        throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                              "corrupt header: missing sections in " + path);

    ckpt.params = allocate_parameters<float>(ckpt.model_config);
    ckpt.adam.m = zeros_like(ckpt.params);
    ckpt.adam.v = zeros_like(ckpt.params);

    std::vector<std::pair<std::string, Mat<float>*>> expected;
    visit_all(ckpt, [&](const std::string& n, Mat<float>& m) { expected.emplace_back(n, &m); });
    if (expected.size() != manifest.size())
        throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                              "shape mismatch: tensor count " + std::to_string(manifest.size()) +
                                  " vs expected " + std::to_string(expected.size()));
    std::size_t offset = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, mat] = expected[i];
        const auto& e = manifest[i];
        if (e.name != name || e.rows != mat->rows() || e.cols != mat->cols() || e.offset != offset)
            throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                                  "shape mismatch: tensor '" + e.name + "'");
        offset += static_cast<std::size_t>(mat->size()) * sizeof(float);
    }
    for (auto& [name, mat] : expected) {
        in.read(reinterpret_cast<char*>(mat->data()),
                static_cast<std::streamsize>(mat->size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(mat->size() * sizeof(float)))
            throw CheckpointError(CheckpointError::Kind::TruncatedPayload,
                                  "truncated payload at tensor '" + name + "' in " + path);
    }
    return ckpt;
}

}  // namespace outlierlab
