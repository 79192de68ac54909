#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "outlierlab/checkpoint_io.hpp"
#include "outlierlab/experiment.hpp"

namespace py = pybind11;
using namespace outlierlab;

namespace {

py::array_t<float> tensor_copy(const Mat<float>& m) {
    py::array_t<float> out({m.rows(), m.cols()});
    std::copy(m.data(), m.data() + m.size(), out.mutable_data());
    return out;
}

py::dict params_to_dict(const ParametersF& params) {
    py::dict d;
    visit_tensors(params, [&](const std::string& name, const Mat<float>& t) {
        d[name.c_str()] = tensor_copy(t);
    });
    return d;
}

py::array_t<TokenId> stream_tokens(const TrainingStream& s) {
    py::array_t<TokenId> out({static_cast<py::ssize_t>(s.n_rows()),
                              static_cast<py::ssize_t>(s.max_seq_len)});
    std::copy(s.tokens.begin(), s.tokens.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "small masked-language-model toolkit for studying outlier hidden dimensions";
    m.attr("__version__") = kToolVersion;

    py::enum_<Scheme>(m, "Scheme")
        .value("SPLIT", Scheme::Split)
        .value("ONE_SEP", Scheme::OneSep)
        .value("RANDOMIZE", Scheme::Randomize);

    py::class_<CorpusSpec>(m, "CorpusSpec")
        .def(py::init<>())
        .def_readwrite("vocab_size", &CorpusSpec::vocab_size)
        .def_readwrite("zipf_exponent", &CorpusSpec::zipf_exponent)
        .def_readwrite("n_documents", &CorpusSpec::n_documents)
        .def_readwrite("sentences_per_document", &CorpusSpec::sentences_per_document)
        .def_readwrite("min_sentence_len", &CorpusSpec::min_sentence_len)
        .def_readwrite("max_sentence_len", &CorpusSpec::max_sentence_len)
        .def_readwrite("seed", &CorpusSpec::seed);

    py::class_<TrainingStream>(m, "TrainingStream")
        .def_readonly("max_seq_len", &TrainingStream::max_seq_len)
        .def_readonly("valid_len", &TrainingStream::valid_len)
        .def_readonly("truncated_sentences", &TrainingStream::truncated_sentences)
        .def_property_readonly("n_rows", &TrainingStream::n_rows)
        .def_property_readonly("tokens", &stream_tokens);

    py::class_<FrequencyTable>(m, "FrequencyTable")
        .def_readonly("counts", &FrequencyTable::counts)
        .def_readonly("total", &FrequencyTable::total)
        .def("relative", &FrequencyTable::relative);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("seed", &ModelConfig::seed);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("total_steps", &TrainConfig::total_steps)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("peak_lr", &TrainConfig::peak_lr)
        .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
        .def_readwrite("checkpoint_interval", &TrainConfig::checkpoint_interval)
        .def_readwrite("mask_rate", &TrainConfig::mask_rate)
        .def_readwrite("seed", &TrainConfig::seed);

    py::class_<AblationMask>(m, "AblationMask")
        .def(py::init([](std::vector<int> dims, std::vector<int> layers) {
                 AblationMask mask;
                 mask.dims = std::move(dims);
                 mask.layers = std::move(layers);
                 return mask;
             }),
             py::arg("dims"), py::arg("layers") = std::vector<int>{})
        .def_readwrite("dims", &AblationMask::dims)
        .def_readwrite("layers", &AblationMask::layers);

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_readonly("step", &Checkpoint::step)
        .def_readonly("scheme", &Checkpoint::scheme)
        .def_readonly("running_mlm_loss", &Checkpoint::running_mlm_loss)
        .def_property_readonly("params",
                               [](const Checkpoint& c) { return params_to_dict(c.params); });

    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("checkpoints", &TrainResult::checkpoints)
        .def_readonly("step_losses", &TrainResult::step_losses);

    py::class_<CandidateOutlier>(m, "CandidateOutlier")
        .def_readonly("dim", &CandidateOutlier::dim)
        .def_readonly("per_layer_z", &CandidateOutlier::per_layer_z)
        .def_readonly("coverage", &CandidateOutlier::coverage)
        .def_readonly("max_abs_z", &CandidateOutlier::max_abs_z);

    m.def("generate_corpus", &generate_corpus, py::arg("spec"));
    m.def("apply_tokenization_scheme", &apply_tokenization_scheme, py::arg("corpus"),
          py::arg("scheme"), py::arg("max_seq_len"), py::arg("freq_threshold") = 1e-5,
          py::arg("replace_prob") = 0.5, py::arg("seed") = 0);
    m.def(
        "estimate_frequency",
        [](const TrainingStream& s, int vocab_size, bool include_special) {
            return estimate_frequency(s, vocab_size, include_special);
        },
        py::arg("stream"), py::arg("vocab_size"), py::arg("include_special") = false);
    m.def("train_mlm", &train_mlm, py::arg("train_config"), py::arg("model_config"),
          py::arg("stream"),
          py::call_guard<py::gil_scoped_release>());
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
    m.def("save_checkpoint", &save_checkpoint, py::arg("checkpoint"), py::arg("path"));
    m.def(
        "find_candidates",
        [](const Checkpoint& ckpt, double k_sigma, double min_coverage) {
            return find_candidates(ckpt.params, k_sigma, min_coverage);
        },
        py::arg("checkpoint"), py::arg("k_sigma") = 3.0, py::arg("min_coverage") = 0.5);
    m.def(
        "eval_mlm_loss",
        [](const Checkpoint& ckpt, const TrainingStream& stream, int max_rows, double mask_rate,
           std::uint64_t seed, const AblationMask& ablation) {
            return eval_mlm_loss(ckpt.params, stream, max_rows, mask_rate, seed, ablation);
        },
        py::arg("checkpoint"), py::arg("stream"), py::arg("max_rows") = 256,
        py::arg("mask_rate") = 0.15, py::arg("seed") = 0,
        py::arg("ablation") = AblationMask{},
        py::call_guard<py::gil_scoped_release>());
    m.def(
        "hidden_states",
        [](const Checkpoint& ckpt, const TrainingStream& stream, int row,
           const AblationMask& ablation) {
            if (row < 0 || row >= stream.n_rows()) throw std::out_of_range("row out of range");
            BatchView view{stream.row(row), stream.valid_len.data() + row, 1, stream.max_seq_len};
            const ForwardResult<float> result = forward(ckpt.params, view, ablation);
            py::list out;
            for (const auto& hs : result.trace.hidden_states) out.append(tensor_copy(hs));
            return out;
        },
        py::arg("checkpoint"), py::arg("stream"), py::arg("row"),
        py::arg("ablation") = AblationMask{});
    m.def("default_config_text", &default_config_text);
    m.def(
        "run_command",
        [](const std::string& command, const std::string& config_path,
           const std::vector<std::string>& overrides, const std::string& out_dir,
           const std::string& seed) {
            std::string error;
            const int code =
                run_command(command, config_path, overrides, out_dir, seed, error);
            return py::make_tuple(code, error);
        },
        py::arg("command"), py::arg("config_path") = "",
        py::arg("overrides") = std::vector<std::string>{}, py::arg("out_dir") = "",
        py::arg("seed") = "");
}
