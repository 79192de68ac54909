#include <Eigen/Core>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "outlierlab/experiment.hpp"

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("OUTLIER_LAB_THREADS")) {
        const int n = std::atoi(threads);
        if (n > 0) Eigen::setNbThreads(n);
    }
    CLI::App app{"outlier-lab: train small masked-language models and analyze "
                 "outlier hidden dimensions"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::string seed;
    app.add_option("--config", config_path, "configuration file ([section] / key = value)");
    app.add_option("--set", overrides, "override a config value, e.g. --set train.total_steps=100")
        ->take_all();
    app.add_option("--out", out_dir, "artifact directory (overrides output.dir)");
    app.add_option("--seed", seed, "master seed (overrides output.seed)");

    bool print_config = false;
    app.add_flag("--print-config", print_config, "print the default configuration and exit");

    static const std::vector<std::pair<std::string, std::string>> kCommands = {
        {"gen-corpus", "generate the corpus, tokenized stream and frequency table"},
        {"train", "run masked-language-model pre-training with checkpoints"},
        {"detect", "detect outlier dimensions and measure ablation damage"},
        {"ablate", "write a checkpoint with the configured dims zeroed"},
        {"sweep", "layerwise ablation sweep for one dimension"},
        {"diagnose", "correlation and generation-shift diagnostics"},
        {"dynamics", "probe/ablation metrics across training checkpoints"},
        {"compare-schemes", "run all tokenization schemes from a shared initialization"},
        {"report", "verify the manifest and summarize the run"},
    };
    for (const auto& [name, help] : kCommands) app.add_subcommand(name, help)->fallthrough();

    CLI11_PARSE(app, argc, argv);

    if (print_config) {
        std::cout << outlierlab::default_config_text();
        return 0;
    }
    const auto subcommands = app.get_subcommands();
    if (subcommands.empty()) {
        std::cerr << "error: no command given (try --help)\n";
        return 2;
    }

    std::string error;
    const int code = outlierlab::run_command(subcommands.front()->get_name(), config_path,
                                             overrides, out_dir, seed, error);
    if (code != 0) std::cerr << "error: " << error << '\n';
    return code;
}
