#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ulact/config.hpp"
#include "ulact/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"depth-aware unified latent action pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("-c,--config", config_path, "run configuration file (section.key = value lines)");

    const std::pair<const char*, const char*> commands[] = {
        {"gen-data", "generate the synthetic episode dataset"},
        {"train-unilarn", "train the latent action learner"},
        {"extract-latents", "extract latent labels with a frozen learner"},
        {"pretrain", "latent pretraining of the causal transformer"},
        {"finetune", "action fine-tuning from the pretrained checkpoint"},
        {"eval", "closed-loop rollout evaluation (RGB-only inference)"},
        {"probe", "linear probes from frozen latents to expert actions"},
        {"ablate", "run the full ablation grid"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", config_path,
                        "run configuration file (section.key = value lines)");
    }

    CLI11_PARSE(app, argc, argv);

    ulact::RunConfig cfg;
    try {
        cfg = config_path.empty() ? ulact::parse_config_text("")
                                  : ulact::parse_config_file(config_path);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }
    return ulact::run_subcommand(app.get_subcommands().at(0)->get_name(), cfg);
}
