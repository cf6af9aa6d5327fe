// Command-line front end: generate / train / eval / ablate / visualize.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "msvit/cli.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration file (key = value lines)");
    cmd->add_option("--seed", args.seed, "override the configured seed");
    cmd->add_option("--out", args.out, "override the configured output directory");
}

msvit::RunConfig resolve_config(const CommonArgs& args) {
    msvit::RunConfig cfg;
    if (!args.config_path.empty()) cfg = msvit::load_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.out = *args.out;
    return cfg;
}

std::vector<std::uint32_t> parse_ids(const std::string& csv) {
    std::vector<std::uint32_t> ids;
    std::stringstream ss(csv);
    std::string one;
    while (std::getline(ss, one, ','))
        if (!one.empty()) ids.push_back(static_cast<std::uint32_t>(std::stoul(one)));
    return ids;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal selective ViT: synthetic data, training, ablations, token visualization"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, ablate_args, viz_args;
    std::string axis, checkpoint, ids_csv;
    std::size_t eval_fold = 0;

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(gen, gen_args);
    auto* train = app.add_subcommand("train", "five-fold cross-validated training");
    add_common(train, train_args);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one fold's test split");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--fold", eval_fold, "fold index (default 0)");
    auto* ablate = app.add_subcommand("ablate", "rerun training over an ablation axis");
    add_common(ablate, ablate_args);
    ablate->add_option("--axis", axis, "selection_rate|tsia|record|st|mask")->required();
    auto* viz = app.add_subcommand("visualize", "selection-frequency maps as PGM files");
    add_common(viz, viz_args);
    viz->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    viz->add_option("--ids", ids_csv, "comma-separated sample ids (default: all)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return msvit::cmd_generate(resolve_config(gen_args));
        if (train->parsed()) return msvit::cmd_train(resolve_config(train_args));
        if (eval->parsed()) return msvit::cmd_eval(resolve_config(eval_args), checkpoint, eval_fold);
        if (ablate->parsed()) return msvit::cmd_ablate(resolve_config(ablate_args), axis);
        if (viz->parsed()) return msvit::cmd_visualize(resolve_config(viz_args), checkpoint, parse_ids(ids_csv));
    } catch (const msvit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const msvit::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 4;
    } catch (const msvit::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
