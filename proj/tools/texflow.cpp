// ============================================================================
// texflow CLI - stage-by-stage and end-to-end texture anomaly detection
// ============================================================================

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "texflow/texflow.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    int threads = 0;           // 0 = take from config
    std::int64_t seed = -1;    // <0 = take from config
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
    auto* opt = cmd->add_option("--config", args.config_path, "pipeline config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--set", args.overrides, "override config keys, e.g. --set flow.epochs=50");
    cmd->add_option("--out", args.out_dir, "output directory (default $TEXFLOW_OUT or ./out)");
    cmd->add_option("--threads", args.threads, "cap worker threads");
    cmd->add_option("--seed", args.seed, "master seed override");
}

std::string resolve_out_dir(const CommonArgs& args) {
    if (!args.out_dir.empty()) return args.out_dir;
    if (const char* env = std::getenv("TEXFLOW_OUT"); env && *env) return env;
    return "out";
}

texflow::PipelineConfig resolve_config(const CommonArgs& args) {
    texflow::json root = texflow::json::object();
    if (!args.config_path.empty()) {
        std::ifstream in(args.config_path);
        if (!in) throw texflow::ConfigError("cannot open config file: " + args.config_path);
        try {
            in >> root;
        } catch (const texflow::json::exception& e) {
            throw texflow::ConfigError("config parse error in " + args.config_path + ": " +
                                       e.what());
        }
    }
    for (const auto& assignment : args.overrides) texflow::apply_override(root, assignment);
    texflow::PipelineConfig cfg = texflow::config_from_json(root);
    if (args.threads > 0) cfg.threads = args.threads;
    if (args.seed >= 0) cfg.seed = std::uint64_t(args.seed);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"texflow: texture anomaly detection with a normalizing flow and "
                 "dictionary-learning reconstruction scoring"};
    app.require_subcommand(1);

    CommonArgs synth_args, pretext_args, flow_args, dict_args, score_args, eval_args, run_args;

    auto* synth = app.add_subcommand("synth", "materialize the dataset (images + manifest)");
    add_common(synth, synth_args, true);
    auto* pretext = app.add_subcommand("pretext-train",
                                       "train the extractor on the CutPaste pretext task");
    add_common(pretext, pretext_args, true);
    auto* flow = app.add_subcommand("flow-train", "train the normalizing flow on features");
    add_common(flow, flow_args, true);
    auto* dict = app.add_subcommand("dict-learn", "learn the sparse-coding dictionary");
    add_common(dict, dict_args, true);
    auto* score = app.add_subcommand("score", "score the test set against the trained models");
    add_common(score, score_args, true);
    auto* eval = app.add_subcommand("eval", "compute ROC/AUC and write the report");
    add_common(eval, eval_args, true);
    auto* run = app.add_subcommand("run", "run the full pipeline end to end");
    add_common(run, run_args, true);
    auto* selfcheck = app.add_subcommand("selfcheck", "run the gradient and oracle suites");

    CLI11_PARSE(app, argc, argv);

    try {
        if (selfcheck->parsed()) {
            const bool ok = texflow::run_selfcheck(std::cout);
            return ok ? 0 : 1;
        }

        auto stage = [&](CLI::App* cmd, CommonArgs& args,
                         auto&& fn) -> std::optional<int> {
            if (!cmd->parsed()) return std::nullopt;
            const texflow::PipelineConfig cfg = resolve_config(args);
            const texflow::StagePaths paths(resolve_out_dir(args));
            std::filesystem::create_directories(paths.out);
            fn(cfg, paths);
            return 0;
        };

        if (auto rc = stage(synth, synth_args,
                            [](const auto& cfg, const auto& paths) {
                                texflow::stage_synth(cfg, paths);
                                std::cerr << "dataset written to " << paths.dataset_dir() << "\n";
                            }))
            return *rc;
        if (auto rc = stage(pretext, pretext_args,
                            [](const auto& cfg, const auto& paths) {
                                texflow::stage_pretext_train(cfg, paths);
                                std::cerr << "extractor checkpoint: " << paths.extractor() << "\n";
                            }))
            return *rc;
        if (auto rc = stage(flow, flow_args,
                            [](const auto& cfg, const auto& paths) {
                                texflow::stage_flow_train(cfg, paths);
                                std::cerr << "flow checkpoint: " << paths.flow() << "\n";
                            }))
            return *rc;
        if (auto rc = stage(dict, dict_args,
                            [](const auto& cfg, const auto& paths) {
                                texflow::stage_dict_learn(cfg, paths);
                                std::cerr << "dictionary checkpoint: " << paths.dictionary()
                                          << "\n";
                            }))
            return *rc;
        if (auto rc = stage(score, score_args,
                            [](const auto& cfg, const auto& paths) {
                                texflow::stage_score(cfg, paths);
                                std::cerr << "scores: " << paths.scores() << "\n";
                            }))
            return *rc;
        if (auto rc = stage(eval, eval_args,
                            [](const auto& cfg, const auto& paths) {
                                const auto report = texflow::stage_eval(cfg, paths);
                                std::cout << "category=" << report.category
                                          << " auc=" << texflow::fmt_double(report.auc_value)
                                          << "\n";
                            }))
            return *rc;
        if (auto rc = stage(run, run_args,
                            [](const auto& cfg, const auto& paths) {
                                const auto report =
                                    texflow::run_experiment(cfg, paths.out.string());
                                std::cout << "category=" << report.category
                                          << " auc=" << texflow::fmt_double(report.auc_value)
                                          << " runtime_s="
                                          << texflow::fmt_double(report.runtime_seconds) << "\n";
                            }))
            return *rc;
    } catch (const texflow::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
