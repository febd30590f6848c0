// ============================================================================
// pipeline.hpp - JSON configuration, stage orchestration and the end-to-end
//                experiment runner
// ============================================================================

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "texflow/common.hpp"
#include "texflow/dictionary.hpp"
#include "texflow/eval.hpp"
#include "texflow/features.hpp"
#include "texflow/flow.hpp"
#include "texflow/image.hpp"
#include "texflow/scoring.hpp"
#include "texflow/texgen.hpp"

namespace texflow {

using json = nlohmann::json;

// ----------------------------------------------------------------------------
// Configuration
// ----------------------------------------------------------------------------

struct DatasetConfig {
    std::string type = "synthetic";  // synthetic | directory
    std::string path;                // for directory datasets
    SyntheticDatasetSpec synth;
};

struct PipelineConfig {
    DatasetConfig dataset;

    // extractor
    int patch_size = 32;
    int channels = 1;
    int feature_dim = 64;
    int stride = 16;

    PretextParams pretext;  // epochs 270, lr 1e-2, batch 2

    // flow
    int flow_layers = 8;
    double flow_s_max = 3.0;
    int flow_epochs = 60;
    double flow_lr = 1e-2;
    int flow_batch = 32;

    DictLearnConfig dict;  // atom_count 0 -> 2N, beta 0.1, xi 0.05, k_max 10, iters 30

    // scoring
    double score_lambda = 0.0;
    int score_top_k = 5;
    double tau_percentile = 0.95;
    std::string representation = "latent";

    std::string category = "synthetic";
    std::uint64_t seed = 1;
    int threads = 1;
};

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                                const std::string& prefix) {
    if (!obj.is_object()) throw ConfigError("config section " + prefix + " must be an object");
    std::string offending;
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) offending += (offending.empty() ? "" : ", ") + prefix + key;
    if (!offending.empty()) throw ConfigError("unknown config keys: " + offending);
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback, const std::string& prefix) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key " + prefix + key + " has the wrong type");
    }
}

}  // namespace detail

inline PipelineConfig config_from_json(const json& root) {
    using detail::get_or;
    detail::reject_unknown_keys(root,
                                {"dataset", "extractor", "pretext", "flow", "dict", "score",
                                 "category", "seed", "threads"},
                                "");
    PipelineConfig cfg;

    if (root.contains("dataset")) {
        const json& d = root.at("dataset");
        detail::reject_unknown_keys(
            d,
            {"type", "path", "textures", "image_size", "period", "noise_amplitude",
             "train_count", "test_normal_count", "test_anomalous_count", "defect_delta_lo",
             "defect_delta_hi"},
            "dataset.");
        cfg.dataset.type = get_or<std::string>(d, "type", "synthetic", "dataset.");
        if (cfg.dataset.type != "synthetic" && cfg.dataset.type != "directory")
            throw ConfigError("dataset.type must be \"synthetic\" or \"directory\"");
        cfg.dataset.path = get_or<std::string>(d, "path", "", "dataset.");
        if (cfg.dataset.type == "directory" && cfg.dataset.path.empty())
            throw ConfigError("dataset.path is required when dataset.type is \"directory\"");
        if (d.contains("textures")) {
            cfg.dataset.synth.textures.clear();
            for (const auto& t : d.at("textures"))
                cfg.dataset.synth.textures.push_back(
                    texture_kind_from_string(t.get<std::string>()));
            if (cfg.dataset.synth.textures.empty())
                throw ConfigError("dataset.textures must not be empty");
        }
        auto& s = cfg.dataset.synth;
        s.image_size = get_or(d, "image_size", s.image_size, "dataset.");
        s.period = get_or(d, "period", s.period, "dataset.");
        s.noise_amplitude = get_or(d, "noise_amplitude", s.noise_amplitude, "dataset.");
        s.train_count = get_or(d, "train_count", s.train_count, "dataset.");
        s.test_normal_count = get_or(d, "test_normal_count", s.test_normal_count, "dataset.");
        s.test_anomalous_count =
            get_or(d, "test_anomalous_count", s.test_anomalous_count, "dataset.");
        s.defect_delta_lo = get_or(d, "defect_delta_lo", s.defect_delta_lo, "dataset.");
        s.defect_delta_hi = get_or(d, "defect_delta_hi", s.defect_delta_hi, "dataset.");
    }

    if (root.contains("extractor")) {
        const json& e = root.at("extractor");
        detail::reject_unknown_keys(e, {"patch_size", "channels", "feature_dim", "stride"},
                                    "extractor.");
        cfg.patch_size = get_or(e, "patch_size", cfg.patch_size, "extractor.");
        cfg.channels = get_or(e, "channels", cfg.channels, "extractor.");
        cfg.feature_dim = get_or(e, "feature_dim", cfg.feature_dim, "extractor.");
        cfg.stride = get_or(e, "stride", cfg.stride, "extractor.");
        if (cfg.stride < 1) throw ConfigError("extractor.stride must be >= 1");
    }

    if (root.contains("pretext")) {
        const json& p = root.at("pretext");
        detail::reject_unknown_keys(
            p, {"epochs", "lr", "batch", "momentum", "cutpaste_area", "cutpaste_aspect"},
            "pretext.");
        cfg.pretext.epochs = get_or(p, "epochs", cfg.pretext.epochs, "pretext.");
        cfg.pretext.lr = get_or(p, "lr", cfg.pretext.lr, "pretext.");
        cfg.pretext.batch = get_or(p, "batch", cfg.pretext.batch, "pretext.");
        cfg.pretext.momentum = get_or(p, "momentum", cfg.pretext.momentum, "pretext.");
        if (p.contains("cutpaste_area")) {
            const auto v = p.at("cutpaste_area").get<std::vector<double>>();
            if (v.size() != 2) throw ConfigError("pretext.cutpaste_area must be [lo, hi]");
            cfg.pretext.cutpaste.area_lo = v[0];
            cfg.pretext.cutpaste.area_hi = v[1];
        }
        if (p.contains("cutpaste_aspect")) {
            const auto v = p.at("cutpaste_aspect").get<std::vector<double>>();
            if (v.size() != 2) throw ConfigError("pretext.cutpaste_aspect must be [lo, hi]");
            cfg.pretext.cutpaste.aspect_lo = v[0];
            cfg.pretext.cutpaste.aspect_hi = v[1];
        }
    }

    if (root.contains("flow")) {
        const json& f = root.at("flow");
        detail::reject_unknown_keys(f, {"layers", "s_max", "epochs", "lr", "batch"}, "flow.");
        cfg.flow_layers = get_or(f, "layers", cfg.flow_layers, "flow.");
        cfg.flow_s_max = get_or(f, "s_max", cfg.flow_s_max, "flow.");
        cfg.flow_epochs = get_or(f, "epochs", cfg.flow_epochs, "flow.");
        cfg.flow_lr = get_or(f, "lr", cfg.flow_lr, "flow.");
        cfg.flow_batch = get_or(f, "batch", cfg.flow_batch, "flow.");
    }

    if (root.contains("dict")) {
        const json& d = root.at("dict");
        detail::reject_unknown_keys(
            d, {"atom_count", "beta", "xi_rel", "k_max", "iters", "ista_iters"}, "dict.");
        cfg.dict.atom_count = get_or(d, "atom_count", cfg.dict.atom_count, "dict.");
        cfg.dict.beta = get_or(d, "beta", cfg.dict.beta, "dict.");
        cfg.dict.xi_rel = get_or(d, "xi_rel", cfg.dict.xi_rel, "dict.");
        cfg.dict.k_max = get_or(d, "k_max", cfg.dict.k_max, "dict.");
        cfg.dict.iters = get_or(d, "iters", cfg.dict.iters, "dict.");
        cfg.dict.ista_iters = get_or(d, "ista_iters", cfg.dict.ista_iters, "dict.");
    }

    if (root.contains("score")) {
        const json& s = root.at("score");
        detail::reject_unknown_keys(s, {"lambda", "top_k", "tau_percentile", "representation"},
                                    "score.");
        cfg.score_lambda = get_or(s, "lambda", cfg.score_lambda, "score.");
        cfg.score_top_k = get_or(s, "top_k", cfg.score_top_k, "score.");
        cfg.tau_percentile = get_or(s, "tau_percentile", cfg.tau_percentile, "score.");
        cfg.representation = get_or<std::string>(s, "representation", cfg.representation, "score.");
        representation_from_string(cfg.representation);  // validates
        if (cfg.score_lambda < 0.0 || cfg.score_lambda > 1.0)
            throw ConfigError("score.lambda must be in [0,1]");
        if (cfg.score_top_k < 1) throw ConfigError("score.top_k must be >= 1");
        if (cfg.tau_percentile <= 0.0 || cfg.tau_percentile >= 1.0)
            throw ConfigError("score.tau_percentile must be in (0,1)");
    }

    cfg.category = detail::get_or<std::string>(root, "category", cfg.category, "");
    cfg.seed = detail::get_or<std::uint64_t>(root, "seed", cfg.seed, "");
    cfg.threads = detail::get_or(root, "threads", cfg.threads, "");
    if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
    return cfg;
}

// Canonical snapshot with every field materialized; parsing it back yields
// the same configuration.
inline json config_to_json(const PipelineConfig& cfg) {
    json root;
    json& d = root["dataset"];
    d["type"] = cfg.dataset.type;
    if (!cfg.dataset.path.empty()) d["path"] = cfg.dataset.path;
    json textures = json::array();
    for (TextureKind k : cfg.dataset.synth.textures) textures.push_back(to_string(k));
    d["textures"] = textures;
    d["image_size"] = cfg.dataset.synth.image_size;
    d["period"] = cfg.dataset.synth.period;
    d["noise_amplitude"] = cfg.dataset.synth.noise_amplitude;
    d["train_count"] = cfg.dataset.synth.train_count;
    d["test_normal_count"] = cfg.dataset.synth.test_normal_count;
    d["test_anomalous_count"] = cfg.dataset.synth.test_anomalous_count;
    d["defect_delta_lo"] = cfg.dataset.synth.defect_delta_lo;
    d["defect_delta_hi"] = cfg.dataset.synth.defect_delta_hi;

    json& e = root["extractor"];
    e["patch_size"] = cfg.patch_size;
    e["channels"] = cfg.channels;
    e["feature_dim"] = cfg.feature_dim;
    e["stride"] = cfg.stride;

    json& p = root["pretext"];
    p["epochs"] = cfg.pretext.epochs;
    p["lr"] = cfg.pretext.lr;
    p["batch"] = cfg.pretext.batch;
    p["momentum"] = cfg.pretext.momentum;
    p["cutpaste_area"] = {cfg.pretext.cutpaste.area_lo, cfg.pretext.cutpaste.area_hi};
    p["cutpaste_aspect"] = {cfg.pretext.cutpaste.aspect_lo, cfg.pretext.cutpaste.aspect_hi};

    json& f = root["flow"];
    f["layers"] = cfg.flow_layers;
    f["s_max"] = cfg.flow_s_max;
    f["epochs"] = cfg.flow_epochs;
    f["lr"] = cfg.flow_lr;
    f["batch"] = cfg.flow_batch;

    json& dc = root["dict"];
    dc["atom_count"] = cfg.dict.atom_count;
    dc["beta"] = cfg.dict.beta;
    dc["xi_rel"] = cfg.dict.xi_rel;
    dc["k_max"] = cfg.dict.k_max;
    dc["iters"] = cfg.dict.iters;
    dc["ista_iters"] = cfg.dict.ista_iters;

    json& s = root["score"];
    s["lambda"] = cfg.score_lambda;
    s["top_k"] = cfg.score_top_k;
    s["tau_percentile"] = cfg.tau_percentile;
    s["representation"] = cfg.representation;

    root["category"] = cfg.category;
    root["seed"] = cfg.seed;
    root["threads"] = cfg.threads;
    return root;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(root);
}

// Dotted-path overrides from --set key=value flags. Values parse as JSON
// scalars where possible and fall back to strings.
inline void apply_override(json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key=value, got: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }

    json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("--set has an empty path segment: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// ----------------------------------------------------------------------------
// Stage error context
// ----------------------------------------------------------------------------

namespace detail {

template <typename Fn>
auto with_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const DependencyError& e) {
        throw DependencyError("[" + stage + "] " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("[" + stage + "] " + e.what());
    } catch (const Error& e) {
        throw Error("[" + stage + "] " + e.what());
    }
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Dataset materialization
// ----------------------------------------------------------------------------

// Synthetic datasets are a pure function of (config, seed); directory
// datasets are loaded from the MVTec-style tree.
inline std::pair<LabeledDataset, LabeledDataset> load_dataset(const PipelineConfig& cfg) {
    if (cfg.dataset.type == "synthetic")
        return build_synthetic_dataset(cfg.dataset.synth, stage_seed(cfg.seed, "dataset"));
    return load_mvtec_dir(cfg.dataset.path);
}

// ----------------------------------------------------------------------------
// Stage artifact names
// ----------------------------------------------------------------------------

struct StagePaths {
    std::filesystem::path out;

    explicit StagePaths(const std::string& dir) : out(dir) {}

    std::string dataset_dir() const { return (out / "dataset").string(); }
    std::string extractor() const { return (out / "extractor.txex").string(); }
    std::string pretext_loss() const { return (out / "pretext_loss.csv").string(); }
    std::string train_features() const { return (out / "train_features.txaf").string(); }
    std::string flow() const { return (out / "flow.txnf").string(); }
    std::string flow_loss() const { return (out / "flow_loss.csv").string(); }
    std::string train_latents() const { return (out / "train_latents.txaf").string(); }
    std::string nll_stats() const { return (out / "flow_nll_stats.csv").string(); }
    std::string dictionary() const { return (out / "dictionary.txdl").string(); }
    std::string dict_objective() const { return (out / "dict_objective.csv").string(); }
    std::string threshold() const { return (out / "threshold.csv").string(); }
    std::string scores() const { return (out / "scores.csv").string(); }
    std::string maps_dir() const { return (out / "maps").string(); }
    std::string regions_dir() const { return (out / "regions").string(); }
    std::string report_dir() const { return out.string(); }
};

inline void require_artifact(const std::string& path, const std::string& producer_stage) {
    if (!std::filesystem::exists(path))
        throw DependencyError("missing " + path + "; run the `" + producer_stage +
                              "` stage first");
}

inline void write_nll_stats_csv(const NllStats& st, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write NLL stats: " + path);
    out << "median,iqr\n" << fmt_double(st.median) << ',' << fmt_double(st.iqr) << '\n';
}

inline NllStats read_nll_stats_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParameterError("cannot read NLL stats: " + path);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    const auto comma = row.find(',');
    if (header != "median,iqr" || comma == std::string::npos)
        throw FormatError("malformed NLL stats CSV", 0);
    NllStats st;
    st.median = std::strtod(row.substr(0, comma).c_str(), nullptr);
    st.iqr = std::strtod(row.substr(comma + 1).c_str(), nullptr);
    return st;
}

inline void write_threshold_csv(double tau, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write threshold: " + path);
    out << "tau\n" << fmt_double(tau) << '\n';
}

// ----------------------------------------------------------------------------
// Individual pipeline stages (file-based handoff for the CLI)
// ----------------------------------------------------------------------------

inline PatchFeatureSet extract_dataset_features(const Extractor& ex, const LabeledDataset& ds,
                                                int stride, int threads) {
    PatchFeatureSet all;
    for (const auto& item : ds.items)
        append_features(all, extract_features(ex, item.image, item.id, stride, threads));
    return all;
}

inline void stage_synth(const PipelineConfig& cfg, const StagePaths& paths) {
    detail::with_stage("synth", [&] {
        const auto [train, test] = load_dataset(cfg);
        save_dataset(train, test, paths.dataset_dir());
    });
}

inline void stage_pretext_train(const PipelineConfig& cfg, const StagePaths& paths) {
    detail::with_stage("pretext-train", [&] {
        const auto [train, test] = load_dataset(cfg);
        (void)test;
        ExtractorConfig ecfg{cfg.patch_size, cfg.channels, {8, 16, 32}, cfg.feature_dim};
        Extractor ex = Extractor::init(ecfg, stage_seed(cfg.seed, "extractor-init"));
        PretextResult res =
            pretext_train(std::move(ex), train, cfg.pretext, stage_seed(cfg.seed, "pretext"));
        std::filesystem::create_directories(paths.out);
        save_extractor(res.extractor, paths.extractor());
        write_loss_history_csv(res.loss_history, paths.pretext_loss());
        const PatchFeatureSet feats =
            extract_dataset_features(res.extractor, train, cfg.stride, cfg.threads);
        export_features(feats, paths.train_features());
    });
}

inline void stage_flow_train(const PipelineConfig& cfg, const StagePaths& paths) {
    detail::with_stage("flow-train", [&] {
        require_artifact(paths.train_features(), "pretext-train");
        const PatchFeatureSet feats = import_features(paths.train_features());
        FlowModel f = make_flow(int(feats.dim), cfg.flow_layers, cfg.flow_s_max,
                                stage_seed(cfg.seed, "flow-init"));
        FlowTrainResult res = train_flow(std::move(f), feats, cfg.flow_epochs, cfg.flow_lr,
                                         cfg.flow_batch, stage_seed(cfg.seed, "flow"));
        save_flow(res.model, paths.flow());
        write_loss_history_csv(res.loss_history, paths.flow_loss());
        export_features(transform_to_latent(res.model, feats, cfg.threads),
                        paths.train_latents());
        write_nll_stats_csv(compute_nll_stats(res.model, feats), paths.nll_stats());
    });
}

inline void stage_dict_learn(const PipelineConfig& cfg, const StagePaths& paths) {
    detail::with_stage("dict-learn", [&] {
        const bool latent = representation_from_string(cfg.representation) ==
                            SignalRepresentation::Latent;
        const std::string source = latent ? paths.train_latents() : paths.train_features();
        require_artifact(source, latent ? "flow-train" : "pretext-train");
        const PatchFeatureSet feats = import_features(source);
        DictLearnConfig dcfg = cfg.dict;
        dcfg.seed = stage_seed(cfg.seed, "dict");
        const DictLearnResult res = learn(feats, dcfg, cfg.threads);
        save_dictionary(res.dictionary, paths.dictionary());
        write_objective_history_csv(res.objective_history, paths.dict_objective());
    });
}

inline ScoreConfig make_score_config(const PipelineConfig& cfg) {
    ScoreConfig sc;
    sc.lambda = cfg.score_lambda;
    sc.top_k = cfg.score_top_k;
    sc.representation = representation_from_string(cfg.representation);
    sc.omp_xi_rel = cfg.dict.xi_rel;
    sc.omp_k_max = cfg.dict.k_max;
    return sc;
}

inline void stage_score(const PipelineConfig& cfg, const StagePaths& paths) {
    detail::with_stage("score", [&] {
        require_artifact(paths.extractor(), "pretext-train");
        require_artifact(paths.flow(), "flow-train");
        require_artifact(paths.dictionary(), "dict-learn");
        require_artifact(paths.train_features(), "pretext-train");

        const Extractor ex = load_extractor(paths.extractor());
        const FlowModel flow = load_flow(paths.flow());
        const Dictionary dict = load_dictionary(paths.dictionary());

        ScoreConfig sc = make_score_config(cfg);
        if (sc.lambda > 0.0) {
            require_artifact(paths.nll_stats(), "flow-train");
            sc.nll_stats = read_nll_stats_csv(paths.nll_stats());
        }

        const auto [train, test] = load_dataset(cfg);

        // threshold: percentile of training-normal patch scores
        Vec normal_scores;
        for (const auto& item : train.items) {
            const PatchFeatureSet feats =
                extract_features(ex, item.image, item.id, cfg.stride, cfg.threads);
            const AnomalyMap map = patch_scores(feats, flow, dict, sc, cfg.threads);
            normal_scores.insert(normal_scores.end(), map.scores.begin(), map.scores.end());
        }
        const double tau = calibrate_threshold(normal_scores, cfg.tau_percentile);
        write_threshold_csv(tau, paths.threshold());

        std::filesystem::create_directories(paths.maps_dir());
        std::filesystem::create_directories(paths.regions_dir());
        std::ofstream scores_out(paths.scores());
        if (!scores_out) throw ParameterError("cannot write scores.csv");
        scores_out << "id,label,score\n";
        for (const auto& item : test.items) {
            const PatchFeatureSet feats =
                extract_features(ex, item.image, item.id, cfg.stride, cfg.threads);
            const AnomalyMap map = patch_scores(feats, flow, dict, sc, cfg.threads);
            const double s = image_score(map, sc);
            std::string flat_id = item.id;
            for (auto& c : flat_id)
                if (c == '/') c = '_';
            write_heatmap_pgm(map, paths.maps_dir() + "/" + flat_id + ".pgm");
            write_map_csv(map, paths.maps_dir() + "/" + flat_id + ".csv");
            if (std::size_t(sc.top_k) <= map.cell_count())
                write_region_csv(localize(map, sc), paths.regions_dir() + "/" + flat_id + ".csv");
            scores_out << item.id << ',' << (item.anomalous ? "anomalous" : "normal") << ','
                       << fmt_double(s) << '\n';
        }
    });
}

struct ScoredSet {
    std::vector<ScoreRow> rows;
};

inline ScoredSet read_scores_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParameterError("cannot read scores: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "id,label,score")
        throw FormatError("malformed scores.csv header", 0);
    ScoredSet set;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw FormatError("malformed scores.csv row", 0);
        ScoreRow row;
        row.id = line.substr(0, c1);
        const std::string label = line.substr(c1 + 1, c2 - c1 - 1);
        if (label != "normal" && label != "anomalous")
            throw FormatError("unknown label in scores.csv: " + label, 0);
        row.label = label == "anomalous" ? 1 : 0;
        row.score = std::strtod(line.substr(c2 + 1).c_str(), nullptr);
        set.rows.push_back(std::move(row));
    }
    return set;
}

inline ExperimentReport stage_eval(const PipelineConfig& cfg, const StagePaths& paths) {
    return detail::with_stage("eval", [&] {
        require_artifact(paths.scores(), "score");
        const ScoredSet set = read_scores_csv(paths.scores());
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& row : set.rows) {
            scores.push_back(row.score);
            labels.push_back(row.label);
        }
        ExperimentReport report;
        report.category = cfg.category;
        report.auc_value = auc(scores, labels);
        report.scores = set.rows;
        report.roc = roc_curve(scores, labels);
        report.seed = cfg.seed;
        report.config_snapshot = config_to_json(cfg).dump(2);
        write_report(report, paths.report_dir());
        return report;
    });
}

// ----------------------------------------------------------------------------
// End-to-end experiment: pretext-train -> flow-train -> dict-learn -> score
// -> eval, all driven by one master seed. Re-running with the same config
// produces byte-identical artifacts.
// ----------------------------------------------------------------------------

inline ExperimentReport run_experiment(const PipelineConfig& cfg, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const StagePaths paths(out_dir);
    std::filesystem::create_directories(paths.out);

    stage_pretext_train(cfg, paths);
    stage_flow_train(cfg, paths);
    stage_dict_learn(cfg, paths);
    stage_score(cfg, paths);
    ExperimentReport report = stage_eval(cfg, paths);

    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

inline ExperimentReport run_experiment_from_file(const std::string& config_path,
                                                 const std::string& out_dir) {
    return run_experiment(load_config(config_path), out_dir);
}

}  // namespace texflow
