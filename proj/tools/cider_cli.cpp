#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cider/checkpoint.hpp"
#include "cider/config.hpp"
#include "cider/evaluation.hpp"
#include "cider/experiment.hpp"
#include "cider/synthetic.hpp"

namespace fs = std::filesystem;
using namespace cider;

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string variant;
    std::string ratio;
    std::vector<std::string> params;
    bool verbose = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_path, "TOML experiment config")->check(CLI::ExistingFile);
    app->add_option("--seed", f.seed, "Run seed (first seed when runs > 1)");
    app->add_option("--out", f.out, "Output directory (default: $CIDER_OUT, then experiment.out)");
    app->add_option("--variant", f.variant, "full, A, B, C, D or E (ablate: comma-separated subset)");
    app->add_option("--ratio", f.ratio, "Overlap ratio in percent (overlap-sweep: comma-separated list)");
    app->add_option("--param", f.params, "key=value[,value...]; repeatable")->take_all();
    app->add_flag("-v,--verbose", f.verbose, "Per-epoch progress on stderr");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = s.find(',', start);
        out.push_back(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Config after flags; `grid` collects multi-valued --param entries instead of
/// rejecting them.
config::ExperimentConfig resolve_config(const CommonFlags& f, bool grid) {
    auto cfg = f.config_path.empty() ? config::ExperimentConfig{} : config::load_config(f.config_path);
    std::vector<std::pair<std::string, std::string>> singles;
    for (const auto& p : f.params) {
        auto [key, values] = config::parse_param(p);
        if (grid) {
            std::erase_if(cfg.grid, [&](const auto& e) { return e.first == key; });
            cfg.grid.emplace_back(key, values);
        } else if (values.size() != 1) {
            throw ConfigError("--param " + key + " takes a single value outside grid");
        } else {
            singles.emplace_back(key, values.front());
        }
    }
    cfg = config::apply_params(cfg, singles);
    if (f.seed) cfg.train.seed = *f.seed;
    if (!f.variant.empty() && f.variant.find(',') == std::string::npos) {
        cfg.train.variant = objective::parse_variant(f.variant);
    }
    if (const char* env = std::getenv("CIDER_OUT"); env != nullptr && *env != '\0') cfg.out = env;
    if (!f.out.empty()) cfg.out = f.out;
    cfg.validate();
    return cfg;
}

int parse_percent(const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || v < 0 || v > 100) throw ConfigError("--ratio expects percentages in [0, 100], got '" + s + "'");
    return v;
}

void write_report(const fs::path& dir, const std::string& stem, const eval::MetricReport& report,
                  const std::vector<std::pair<std::string, std::string>>& labels = {}) {
    experiment::write_json(dir / (stem + ".json"), eval::to_json(report));
    std::ofstream csv(dir / (stem + ".csv"));
    if (!csv) throw IoError("cannot write " + (dir / (stem + ".csv")).string());
    eval::write_report_csv(csv, {{labels, report}});
}

void write_table(const fs::path& dir, const std::string& stem, const std::vector<experiment::LabeledRun>& runs) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : runs) {
        nlohmann::json row;
        for (const auto& [k, v] : r.labels) row[k] = v;
        row["report"] = eval::to_json(r.result.report);
        j.push_back(row);
    }
    experiment::write_json(dir / (stem + ".json"), j);
    std::ofstream csv(dir / (stem + ".csv"));
    if (!csv) throw IoError("cannot write " + (dir / (stem + ".csv")).string());
    eval::write_report_csv(csv, experiment::report_rows(runs));
}

void print_table(const std::vector<experiment::LabeledRun>& runs) {
    for (const auto& r : runs) {
        for (const auto& [k, v] : r.labels) std::cout << k << '=' << v << ' ';
        for (const auto& [domain, metrics] : r.result.report) {
            const auto& m = metrics.at("MRR");
            std::cout << domain << ".MRR=" << m.mean << "+-" << m.std << ' ';
        }
        std::cout << '\n';
    }
}

std::string label_path(const std::vector<std::pair<std::string, std::string>>& labels) {
    std::string s;
    for (const auto& [k, v] : labels) s += (s.empty() ? "" : "_") + k + "=" + v;
    return s;
}

experiment::LabeledHook save_logs(const fs::path& root) {
    return [root](const auto& labels, std::uint64_t seed, const experiment::RunOutput& run) {
        const auto dir = root / "runs" / label_path(labels) / ("seed" + std::to_string(seed));
        fs::create_directories(dir);
        write_loss_log((dir / "loss_log.csv").string(), run.train.log);
        write_report(dir, "report", eval::aggregate_runs({eval::metric_values(run.evaluation)}));
    };
}

StepObserver progress(bool verbose) {
    if (!verbose) return {};
    return [](const LossLogRow& row) {
        if (row.step % 50 == 0) {
            std::cerr << "epoch " << row.epoch << " step " << row.step << " total " << row.loss.total << '\n';
        }
    };
}

void write_manifest(const fs::path& root, const std::string& command, const config::ExperimentConfig& cfg,
                    const std::vector<std::string>& argv, const std::vector<std::uint64_t>& seeds) {
    experiment::write_json(root / (command + ".manifest.json"), experiment::manifest(cfg, command, argv, seeds));
}

int cmd_train(const CommonFlags& f, bool centroid_dump, const std::vector<std::string>& argv) {
    auto cfg = resolve_config(f, false);
    if (!f.ratio.empty()) cfg.train.overlap_ratio = parse_percent(f.ratio) / 100.0;
    const fs::path root = cfg.out;
    fs::create_directories(root);
    write_manifest(root, "train", cfg, argv, {cfg.train.seed});
    const auto ds = config::load_dataset(cfg);
    std::ofstream dump;
    EpochObserver on_epoch;
    if (centroid_dump) {
        dump.open(root / "centroids_by_epoch.jsonl");
        if (!dump) throw IoError("cannot write " + (root / "centroids_by_epoch.jsonl").string());
        on_epoch = [&dump](const EpochSummary& e, const CiderModel& m) { checkpoint::write_centroid_rows(dump, m, e.epoch); };
    }
    auto run = experiment::run_once(cfg, ds, cfg.train.seed, progress(f.verbose), on_epoch);
    checkpoint::save(root.string(), {cfg, cfg.train.seed, run.train.trained_pairs, experiment::version()}, *run.model, ds);
    write_loss_log((root / "loss_log.csv").string(), run.train.log);
    write_report(root, "report", eval::aggregate_runs({eval::metric_values(run.evaluation)}));
    std::cout << "checkpoint written to " << root.string() << '\n';
    for (const auto& [d, de] : run.evaluation.domains) std::cout << d << ".MRR=" << de.metrics.at("MRR") << '\n';
    return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& ckpt, const std::string& split,
                 const std::vector<std::string>& argv) {
    auto loaded = checkpoint::load(ckpt);
    auto cfg = loaded.meta.config;
    if (!split.empty()) {
        if (split == "test") {
            cfg.eval.split = data::Split::test;
        } else if (split == "validation") {
            cfg.eval.split = data::Split::validation;
        } else {
            throw ConfigError("--split must be test or validation");
        }
    }
    fs::path root = ckpt;
    if (const char* env = std::getenv("CIDER_OUT"); env != nullptr && *env != '\0') root = env;
    if (!f.out.empty()) root = f.out;
    fs::create_directories(root);
    write_manifest(root, "evaluate", cfg, argv, {loaded.meta.seed});
    const auto& ds = loaded.dataset;
    const auto reps = loaded.model->infer(ds, training_adjacency(ds), loaded.meta.trained_pairs);
    const auto e = eval::evaluate(reps, experiment::negative_pools(ds, loaded.meta.seed, cfg.eval.pool_size),
                                  cfg.eval.split, cfg.eval.cutoffs);
    write_report(root, "report", eval::aggregate_runs({eval::metric_values(e)}));
    for (const auto& [d, de] : e.domains) std::cout << d << ".MRR=" << de.metrics.at("MRR") << '\n';
    std::cout << "cross-domain inferred users: " << e.cross_domain_inferred << '\n';
    return 0;
}

int cmd_ablate(const CommonFlags& f, const std::vector<std::string>& argv) {
    const auto cfg = resolve_config(f, false);
    std::vector<objective::Variant> variants = experiment::ablation_variants();
    if (f.variant.find(',') != std::string::npos) {
        variants.clear();
        for (const auto& v : split_list(f.variant)) variants.push_back(objective::parse_variant(v));
    }
    const fs::path root = cfg.out;
    write_manifest(root, "ablate", cfg, argv, experiment::run_seeds(cfg));
    const auto ds = config::load_dataset(cfg);
    const auto runs = experiment::ablate(cfg, ds, variants, save_logs(root));
    write_table(root, "ablation", runs);
    print_table(runs);
    return 0;
}

int cmd_overlap_sweep(const CommonFlags& f, const std::vector<std::string>& argv) {
    const auto cfg = resolve_config(f, false);
    std::vector<int> ratios = experiment::default_ratios();
    if (!f.ratio.empty()) {
        ratios.clear();
        for (const auto& r : split_list(f.ratio)) ratios.push_back(parse_percent(r));
    }
    const fs::path root = cfg.out;
    write_manifest(root, "overlap-sweep", cfg, argv, experiment::run_seeds(cfg));
    const auto ds = config::load_dataset(cfg);
    const auto runs = experiment::overlap_ratio_harness(cfg, ds, ratios, save_logs(root));
    write_table(root, "overlap_sweep", runs);
    print_table(runs);
    return 0;
}

int cmd_grid(const CommonFlags& f, const std::vector<std::string>& argv) {
    const auto cfg = resolve_config(f, true);
    if (cfg.grid.empty()) throw ConfigError("grid: no grid given (use [grid] in the config or --param key=v1,v2)");
    const fs::path root = cfg.out;
    write_manifest(root, "grid", cfg, argv, experiment::run_seeds(cfg));
    const auto ds = config::load_dataset(cfg);
    const auto runs = experiment::grid_search(cfg, ds, save_logs(root));
    write_table(root, "grid", runs);
    print_table(runs);
    return 0;
}

int cmd_make_synthetic(const CommonFlags& f, const std::vector<std::string>& argv) {
    const auto cfg = resolve_config(f, false);
    const fs::path root = cfg.out;
    fs::create_directories(root);
    write_manifest(root, "make-synthetic", cfg, argv, {cfg.data.synthetic.seed});
    const auto plant = synth::generate_plant(cfg.data.synthetic);
    for (const auto& [name, dom] : {std::pair{"x", &plant.x}, std::pair{"y", &plant.y}}) {
        std::ofstream out(root / (std::string(name) + ".csv"));
        if (!out) throw IoError("cannot write " + (root / (std::string(name) + ".csv")).string());
        out << "user_id,item_id\n";
        for (const auto& r : dom->records) out << r.user << ',' << r.item << '\n';
        std::ofstream clusters(root / (std::string(name) + "_clusters.csv"));
        clusters << "user_id,cluster\n";
        for (std::size_t u = 0; u < dom->user_ids.size(); ++u) clusters << dom->user_ids[u] << ',' << dom->user_cluster[u] << '\n';
    }
    const auto ds = data::InteractionDataset::from_records(plant.x.records, plant.y.records, cfg.data.synthetic.seed);
    data::save_dataset((root / "dataset.bin").string(), ds);
    std::cout << "wrote " << ds.x.interactions.size() << " + " << ds.y.interactions.size() << " interactions, "
              << ds.overlap.size() << " overlap users to " << root.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CIDER cross-domain recommender experiments"};
    app.require_subcommand(1);
    CommonFlags flags;
    std::string ckpt;
    std::string split;
    bool centroid_dump = false;

    auto* train = app.add_subcommand("train", "Train one model, save a checkpoint and its test report");
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a saved checkpoint");
    auto* ablate = app.add_subcommand("ablate", "Variants A-E and full over the configured seeds");
    auto* sweep = app.add_subcommand("overlap-sweep", "Retrain with 0/25/50/75/100% of overlap pairs");
    auto* grid = app.add_subcommand("grid", "Cartesian hyperparameter sweep");
    auto* synth_cmd = app.add_subcommand("make-synthetic", "Write a synthetic two-domain dataset");
    for (auto* c : {train, evaluate, ablate, sweep, grid, synth_cmd}) add_common(c, flags);
    train->add_flag("--centroid-dump", centroid_dump, "Also write centroids after every epoch");
    evaluate->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    evaluate->add_option("--split", split, "test or validation");

    CLI11_PARSE(app, argc, argv);
    const std::vector<std::string> args(argv, argv + argc);
    try {
        if (train->parsed()) return cmd_train(flags, centroid_dump, args);
        if (evaluate->parsed()) return cmd_evaluate(flags, ckpt, split, args);
        if (ablate->parsed()) return cmd_ablate(flags, args);
        if (sweep->parsed()) return cmd_overlap_sweep(flags, args);
        if (grid->parsed()) return cmd_grid(flags, args);
        if (synth_cmd->parsed()) return cmd_make_synthetic(flags, args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
