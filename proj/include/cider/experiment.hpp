#pragma once

// Multi-seed runs, ablation table, overlap-ratio sweep and grid search.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cider/config.hpp"
#include "cider/evaluation.hpp"
#include "cider/model.hpp"
#include "cider/trainer.hpp"

#ifndef CIDER_VERSION
#define CIDER_VERSION "0.1.0-unknown"
#endif

namespace cider::experiment {

using config::ExperimentConfig;

inline std::string version() { return CIDER_VERSION; }

struct RunOutput {
    std::unique_ptr<CiderModel> model;
    TrainResult train;
    eval::Evaluation evaluation;
    std::size_t cross_domain_inferred = 0;
};

inline std::array<data::NegativeSamplePool, 2> negative_pools(const data::InteractionDataset& ds, std::uint64_t seed,
                                                            int pool_size) {
    const auto n = static_cast<std::size_t>(pool_size);
    return {data::sample_negatives(ds, Domain::x, seed, n), data::sample_negatives(ds, Domain::y, seed, n)};
}

/// Trains one model with the run seed and evaluates it on the configured split.
inline RunOutput run_once(const ExperimentConfig& cfg, const data::InteractionDataset& ds, std::uint64_t seed,
                          const StepObserver& observer = {}, const EpochObserver& epoch_observer = {}) {
    cfg.validate();
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    RunOutput out;
    out.model = std::make_unique<CiderModel>(cfg.model, tc.variant, DomainSizes::of(ds), seed);
    out.train = train(*out.model, ds, tc, observer, epoch_observer);
    const auto reps = out.model->infer(ds, training_adjacency(ds), out.train.trained_pairs);
    out.cross_domain_inferred = reps.cross_domain_inferred;
    out.evaluation = eval::evaluate(reps, negative_pools(ds, seed, cfg.eval.pool_size), cfg.eval.split, cfg.eval.cutoffs);
    return out;
}

/// Seeds used for the configured number of runs.
inline std::vector<std::uint64_t> run_seeds(const ExperimentConfig& cfg) {
    std::vector<std::uint64_t> s;
    for (int r = 0; r < cfg.runs; ++r) s.push_back(cfg.train.seed + static_cast<std::uint64_t>(r));
    return s;
}

struct MultiRun {
    std::vector<std::map<std::string, eval::MetricValues>> runs;
    eval::MetricReport report;
};

/// Called after every finished run with its seed and output; lets callers
/// persist logs and checkpoints.
using RunHook = std::function<void(std::uint64_t seed, const RunOutput&)>;

inline MultiRun run_seeds(const ExperimentConfig& cfg, const data::InteractionDataset& ds, const RunHook& hook = {}) {
    MultiRun m;
    for (auto seed : run_seeds(cfg)) {
        const auto run = run_once(cfg, ds, seed);
        if (hook) hook(seed, run);
        m.runs.push_back(eval::metric_values(run.evaluation));
    }
    m.report = eval::aggregate_runs(m.runs);
    return m;
}

struct LabeledRun {
    std::vector<std::pair<std::string, std::string>> labels;
    MultiRun result;
};

inline std::vector<eval::ReportRow> report_rows(const std::vector<LabeledRun>& runs) {
    std::vector<eval::ReportRow> rows;
    for (const auto& r : runs) rows.push_back({r.labels, r.result.report});
    return rows;
}

inline const std::vector<objective::Variant>& ablation_variants() {
    static const std::vector<objective::Variant> v{objective::Variant::a, objective::Variant::b, objective::Variant::c,
                                                   objective::Variant::d, objective::Variant::e,
                                                   objective::Variant::full};
    return v;
}

using LabeledHook = std::function<void(const std::vector<std::pair<std::string, std::string>>& labels,
                                       std::uint64_t seed, const RunOutput&)>;

inline RunHook bind_hook(const LabeledHook& hook, const std::vector<std::pair<std::string, std::string>>& labels) {
    if (!hook) return {};
    return [hook, labels](std::uint64_t seed, const RunOutput& r) { hook(labels, seed, r); };
}

/// Variants A-E and full on the same data and seeds.
inline std::vector<LabeledRun> ablate(const ExperimentConfig& cfg, const data::InteractionDataset& ds,
                                      const std::vector<objective::Variant>& variants = ablation_variants(),
                                      const LabeledHook& hook = {}) {
    std::vector<LabeledRun> out;
    for (const auto v : variants) {
        ExperimentConfig c = cfg;
        c.train.variant = v;
        std::vector<std::pair<std::string, std::string>> labels{{"variant", objective::to_string(v)}};
        out.push_back({labels, run_seeds(c, ds, bind_hook(hook, labels))});
    }
    return out;
}

inline const std::vector<int>& default_ratios() {
    static const std::vector<int> r{0, 25, 50, 75, 100};
    return r;
}

/// Retrains with the given percentages of training pairs kept paired; the
/// test set and negative pools stay fixed.
inline std::vector<LabeledRun> overlap_ratio_harness(const ExperimentConfig& cfg, const data::InteractionDataset& ds,
                                                     const std::vector<int>& ratios = default_ratios(),
                                                     const LabeledHook& hook = {}) {
    std::vector<LabeledRun> out;
    for (int r : ratios) {
        if (r < 0 || r > 100) throw ConfigError("overlap ratio " + std::to_string(r) + "% is not in [0, 100]");
        ExperimentConfig c = cfg;
        c.train.overlap_ratio = r / 100.0;
        std::vector<std::pair<std::string, std::string>> labels{{"ratio", std::to_string(r)}};
        out.push_back({labels, run_seeds(c, ds, bind_hook(hook, labels))});
    }
    return out;
}

/// One multi-seed run per grid point. Points that change the dataset spec
/// regenerate the data.
inline std::vector<LabeledRun> grid_search(const ExperimentConfig& cfg, const data::InteractionDataset& ds,
                                           const LabeledHook& hook = {}) {
    std::vector<LabeledRun> out;
    for (const auto& point : config::grid_points(cfg.grid)) {
        ExperimentConfig c = cfg;
        c.grid.clear();
        c = config::apply_params(c, point);
        const bool same_data = config::serialize_data(c) == config::serialize_data(cfg);
        const auto local = same_data ? data::InteractionDataset{} : config::load_dataset(c);
        out.push_back({point, run_seeds(c, same_data ? ds : local, bind_hook(hook, point))});
    }
    return out;
}

/// Everything needed to reproduce a CLI run.
inline nlohmann::json manifest(const ExperimentConfig& cfg, const std::string& command,
                               const std::vector<std::string>& argv, const std::vector<std::uint64_t>& seeds) {
    nlohmann::json j;
    j["version"] = version();
    j["command"] = command;
    j["argv"] = argv;
    j["seeds"] = seeds;
    j["config_toml"] = config::serialize(cfg);
    return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cider::experiment
