#pragma once

// Experiment configuration, TOML file format, --param overrides and grids.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#ifndef TOML_FLOAT_CHARCONV
#define TOML_FLOAT_CHARCONV 1
#endif
#include "toml.hpp"

#include "cider/data.hpp"
#include "cider/errors.hpp"
#include "cider/model.hpp"
#include "cider/synthetic.hpp"
#include "cider/trainer.hpp"

namespace cider::config {

struct DataConfig {
    std::string path_x;  // empty: use the synthetic generator
    std::string path_y;
    synth::SyntheticSpec synthetic;

    [[nodiscard]] bool is_synthetic() const { return path_x.empty() && path_y.empty(); }
};

struct EvalConfig {
    int pool_size = 999;
    std::vector<int> cutoffs{10, 20, 30};
    data::Split split = data::Split::test;
};

/// Ordered list of (key, values); expanded as a cartesian product.
using Grid = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct ExperimentConfig {
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    int runs = 1;  // seeds seed, seed+1, ...
    std::string out = "runs";
    Grid grid;

    void validate() const {
        if (!data.is_synthetic() && (data.path_x.empty() || data.path_y.empty())) {
            throw ConfigError("data.path_x and data.path_y must both be set (or both empty for synthetic data)");
        }
        if (data.is_synthetic()) data.synthetic.validate();
        model.validate();
        train.validate();
        if (eval.pool_size < 1) throw ConfigError("eval.pool_size must be >= 1");
        if (eval.cutoffs.empty()) throw ConfigError("eval.cutoffs must not be empty");
        for (std::size_t i = 0; i < eval.cutoffs.size(); ++i) {
            if (eval.cutoffs[i] < 1 || (i > 0 && eval.cutoffs[i] <= eval.cutoffs[i - 1])) {
                throw ConfigError("eval.cutoffs must be positive and strictly increasing");
            }
        }
        if (eval.split == data::Split::train) throw ConfigError("eval.split must be test or validation");
        if (runs < 1) throw ConfigError("experiment.runs must be >= 1");
        if (out.empty()) throw ConfigError("experiment.out must not be empty");
    }
};

/// Settings used for the desk-scale synthetic benchmark: sparse users over
/// ten planted interest clusters, small widths and tuned loss weights.
inline ExperimentConfig desk_benchmark() {
    ExperimentConfig c;
    c.data.synthetic.clusters = 10;
    c.data.synthetic.interactions = 5;
    c.model.encoder = {3, 2, 32};
    c.model.centroids = 10;
    c.train.epochs = 50;
    c.train.learning_rate = 1e-2;
    c.train.weights = {1e-3, 1e-2};
    c.eval.pool_size = 99;
    return c;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, r.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

inline std::string node_to_string(const toml::node& n) {
    if (auto v = n.as_string()) return v->get();
    if (auto v = n.as_integer()) return std::to_string(v->get());
    if (auto v = n.as_floating_point()) return format_double(v->get());
    if (auto v = n.as_boolean()) return v->get() ? "true" : "false";
    throw ConfigError("grid values must be strings, numbers or booleans");
}

/// Reads typed values out of a table and complains about leftovers.
class Reader {
public:
    Reader(const toml::table& t, std::string prefix) : t_(t), prefix_(std::move(prefix)) {}

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const toml::node* n = t_.get(key);
        if (n == nullptr) return;
        const std::string where = prefix_ + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!n->is_boolean()) throw ConfigError(where + " must be a boolean");
            out = n->as_boolean()->get();
        } else if constexpr (std::is_integral_v<T>) {
            if (!n->is_integer()) throw ConfigError(where + " must be an integer");
            const auto v = n->as_integer()->get();
            if (v < static_cast<std::int64_t>(std::numeric_limits<T>::min()) ||
                static_cast<std::uint64_t>(std::max<std::int64_t>(v, 0)) > std::numeric_limits<T>::max()) {
                throw ConfigError(where + " is out of range");
            }
            out = static_cast<T>(v);
        } else if constexpr (std::is_floating_point_v<T>) {
            if (auto f = n->as_floating_point()) {
                out = f->get();
            } else if (auto i = n->as_integer()) {
                out = static_cast<double>(i->get());
            } else {
                throw ConfigError(where + " must be a number");
            }
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!n->is_string()) throw ConfigError(where + " must be a string");
            out = n->as_string()->get();
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            const auto* arr = n->as_array();
            if (arr == nullptr) throw ConfigError(where + " must be an array of integers");
            out.clear();
            for (const auto& e : *arr) {
                if (!e.is_integer()) throw ConfigError(where + " must be an array of integers");
                out.push_back(static_cast<int>(e.as_integer()->get()));
            }
        }
    }

    const toml::table* sub(const char* key) {
        seen_.insert(key);
        const toml::node* n = t_.get(key);
        if (n == nullptr) return nullptr;
        if (!n->is_table()) throw ConfigError(prefix_ + key + " must be a table");
        return n->as_table();
    }

    void finish() const {
        for (const auto& [k, v] : t_) {
            if (!seen_.count(std::string(k.str()))) throw ConfigError("unknown config key " + prefix_ + std::string(k.str()));
        }
    }

private:
    const toml::table& t_;
    std::string prefix_;
    std::set<std::string> seen_;
};

inline const toml::table empty_table{};

}  // namespace detail

inline toml::table to_toml(const ExperimentConfig& c) {
    const auto& s = c.data.synthetic;
    toml::table synthetic{{"users", s.users},
                          {"items", s.items},
                          {"overlap", s.overlap},
                          {"clusters", s.clusters},
                          {"correlation", s.correlation},
                          {"interactions", s.interactions},
                          {"in_cluster_mass", s.in_cluster_mass},
                          {"seed", static_cast<std::int64_t>(s.seed)}};
    toml::table data{{"path_x", c.data.path_x}, {"path_y", c.data.path_y}, {"synthetic", std::move(synthetic)}};
    const auto& e = c.model.encoder;
    toml::table encoder{{"layers", e.layers}, {"shallow_layers", e.shallow_layers}, {"width", e.width}};
    toml::table cpa{{"centroids", c.model.centroids},
                    {"alpha", c.model.alpha},
                    {"learning_rate", c.train.centroid_learning_rate},
                    {"update_period", c.train.centroid_update_period}};
    const auto& f = c.model.flow;
    toml::table flow_table{{"kind", flow::to_string(f.kind)},
                     {"layers", f.layers},
                     {"hidden", f.hidden},
                     {"bins", f.bins},
                     {"bound", f.bound},
                     {"sigmoid_units", f.sigmoid_units},
                     {"ode_steps", f.ode_steps},
                     {"init_scale", f.init_scale},
                     {"bandwidth", c.model.flow_bandwidth},
                     {"target", deep::to_string(c.model.flow_target)}};
    const auto& t = c.train;
    toml::table train{{"epochs", t.epochs},
                      {"learning_rate", t.learning_rate},
                      {"group_size", t.group_size},
                      {"lambda_s", t.weights.shallow},
                      {"lambda_d", t.weights.deep},
                      {"variant", objective::to_string(t.variant)},
                      {"seed", static_cast<std::int64_t>(t.seed)},
                      {"negatives", t.negatives},
                      {"overlap_ratio", t.overlap_ratio},
                      {"pair_fraction", t.pair_fraction},
                      {"divergence_factor", t.divergence_factor}};
    toml::array cutoffs;
    for (int k : c.eval.cutoffs) cutoffs.push_back(k);
    toml::table eval{{"pool_size", c.eval.pool_size},
                     {"cutoffs", std::move(cutoffs)},
                     {"split", data::to_string(c.eval.split)}};
    toml::table experiment{{"runs", c.runs}, {"out", c.out}};
    toml::table grid;
    for (const auto& [key, values] : c.grid) {
        toml::array arr;
        for (const auto& v : values) arr.push_back(v);
        grid.insert(key, std::move(arr));
    }
    return toml::table{{"data", std::move(data)}, {"encoder", std::move(encoder)}, {"cpa", std::move(cpa)},
                       {"flow", std::move(flow_table)}, {"train", std::move(train)}, {"eval", std::move(eval)},
                       {"experiment", std::move(experiment)}, {"grid", std::move(grid)}};
}

inline ExperimentConfig from_toml(const toml::table& root) {
    ExperimentConfig c;
    detail::Reader top(root, "");
    {
        const auto* t = top.sub("data");
        detail::Reader r(t ? *t : detail::empty_table, "data.");
        r.get("path_x", c.data.path_x);
        r.get("path_y", c.data.path_y);
        const auto* st = r.sub("synthetic");
        detail::Reader s(st ? *st : detail::empty_table, "data.synthetic.");
        auto& sp = c.data.synthetic;
        s.get("users", sp.users);
        s.get("items", sp.items);
        s.get("overlap", sp.overlap);
        s.get("clusters", sp.clusters);
        s.get("correlation", sp.correlation);
        s.get("interactions", sp.interactions);
        s.get("in_cluster_mass", sp.in_cluster_mass);
        s.get("seed", sp.seed);
        s.finish();
        r.finish();
    }
    {
        const auto* t = top.sub("encoder");
        detail::Reader r(t ? *t : detail::empty_table, "encoder.");
        r.get("layers", c.model.encoder.layers);
        r.get("shallow_layers", c.model.encoder.shallow_layers);
        r.get("width", c.model.encoder.width);
        r.finish();
    }
    {
        const auto* t = top.sub("cpa");
        detail::Reader r(t ? *t : detail::empty_table, "cpa.");
        r.get("centroids", c.model.centroids);
        r.get("alpha", c.model.alpha);
        r.get("learning_rate", c.train.centroid_learning_rate);
        r.get("update_period", c.train.centroid_update_period);
        r.finish();
    }
    {
        const auto* t = top.sub("flow");
        detail::Reader r(t ? *t : detail::empty_table, "flow.");
        auto& f = c.model.flow;
        std::string kind = flow::to_string(f.kind);
        std::string target = deep::to_string(c.model.flow_target);
        r.get("kind", kind);
        r.get("layers", f.layers);
        r.get("hidden", f.hidden);
        r.get("bins", f.bins);
        r.get("bound", f.bound);
        r.get("sigmoid_units", f.sigmoid_units);
        r.get("ode_steps", f.ode_steps);
        r.get("init_scale", f.init_scale);
        r.get("bandwidth", c.model.flow_bandwidth);
        r.get("target", target);
        r.finish();
        f.kind = flow::parse_flow_kind(kind);
        c.model.flow_target = deep::parse_flow_target(target);
    }
    {
        const auto* t = top.sub("train");
        detail::Reader r(t ? *t : detail::empty_table, "train.");
        auto& tr = c.train;
        std::string variant = objective::to_string(tr.variant);
        r.get("epochs", tr.epochs);
        r.get("learning_rate", tr.learning_rate);
        r.get("group_size", tr.group_size);
        r.get("lambda_s", tr.weights.shallow);
        r.get("lambda_d", tr.weights.deep);
        r.get("variant", variant);
        r.get("seed", tr.seed);
        r.get("negatives", tr.negatives);
        r.get("overlap_ratio", tr.overlap_ratio);
        r.get("pair_fraction", tr.pair_fraction);
        r.get("divergence_factor", tr.divergence_factor);
        r.finish();
        tr.variant = objective::parse_variant(variant);
    }
    {
        const auto* t = top.sub("eval");
        detail::Reader r(t ? *t : detail::empty_table, "eval.");
        std::string split = data::to_string(c.eval.split);
        r.get("pool_size", c.eval.pool_size);
        r.get("cutoffs", c.eval.cutoffs);
        r.get("split", split);
        r.finish();
        if (split == "test") {
            c.eval.split = data::Split::test;
        } else if (split == "validation") {
            c.eval.split = data::Split::validation;
        } else {
            throw ConfigError("eval.split must be test or validation, got '" + split + "'");
        }
    }
    {
        const auto* t = top.sub("experiment");
        detail::Reader r(t ? *t : detail::empty_table, "experiment.");
        r.get("runs", c.runs);
        r.get("out", c.out);
        r.finish();
    }
    if (const auto* g = top.sub("grid")) {
        for (const auto& [k, v] : *g) {
            std::vector<std::string> values;
            if (const auto* arr = v.as_array()) {
                for (const auto& e : *arr) values.push_back(detail::node_to_string(e));
            } else {
                values.push_back(detail::node_to_string(v));
            }
            if (values.empty()) throw ConfigError("grid." + std::string(k.str()) + " has no values");
            c.grid.emplace_back(std::string(k.str()), std::move(values));
        }
    }
    top.finish();
    c.validate();
    return c;
}

inline std::string serialize(const ExperimentConfig& c) {
    std::ostringstream os;
    os << to_toml(c) << '\n';
    return os.str();
}

/// Only the data section; grid points that leave it alone reuse the dataset.
inline std::string serialize_data(const ExperimentConfig& c) {
    std::ostringstream os;
    os << *to_toml(c).get_as<toml::table>("data");
    return os.str();
}

inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "config") {
    try {
        return from_toml(toml::parse(text, source));
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ':' << e.source().begin.line << ':' << e.source().begin.column << ": " << e.description();
        throw ConfigError(os.str());
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path);
}

inline void save_config(const std::string& path, const ExperimentConfig& c) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file " + path);
    out << serialize(c);
    if (!out) throw IoError("failed writing config file " + path);
}

/// Short names for the searched hyperparameters.
inline std::string resolve_key(const std::string& key) {
    static const std::map<std::string, std::string> aliases{
        {"d", "encoder.width"},      {"K", "encoder.layers"},     {"k", "encoder.shallow_layers"},
        {"N", "train.group_size"},   {"T", "cpa.centroids"},      {"alpha", "cpa.alpha"},
        {"flow", "flow.kind"},       {"lr", "train.learning_rate"}, {"epochs", "train.epochs"},
        {"variant", "train.variant"}, {"seed", "train.seed"},      {"ratio", "train.overlap_ratio"},
        {"lambda_s", "train.lambda_s"}, {"lambda_d", "train.lambda_d"}};
    auto it = aliases.find(key);
    return it == aliases.end() ? key : it->second;
}

namespace detail {

inline void set_in_table(toml::table& root, const std::string& key, const std::string& value) {
    const std::string path = resolve_key(key);
    toml::table* t = &root;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        if (dot == std::string::npos) break;
        auto* next = t->get_as<toml::table>(path.substr(start, dot - start));
        if (next == nullptr) throw ConfigError("unknown parameter '" + key + "'");
        t = next;
        start = dot + 1;
    }
    const std::string leaf = path.substr(start);
    toml::node* existing = t->get(leaf);
    if (existing == nullptr || existing->is_table() || path.rfind("grid.", 0) == 0) {
        throw ConfigError("unknown parameter '" + key + "'");
    }
    toml::table parsed;
    try {
        parsed = toml::parse("v = " + value);
    } catch (const toml::parse_error&) {
        parsed.insert("v", value);
    }
    toml::node& v = *parsed.get("v");
    if (existing->is_floating_point() && v.is_integer()) {
        t->insert_or_assign(leaf, static_cast<double>(v.as_integer()->get()));
    } else if (existing->is_string() && !v.is_string()) {
        t->insert_or_assign(leaf, value);
    } else if (existing->type() != v.type()) {
        throw ConfigError("parameter '" + key + "' has the wrong type for value '" + value + "'");
    } else {
        v.visit([&](auto&& n) { t->insert_or_assign(leaf, n); });
    }
}

}  // namespace detail

/// Sets fields from their textual values, then validates once. Values are
/// read as TOML literals; bare words are taken as strings.
inline ExperimentConfig apply_params(const ExperimentConfig& c,
                                     const std::vector<std::pair<std::string, std::string>>& params) {
    toml::table root = to_toml(c);
    for (const auto& [k, v] : params) detail::set_in_table(root, k, v);
    return from_toml(root);
}

inline ExperimentConfig apply_param(const ExperimentConfig& c, const std::string& key, const std::string& value) {
    return apply_params(c, {{key, value}});
}

/// Splits "key=v1,v2,..." into the key and its values.
inline std::pair<std::string, std::vector<std::string>> parse_param(const std::string& arg) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--param expects key=value[,value...], got '" + arg + "'");
    std::pair<std::string, std::vector<std::string>> out{arg.substr(0, eq), {}};
    std::string rest = arg.substr(eq + 1);
    std::size_t start = 0;
    for (;;) {
        const auto comma = rest.find(',', start);
        out.second.push_back(rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Cartesian product of the grid; the last key varies fastest.
inline std::vector<std::vector<std::pair<std::string, std::string>>> grid_points(const Grid& grid) {
    std::vector<std::vector<std::pair<std::string, std::string>>> out{{}};
    for (const auto& [key, values] : grid) {
        if (values.empty()) throw ConfigError("grid entry '" + key + "' has no values");
        std::vector<std::vector<std::pair<std::string, std::string>>> next;
        for (const auto& prefix : out) {
            for (const auto& v : values) {
                auto p = prefix;
                p.emplace_back(key, v);
                next.push_back(std::move(p));
            }
        }
        out = std::move(next);
    }
    return out;
}

inline data::InteractionDataset load_dataset(const ExperimentConfig& c) {
    if (c.data.is_synthetic()) return synth::generate_synthetic(c.data.synthetic);
    return data::load_domain_pair(c.data.path_x, c.data.path_y, c.data.synthetic.seed);
}

}  // namespace cider::config
