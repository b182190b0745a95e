#pragma once

// Checkpoint directory: config.json, encoder.ckpt, flow.ckpt, centroids.jsonl
// and a copy of the dataset.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cider/config.hpp"
#include "cider/data.hpp"
#include "cider/errors.hpp"
#include "cider/model.hpp"

namespace cider::checkpoint {

static_assert(std::endian::native == std::endian::little, "tensor archives are little-endian");

inline constexpr char kArchiveMagic[8] = {'C', 'I', 'D', 'E', 'R', 'C', 'K', '\0'};
inline constexpr std::uint32_t kArchiveVersion = 1;

using TensorMap = std::map<std::string, Matrix>;

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated tensor archive " + path);
    return v;
}

}  // namespace detail

/// Layout: magic, version u32, count u32, then per tensor: key length u32,
/// key bytes, rows u64, cols u64, row-major f64 values.
inline void write_archive(const std::string& path, const std::vector<std::pair<std::string, Var>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(kArchiveMagic, sizeof(kArchiveMagic));
    detail::put<std::uint32_t>(out, kArchiveVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [key, v] : tensors) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
        out.write(key.data(), static_cast<std::streamsize>(key.size()));
        const Matrix& m = v.value();
        detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put<double>(out, m(i, j));
        }
    }
    if (!out) throw IoError("failed writing " + path);
}

inline TensorMap read_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[sizeof(kArchiveMagic)];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0) {
        throw IoError(path + " is not a tensor archive");
    }
    const auto version = detail::take<std::uint32_t>(in, path);
    if (version != kArchiveVersion) {
        throw IoError(path + ": unsupported archive version " + std::to_string(version));
    }
    const auto count = detail::take<std::uint32_t>(in, path);
    TensorMap out;
    for (std::uint32_t n = 0; n < count; ++n) {
        const auto len = detail::take<std::uint32_t>(in, path);
        std::string key(len, '\0');
        if (!in.read(key.data(), len)) throw IoError("truncated tensor archive " + path);
        const auto rows = detail::take<std::uint64_t>(in, path);
        const auto cols = detail::take<std::uint64_t>(in, path);
        if (rows > (1u << 28) || cols > (1u << 28)) throw IoError(path + ": implausible tensor shape for " + key);
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = detail::take<double>(in, path);
        }
        if (!out.emplace(std::move(key), std::move(m)).second) throw IoError(path + ": duplicate tensor key");
    }
    return out;
}

/// Copies archived values into the named parameters; every parameter must be
/// present with the same shape.
inline void restore(const std::vector<std::pair<std::string, Var>>& params, const TensorMap& tensors,
                    const std::string& source) {
    if (params.size() != tensors.size()) {
        throw IoError(source + " holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
    }
    for (auto [key, v] : params) {
        auto it = tensors.find(key);
        if (it == tensors.end()) throw IoError(source + " is missing " + key);
        if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
            throw IoError(source + ": shape mismatch for " + key);
        }
        v.mutable_value() = it->second;
    }
}

/// One JSON line per centroid. `epoch` is added when non-negative.
inline void write_centroid_rows(std::ostream& out, const CiderModel& model, int epoch = -1) {
    for (const Subspace s : {Subspace::shallow, Subspace::deep}) {
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto& c = model.centroids(d, s);
            if (!c) continue;
            const Matrix var = c->variance();
            for (int t = 0; t < c->count(); ++t) {
                nlohmann::json row;
                if (epoch >= 0) row["epoch"] = epoch;
                row["domain"] = to_string(d);
                row["subspace"] = to_string(s);
                row["t"] = t;
                row["mean"] = std::vector<double>(c->mean.value().row(t).begin(), c->mean.value().row(t).end());
                row["variance"] = std::vector<double>(var.row(t).begin(), var.row(t).end());
                row["prior"] = c->prior(t);
                out << row.dump() << '\n';
            }
        }
    }
}

inline void write_centroids(const std::string& path, const CiderModel& model) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    write_centroid_rows(out, model);
    if (!out) throw IoError("failed writing " + path);
}

inline void read_centroids(const std::string& path, CiderModel& model) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::map<std::pair<std::string, std::string>, std::vector<nlohmann::json>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            rows[{j.at("domain").get<std::string>(), j.value("subspace", std::string("shallow"))}].push_back(std::move(j));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    for (auto& [key, list] : rows) {
        const Domain d = key.first == "x" ? Domain::x : key.first == "y" ? Domain::y : throw IoError(path + ": bad domain");
        const Subspace s = key.second == "deep" ? Subspace::deep : Subspace::shallow;
        std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.at("t") < b.at("t"); });
        const auto t = static_cast<Eigen::Index>(list.size());
        const auto w = static_cast<Eigen::Index>(list.front().at("mean").size());
        Matrix mean(t, w);
        Matrix var(t, w);
        Eigen::VectorXd prior(t);
        for (Eigen::Index i = 0; i < t; ++i) {
            const auto& j = list[static_cast<std::size_t>(i)];
            if (j.at("t").get<Eigen::Index>() != i) throw IoError(path + ": centroid indices are not 0..T-1");
            const auto m = j.at("mean").get<std::vector<double>>();
            const auto v = j.at("variance").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(m.size()) != w || static_cast<Eigen::Index>(v.size()) != w) {
                throw IoError(path + ": centroid widths differ");
            }
            for (Eigen::Index k = 0; k < w; ++k) {
                mean(i, k) = m[static_cast<std::size_t>(k)];
                var(i, k) = v[static_cast<std::size_t>(k)];
            }
            prior(i) = j.at("prior").get<double>();
        }
        auto c = cpa::CentroidSet::make(std::move(mean), var);
        c.prior = prior;
        model.centroids(d, s) = std::move(c);
    }
}

struct Checkpoint {
    config::ExperimentConfig config;
    std::uint64_t seed = 0;
    std::vector<data::OverlapUser> trained_pairs;
    std::string version;
};

inline constexpr const char* kDatasetFile = "dataset.bin";

inline void save(const std::string& dir, const Checkpoint& meta, const CiderModel& model,
                 const data::InteractionDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["version"] = meta.version;
    j["seed"] = meta.seed;
    j["variant"] = objective::to_string(model.variant());
    j["config_toml"] = config::serialize(meta.config);
    auto& pairs = j["trained_pairs"] = nlohmann::json::array();
    for (const auto& p : meta.trained_pairs) pairs.push_back({p.user_x, p.user_y});
    j["sizes"] = {model.sizes().users_x, model.sizes().items_x, model.sizes().users_y, model.sizes().items_y};
    {
        std::ofstream out(fs::path(dir) / "config.json");
        if (!out) throw IoError("cannot write " + (fs::path(dir) / "config.json").string());
        out << j.dump(2) << '\n';
    }
    write_archive((fs::path(dir) / "encoder.ckpt").string(), model.model_params());
    write_archive((fs::path(dir) / "flow.ckpt").string(), model.flow_params());
    write_centroids((fs::path(dir) / "centroids.jsonl").string(), model);
    data::save_dataset((fs::path(dir) / kDatasetFile).string(), ds);
}

struct Loaded {
    Checkpoint meta;
    data::InteractionDataset dataset;
    std::unique_ptr<CiderModel> model;
};

inline Loaded load(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto cfg_path = fs::path(dir) / "config.json";
    std::ifstream in(cfg_path);
    if (!in) throw IoError("no checkpoint at " + dir + " (missing config.json)");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(cfg_path.string() + ": " + e.what());
    }
    Loaded out;
    out.meta.version = j.value("version", std::string());
    out.meta.seed = j.at("seed").get<std::uint64_t>();
    out.meta.config = config::parse_config(j.at("config_toml").get<std::string>(), cfg_path.string());
    for (const auto& p : j.at("trained_pairs")) {
        out.meta.trained_pairs.push_back({p.at(0).get<std::int32_t>(), p.at(1).get<std::int32_t>(), data::Split::train});
    }
    out.dataset = data::load_dataset((fs::path(dir) / kDatasetFile).string());
    const auto variant = objective::parse_variant(j.at("variant").get<std::string>());
    out.model = std::make_unique<CiderModel>(out.meta.config.model, variant, DomainSizes::of(out.dataset), out.meta.seed);
    restore(out.model->model_params(), read_archive((fs::path(dir) / "encoder.ckpt").string()), "encoder.ckpt");
    restore(out.model->flow_params(), read_archive((fs::path(dir) / "flow.ckpt").string()), "flow.ckpt");
    read_centroids((fs::path(dir) / "centroids.jsonl").string(), *out.model);
    return out;
}

}  // namespace cider::checkpoint
