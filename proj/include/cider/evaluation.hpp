#pragma once

// Leave-one-out ranking metrics and report aggregation.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cider/data.hpp"
#include "cider/errors.hpp"
#include "cider/format.hpp"
#include "cider/model.hpp"

namespace cider::eval {

using data::Domain;

inline const std::vector<int>& default_cutoffs() {
    static const std::vector<int> c{10, 20, 30};
    return c;
}

/// Inner product of the user row with every candidate row.
inline Eigen::VectorXd score_user(const Eigen::RowVectorXd& user, const Matrix& candidates) {
    if (user.size() != candidates.cols()) {
        throw ContractError("score_user: user width " + std::to_string(user.size()) + " does not match item width " +
                            std::to_string(candidates.cols()));
    }
    return candidates * user.transpose();
}

/// 1-based rank of `positive` among `positive` plus `negatives`; ties go to
/// the lower item index.
inline int rank_of(const Eigen::RowVectorXd& user, const Matrix& items, std::int32_t positive,
                   const std::vector<std::int32_t>& negatives) {
    const double target = items.row(positive).dot(user);
    int rank = 1;
    for (auto j : negatives) {
        const double s = items.row(j).dot(user);
        if (s > target || (s == target && j < positive)) ++rank;
    }
    return rank;
}

/// Metric name to value for one domain.
using MetricValues = std::map<std::string, double>;

inline MetricValues compute_metrics(const std::vector<int>& ranks, const std::vector<int>& cutoffs = default_cutoffs()) {
    if (ranks.empty()) throw ContractError("compute_metrics: empty rank list");
    MetricValues m;
    double mrr = 0.0;
    std::vector<double> hr(cutoffs.size(), 0.0);
    std::vector<double> ndcg(cutoffs.size(), 0.0);
    for (int r : ranks) {
        if (r < 1) throw ContractError("compute_metrics: ranks start at 1");
        mrr += 1.0 / r;
        for (std::size_t c = 0; c < cutoffs.size(); ++c) {
            if (r <= cutoffs[c]) {
                hr[c] += 1.0;
                ndcg[c] += 1.0 / std::log2(r + 1.0);
            }
        }
    }
    const double n = static_cast<double>(ranks.size());
    m["MRR"] = mrr / n;
    for (std::size_t c = 0; c < cutoffs.size(); ++c) {
        m["HR@" + std::to_string(cutoffs[c])] = hr[c] / n;
        m["NDCG@" + std::to_string(cutoffs[c])] = ndcg[c] / n;
    }
    return m;
}

struct DomainEvaluation {
    std::vector<int> ranks;
    MetricValues metrics;
};

struct Evaluation {
    std::map<std::string, DomainEvaluation> domains;  // "x", "y"
    std::size_t cross_domain_inferred = 0;
};

/// Ranks every instance of the split in both domains against the inferred
/// representations.
inline Evaluation evaluate(const InferenceResult& reps, const std::array<data::NegativeSamplePool, 2>& pools,
                           data::Split split, const std::vector<int>& cutoffs = default_cutoffs()) {
    Evaluation out;
    out.cross_domain_inferred = reps.cross_domain_inferred;
    for (const Domain d : {Domain::x, Domain::y}) {
        const auto& pool = pools[index_of(d)];
        if (pool.domain != d) throw ContractError("evaluate: pool order does not match domains");
        const auto& users = reps.users[index_of(d)];
        const auto& items = reps.items[index_of(d)];
        if (users.cols() != items.cols()) throw ContractError("evaluate: user and item widths differ");
        DomainEvaluation de;
        for (const auto& inst : pool.instances(split)) {
            if (inst.user >= users.rows() || inst.positive < 0 || inst.positive >= items.rows()) {
                throw ContractError("evaluate: negative pool does not match the dataset");
            }
            for (auto j : inst.negatives) {
                if (j < 0 || j >= items.rows()) throw ContractError("evaluate: negative pool does not match the dataset");
            }
            de.ranks.push_back(rank_of(users.row(inst.user), items, inst.positive, inst.negatives));
        }
        if (de.ranks.empty()) throw ContractError(std::string("evaluate: no evaluation users in domain ") + to_string(d));
        de.metrics = compute_metrics(de.ranks, cutoffs);
        out.domains[to_string(d)] = std::move(de);
    }
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// domain -> metric -> {mean, std}
using MetricReport = std::map<std::string, std::map<std::string, MeanStd>>;

/// Per-metric mean and sample standard deviation over runs.
inline MetricReport aggregate_runs(const std::vector<std::map<std::string, MetricValues>>& runs) {
    if (runs.empty()) throw ContractError("aggregate_runs: no reports");
    MetricReport out;
    const auto& first = runs.front();
    for (const auto& run : runs) {
        if (run.size() != first.size()) throw ContractError("aggregate_runs: domain sets differ");
        for (const auto& [domain, metrics] : first) {
            auto it = run.find(domain);
            if (it == run.end() || it->second.size() != metrics.size()) {
                throw ContractError("aggregate_runs: metric keys differ for domain " + domain);
            }
            for (const auto& [name, v] : metrics) {
                if (!it->second.count(name)) throw ContractError("aggregate_runs: missing metric " + name);
            }
        }
    }
    const double n = static_cast<double>(runs.size());
    for (const auto& [domain, metrics] : first) {
        for (const auto& [name, v0] : metrics) {
            // Shifted by the first value so identical runs give exactly 0.
            double sum = 0.0;
            for (const auto& run : runs) sum += run.at(domain).at(name) - v0;
            const double shift = sum / n;
            double ss = 0.0;
            for (const auto& run : runs) ss += std::pow(run.at(domain).at(name) - v0 - shift, 2);
            out[domain][name] = {v0 + shift, runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
        }
    }
    return out;
}

inline std::map<std::string, MetricValues> metric_values(const Evaluation& e) {
    std::map<std::string, MetricValues> out;
    for (const auto& [d, de] : e.domains) out[d] = de.metrics;
    return out;
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [domain, metrics] : r) {
        for (const auto& [name, ms] : metrics) j[domain][name] = {{"mean", ms.mean}, {"std", ms.std}};
    }
    return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    for (const auto& [domain, metrics] : j.items()) {
        for (const auto& [name, ms] : metrics.items()) r[domain][name] = {ms.at("mean").get<double>(), ms.at("std").get<double>()};
    }
    return r;
}

/// Long-format CSV: one row per (label..., domain, metric). `labels` adds
/// leading columns such as variant or ratio.
struct ReportRow {
    std::vector<std::pair<std::string, std::string>> labels;
    MetricReport report;
};

inline void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
    if (rows.empty()) return;
    for (const auto& [k, v] : rows.front().labels) os << k << ',';
    os << "domain,metric,mean,std\n";
    for (const auto& row : rows) {
        for (const auto& [domain, metrics] : row.report) {
            for (const auto& [name, ms] : metrics) {
                for (const auto& [k, v] : row.labels) os << v << ',';
                os << domain << ',' << name << ',' << format_double(ms.mean) << ',' << format_double(ms.std) << '\n';
            }
        }
    }
}

/// Checks HR@k monotone in k, NDCG@k <= HR@k, and everything in [0, 1].
inline bool metrics_consistent(const MetricValues& m) {
    for (const auto& [name, v] : m) {
        if (!(v >= 0.0 && v <= 1.0)) return false;
    }
    double prev_hr = 0.0;
    for (int k : default_cutoffs()) {
        const auto hr = m.find("HR@" + std::to_string(k));
        const auto nd = m.find("NDCG@" + std::to_string(k));
        if (hr == m.end() || nd == m.end()) continue;
        if (hr->second < prev_hr || nd->second > hr->second + 1e-15) return false;
        prev_hr = hr->second;
    }
    return true;
}

}  // namespace cider::eval
