#pragma once

// Planted-cluster two-domain generator for desk-scale experiments.

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "cider/data.hpp"
#include "cider/errors.hpp"
#include "cider/random.hpp"

namespace cider::synth {

struct SyntheticSpec {
    int users = 500;         // per domain
    int items = 200;         // per domain
    int overlap = 300;
    int clusters = 2;
    double correlation = 0.9;  // probability an overlap user keeps its cluster across domains
    int interactions = 20;     // per user
    double in_cluster_mass = 0.8;
    std::uint64_t seed = 1;

    void validate() const {
        if (users < 1 || items < 1) throw ConfigError("synthetic: users and items must be >= 1");
        if (overlap < 0 || overlap > users) throw ConfigError("synthetic: overlap must be in [0, users]");
        if (clusters < 1) throw ConfigError("synthetic: clusters must be >= 1");
        if (clusters > items) throw ConfigError("synthetic: more clusters than items");
        if (correlation < 0 || correlation > 1) throw ConfigError("synthetic: correlation must be in [0, 1]");
        if (interactions < 1) throw ConfigError("synthetic: interactions per user must be >= 1");
        if (interactions > items) {
            throw ConfigError("synthetic: " + std::to_string(interactions) + " interactions per user exceed " +
                              std::to_string(items) + " items");
        }
        if (in_cluster_mass < 0 || in_cluster_mass > 1) throw ConfigError("synthetic: in_cluster_mass must be in [0, 1]");
    }
};

/// Planted assignments alongside the generated records.
struct SyntheticDomain {
    std::vector<data::Record> records;
    std::vector<int> user_cluster;  // per generated user, generation order
    std::vector<std::string> user_ids;
};

struct SyntheticPlant {
    SyntheticDomain x;
    SyntheticDomain y;
};

namespace detail {

inline int item_cluster(int item, int items, int clusters) {
    // Contiguous blocks of near-equal size.
    return static_cast<int>(static_cast<long long>(item) * clusters / items);
}

inline void fill_domain(const SyntheticSpec& spec, const std::string& prefix, const std::string& item_prefix,
                        const std::vector<int>& overlap_cluster, Rng& rng, SyntheticDomain& out) {
    std::vector<std::vector<int>> by_cluster(static_cast<std::size_t>(spec.clusters));
    for (int i = 0; i < spec.items; ++i) {
        by_cluster[static_cast<std::size_t>(item_cluster(i, spec.items, spec.clusters))].push_back(i);
    }
    for (int u = 0; u < spec.users; ++u) {
        const bool shared = u < spec.overlap;
        const std::string id = shared ? "u" + std::to_string(u) : prefix + std::to_string(u);
        const int c = shared ? overlap_cluster[static_cast<std::size_t>(u)]
                             : static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.clusters)));
        out.user_ids.push_back(id);
        out.user_cluster.push_back(c);
        const auto& home = by_cluster[static_cast<std::size_t>(c)];
        std::unordered_set<int> chosen;
        int home_left = static_cast<int>(home.size());
        int away_left = spec.items - home_left;
        while (static_cast<int>(chosen.size()) < spec.interactions) {
            const bool want_home = rng.uniform() < spec.in_cluster_mass;
            const bool use_home = (want_home && home_left > 0) || away_left == 0;
            int item = 0;
            if (use_home) {
                item = home[static_cast<std::size_t>(rng.below(home.size()))];
            } else {
                item = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.items)));
                if (item_cluster(item, spec.items, spec.clusters) == c) continue;
            }
            if (!chosen.insert(item).second) continue;
            if (use_home) {
                --home_left;
            } else {
                --away_left;
            }
            out.records.push_back({id, item_prefix + std::to_string(item), std::nullopt});
        }
    }
}

}  // namespace detail

inline SyntheticPlant generate_plant(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 100));
    std::vector<int> cx(static_cast<std::size_t>(spec.overlap));
    std::vector<int> cy(static_cast<std::size_t>(spec.overlap));
    for (int u = 0; u < spec.overlap; ++u) {
        cx[static_cast<std::size_t>(u)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.clusters)));
        cy[static_cast<std::size_t>(u)] =
            rng.uniform() < spec.correlation ? cx[static_cast<std::size_t>(u)]
                                             : static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.clusters)));
    }
    SyntheticPlant plant;
    Rng rx(derive_seed(spec.seed, 101));
    Rng ry(derive_seed(spec.seed, 102));
    detail::fill_domain(spec, "x", "a", cx, rx, plant.x);
    detail::fill_domain(spec, "y", "b", cy, ry, plant.y);
    return plant;
}

/// Generates a dataset: every user gets a cluster, overlap users keep theirs
/// across domains with probability `correlation`, and `in_cluster_mass` of each
/// user's interactions fall in the cluster's item block.
inline data::InteractionDataset generate_synthetic(const SyntheticSpec& spec) {
    const auto plant = generate_plant(spec);
    return data::InteractionDataset::from_records(plant.x.records, plant.y.records, spec.seed);
}

}  // namespace cider::synth
