#pragma once

// Two-domain implicit-feedback interaction data: ingestion, overlap map,
// leave-one-out splits, normalized bipartite adjacency, negative pools and
// the paired user-group sampler.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Sparse>

#include "cider/autodiff.hpp"
#include "cider/errors.hpp"
#include "cider/random.hpp"

namespace cider::data {

enum class Domain : std::uint8_t { x = 0, y = 1 };
enum class Split : std::uint8_t { train = 0, test = 1, validation = 2 };

inline const char* to_string(Domain d) { return d == Domain::x ? "x" : "y"; }
inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::validation: return "validation";
    }
    return "?";
}
inline Domain other(Domain d) { return d == Domain::x ? Domain::y : Domain::x; }

/// One parsed input row.
struct Record {
    std::string user;
    std::string item;
    std::optional<std::int64_t> timestamp;
};

struct Interaction {
    std::int32_t user;
    std::int32_t item;
    friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct DomainData {
    std::vector<std::string> users;  // first-appearance order
    std::vector<std::string> items;
    std::vector<Interaction> interactions;  // record order, duplicates dropped
    std::vector<std::int64_t> timestamps;   // parallel to interactions, or empty
    std::vector<std::int32_t> held_out;     // per user: leave-one-out item or -1

    std::unordered_map<std::string, std::int32_t> user_index;
    std::unordered_map<std::string, std::int32_t> item_index;

    [[nodiscard]] std::int32_t num_users() const { return static_cast<std::int32_t>(users.size()); }
    [[nodiscard]] std::int32_t num_items() const { return static_cast<std::int32_t>(items.size()); }

    void rebuild_lookup() {
        user_index.clear();
        item_index.clear();
        for (std::size_t i = 0; i < users.size(); ++i) user_index.emplace(users[i], static_cast<std::int32_t>(i));
        for (std::size_t i = 0; i < items.size(); ++i) item_index.emplace(items[i], static_cast<std::int32_t>(i));
    }

    /// All items each user interacted with (including held-out positives).
    [[nodiscard]] std::vector<std::vector<std::int32_t>> items_by_user() const {
        std::vector<std::vector<std::int32_t>> out(users.size());
        for (const auto& e : interactions) out[static_cast<std::size_t>(e.user)].push_back(e.item);
        return out;
    }

    friend bool operator==(const DomainData& a, const DomainData& b) {
        return a.users == b.users && a.items == b.items && a.interactions == b.interactions &&
               a.timestamps == b.timestamps && a.held_out == b.held_out;
    }
};

/// One user present in both domains, with its assigned split.
struct OverlapUser {
    std::int32_t user_x;
    std::int32_t user_y;
    Split split;
    friend bool operator==(const OverlapUser&, const OverlapUser&) = default;
};

/// Which held-out positives to remove from the training graph.
struct HeldOutMask {
    bool test = true;
    bool validation = true;
};

class InteractionDataset {
public:
    DomainData x;
    DomainData y;
    std::vector<OverlapUser> overlap;  // ordered by X-domain user index
    std::uint64_t seed = 0;

    [[nodiscard]] const DomainData& domain(Domain d) const { return d == Domain::x ? x : y; }
    [[nodiscard]] DomainData& domain(Domain d) { return d == Domain::x ? x : y; }

    [[nodiscard]] static std::int32_t user_of(const OverlapUser& o, Domain d) {
        return d == Domain::x ? o.user_x : o.user_y;
    }

    /// Builds vocabularies, overlap map, 80/10/10 split over overlap users and
    /// the leave-one-out positives of evaluation users.
    static InteractionDataset from_records(const std::vector<Record>& records_x,
                                           const std::vector<Record>& records_y,
                                           std::uint64_t seed) {
        InteractionDataset ds;
        ds.seed = seed;
        ingest(records_x, ds.x, "x");
        ingest(records_y, ds.y, "y");
        for (std::int32_t u = 0; u < ds.x.num_users(); ++u) {
            auto it = ds.y.user_index.find(ds.x.users[static_cast<std::size_t>(u)]);
            if (it != ds.y.user_index.end()) {
                ds.overlap.push_back({u, it->second, Split::train});
            }
        }
        if (ds.overlap.empty()) {
            warn("domain pair has zero overlapping users");
        }
        ds.assign_splits();
        ds.assign_held_out();
        return ds;
    }

    /// Number of overlap users per split (train, test, validation) for n users.
    static std::array<std::size_t, 3> split_sizes(std::size_t n) {
        const auto tenth = static_cast<std::size_t>(std::floor(static_cast<double>(n) * 0.1 + 0.5));
        const std::size_t test = tenth;
        const std::size_t validation = std::min(tenth, n - test);
        return {n - test - validation, test, validation};
    }

    [[nodiscard]] std::vector<OverlapUser> overlap_in(Split s) const {
        std::vector<OverlapUser> out;
        for (const auto& o : overlap) {
            if (o.split == s) out.push_back(o);
        }
        return out;
    }

    /// Users of domain d that may appear in training batches: every user
    /// except test and validation overlap users.
    [[nodiscard]] std::vector<std::int32_t> training_users(Domain d) const {
        std::vector<char> held(static_cast<std::size_t>(domain(d).num_users()), 0);
        for (const auto& o : overlap) {
            if (o.split != Split::train) held[static_cast<std::size_t>(user_of(o, d))] = 1;
        }
        std::vector<std::int32_t> out;
        for (std::int32_t u = 0; u < domain(d).num_users(); ++u) {
            if (!held[static_cast<std::size_t>(u)]) out.push_back(u);
        }
        return out;
    }

    /// Interactions of domain d minus the masked held-out positives.
    [[nodiscard]] std::vector<Interaction> training_interactions(Domain d, HeldOutMask mask = {}) const {
        const auto& dd = domain(d);
        std::vector<Split> split_of(static_cast<std::size_t>(dd.num_users()), Split::train);
        for (const auto& o : overlap) split_of[static_cast<std::size_t>(user_of(o, d))] = o.split;
        std::vector<Interaction> out;
        out.reserve(dd.interactions.size());
        for (const auto& e : dd.interactions) {
            const auto u = static_cast<std::size_t>(e.user);
            const bool is_held = dd.held_out[u] == e.item &&
                                 ((split_of[u] == Split::test && mask.test) ||
                                  (split_of[u] == Split::validation && mask.validation));
            if (!is_held) out.push_back(e);
        }
        return out;
    }

    /// Checks every structural invariant; throws ContractError on violation.
    void validate() const {
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto& dd = domain(d);
            std::unordered_set<std::uint64_t> seen;
            for (const auto& e : dd.interactions) {
                if (e.user < 0 || e.user >= dd.num_users() || e.item < 0 || e.item >= dd.num_items()) {
                    throw ContractError(std::string("interaction out of vocabulary bounds in domain ") +
                                        to_string(d));
                }
                const auto key = (static_cast<std::uint64_t>(e.user) << 32) | static_cast<std::uint32_t>(e.item);
                if (!seen.insert(key).second) {
                    throw ContractError(std::string("duplicate interaction in domain ") + to_string(d));
                }
            }
            if (!dd.timestamps.empty() && dd.timestamps.size() != dd.interactions.size()) {
                throw ContractError("timestamp column length mismatch");
            }
            if (dd.held_out.size() != dd.users.size()) {
                throw ContractError("held-out vector length mismatch");
            }
        }
        for (const auto& o : overlap) {
            if (x.users.at(static_cast<std::size_t>(o.user_x)) != y.users.at(static_cast<std::size_t>(o.user_y))) {
                throw ContractError("overlap pair refers to different user ids");
            }
        }
        const auto expected = split_sizes(overlap.size());
        std::array<std::size_t, 3> got{};
        for (const auto& o : overlap) ++got[static_cast<std::size_t>(o.split)];
        if (got != expected) {
            throw ContractError("split sizes do not match the 80/10/10 rule");
        }
    }

    friend bool operator==(const InteractionDataset& a, const InteractionDataset& b) {
        return a.x == b.x && a.y == b.y && a.overlap == b.overlap && a.seed == b.seed;
    }

private:
    static void ingest(const std::vector<Record>& records, DomainData& dd, const std::string& name) {
        if (records.empty()) {
            throw DataError("domain " + name + " has no interactions");
        }
        const bool timed = std::all_of(records.begin(), records.end(),
                                       [](const Record& r) { return r.timestamp.has_value(); });
        std::unordered_set<std::uint64_t> seen;
        for (const auto& r : records) {
            auto [uit, unew] = dd.user_index.emplace(r.user, dd.num_users());
            if (unew) dd.users.push_back(r.user);
            auto [iit, inew] = dd.item_index.emplace(r.item, dd.num_items());
            if (inew) dd.items.push_back(r.item);
            const Interaction e{uit->second, iit->second};
            const auto key = (static_cast<std::uint64_t>(e.user) << 32) | static_cast<std::uint32_t>(e.item);
            if (!seen.insert(key).second) continue;
            dd.interactions.push_back(e);
            if (timed) dd.timestamps.push_back(*r.timestamp);
        }
        dd.held_out.assign(dd.users.size(), -1);
    }

    void assign_splits() {
        std::vector<std::size_t> order(overlap.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(seed, 1));
        rng.shuffle(order);
        const auto sizes = split_sizes(overlap.size());
        for (std::size_t r = 0; r < order.size(); ++r) {
            Split s = Split::train;
            if (r < sizes[1]) {
                s = Split::test;
            } else if (r < sizes[1] + sizes[2]) {
                s = Split::validation;
            }
            overlap[order[r]].split = s;
        }
    }

    // The held-out positive is the latest interaction by timestamp, or by
    // record order when the file has no timestamps.
    void assign_held_out() {
        for (const Domain d : {Domain::x, Domain::y}) {
            auto& dd = domain(d);
            std::vector<char> evaluated(static_cast<std::size_t>(dd.num_users()), 0);
            for (const auto& o : overlap) {
                if (o.split != Split::train) evaluated[static_cast<std::size_t>(user_of(o, d))] = 1;
            }
            std::vector<std::int64_t> best_ts(static_cast<std::size_t>(dd.num_users()),
                                              std::numeric_limits<std::int64_t>::min());
            for (std::size_t k = 0; k < dd.interactions.size(); ++k) {
                const auto& e = dd.interactions[k];
                const auto u = static_cast<std::size_t>(e.user);
                if (!evaluated[u]) continue;
                const std::int64_t ts = dd.timestamps.empty() ? static_cast<std::int64_t>(k) : dd.timestamps[k];
                if (ts >= best_ts[u]) {
                    best_ts[u] = ts;
                    dd.held_out[u] = e.item;
                }
            }
        }
    }
};

// ---- CSV ingestion ----------------------------------------------------------

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(trim(line.substr(start, i - start)));
            start = i + 1;
        }
    }
    return out;
}

inline bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() &&
           std::equal(a.begin(), a.end(), b.begin(), [](char l, char r) {
               return std::tolower(static_cast<unsigned char>(l)) == std::tolower(static_cast<unsigned char>(r));
           });
}

}  // namespace detail

/// Parses user_id,item_id[,timestamp] rows. A first line naming the columns
/// is treated as a header. Blank lines are skipped.
inline std::vector<Record> parse_interactions(std::istream& in, const std::string& name) {
    std::vector<Record> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
            static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
            line.erase(0, 3);
        }
        const auto view = detail::trim(line);
        if (view.empty()) continue;
        const auto fields = detail::split_fields(view);
        if (out.empty() && fields.size() >= 2 && detail::iequals(fields[0], "user_id") &&
            detail::iequals(fields[1], "item_id")) {
            continue;
        }
        if (fields.size() < 2 || fields.size() > 3) {
            throw ParseError(name, lineno, "expected user_id,item_id[,timestamp]");
        }
        if (fields[0].empty() || fields[1].empty()) {
            throw ParseError(name, lineno, "empty user or item id");
        }
        Record r{std::string(fields[0]), std::string(fields[1]), std::nullopt};
        if (fields.size() == 3 && !fields[2].empty()) {
            std::int64_t ts = 0;
            std::size_t used = 0;
            try {
                ts = std::stoll(std::string(fields[2]), &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != fields[2].size()) {
                throw ParseError(name, lineno, "timestamp is not an integer");
            }
            r.timestamp = ts;
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<Record> read_interactions(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    return parse_interactions(in, path);
}

inline InteractionDataset load_domain_pair(const std::string& path_x, const std::string& path_y,
                                           std::uint64_t seed) {
    return InteractionDataset::from_records(read_interactions(path_x), read_interactions(path_y), seed);
}

// ---- adjacency --------------------------------------------------------------

/// Symmetric degree-normalized user x item adjacency over training
/// interactions: w_uv = 1 / sqrt(deg(u) deg(v)).
struct NormalizedAdjacency {
    std::int32_t rows = 0;
    std::int32_t cols = 0;
    std::shared_ptr<const ad::SparseMatrix> forward;    // users x items
    std::shared_ptr<const ad::SparseMatrix> transpose;  // items x users
};

inline NormalizedAdjacency build_adjacency(std::int32_t num_users, std::int32_t num_items,
                                           const std::vector<Interaction>& edges) {
    std::vector<double> du(static_cast<std::size_t>(num_users), 0.0);
    std::vector<double> dv(static_cast<std::size_t>(num_items), 0.0);
    for (const auto& e : edges) {
        du[static_cast<std::size_t>(e.user)] += 1.0;
        dv[static_cast<std::size_t>(e.item)] += 1.0;
    }
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(edges.size());
    for (const auto& e : edges) {
        trip.emplace_back(e.user, e.item,
                          1.0 / std::sqrt(du[static_cast<std::size_t>(e.user)] * dv[static_cast<std::size_t>(e.item)]));
    }
    auto fwd = std::make_shared<ad::SparseMatrix>(num_users, num_items);
    fwd->setFromTriplets(trip.begin(), trip.end());
    fwd->makeCompressed();
    auto tr = std::make_shared<ad::SparseMatrix>(fwd->transpose());
    tr->makeCompressed();
    return {num_users, num_items, std::move(fwd), std::move(tr)};
}

inline NormalizedAdjacency build_adjacency(const InteractionDataset& ds, Domain d, HeldOutMask exclude = {}) {
    const auto& dd = ds.domain(d);
    return build_adjacency(dd.num_users(), dd.num_items(), ds.training_interactions(d, exclude));
}

// ---- negative pools ---------------------------------------------------------

struct EvalInstance {
    std::int32_t user;      // domain-local user index
    std::int32_t positive;  // held-out item
    std::vector<std::int32_t> negatives;
    friend bool operator==(const EvalInstance&, const EvalInstance&) = default;
};

struct NegativeSamplePool {
    Domain domain = Domain::x;
    std::size_t pool_size = 999;
    std::vector<EvalInstance> test;
    std::vector<EvalInstance> validation;

    [[nodiscard]] const std::vector<EvalInstance>& instances(Split s) const {
        return s == Split::validation ? validation : test;
    }
};

/// Draws `pool_size` distinct never-interacted items for every test and
/// validation user of domain d.
inline NegativeSamplePool sample_negatives(const InteractionDataset& ds, Domain d, std::uint64_t seed,
                                           std::size_t pool_size = 999) {
    const auto& dd = ds.domain(d);
    const auto by_user = dd.items_by_user();
    Rng rng(derive_seed(seed, 10 + static_cast<std::uint64_t>(d)));
    NegativeSamplePool pool;
    pool.domain = d;
    pool.pool_size = pool_size;
    std::vector<char> touched(static_cast<std::size_t>(dd.num_items()), 0);
    for (const auto& o : ds.overlap) {
        if (o.split == Split::train) continue;
        const auto u = InteractionDataset::user_of(o, d);
        const auto& mine = by_user[static_cast<std::size_t>(u)];
        for (auto i : mine) touched[static_cast<std::size_t>(i)] = 1;
        std::vector<std::int32_t> eligible;
        eligible.reserve(static_cast<std::size_t>(dd.num_items()));
        for (std::int32_t i = 0; i < dd.num_items(); ++i) {
            if (!touched[static_cast<std::size_t>(i)]) eligible.push_back(i);
        }
        for (auto i : mine) touched[static_cast<std::size_t>(i)] = 0;
        if (eligible.size() < pool_size) {
            throw DataError("user '" + dd.users[static_cast<std::size_t>(u)] + "' in domain " + to_string(d) +
                            " has only " + std::to_string(eligible.size()) + " eligible negatives (need " +
                            std::to_string(pool_size) + ")");
        }
        // Partial Fisher-Yates: the first pool_size slots are a uniform sample.
        for (std::size_t k = 0; k < pool_size; ++k) {
            const auto j = k + static_cast<std::size_t>(rng.below(eligible.size() - k));
            std::swap(eligible[k], eligible[j]);
        }
        eligible.resize(pool_size);
        EvalInstance inst{u, dd.held_out[static_cast<std::size_t>(u)], std::move(eligible)};
        (o.split == Split::test ? pool.test : pool.validation).push_back(std::move(inst));
    }
    return pool;
}

// ---- user-group sampler -----------------------------------------------------

struct UserBatch {
    std::vector<std::int32_t> x;  // X-domain user indices
    std::vector<std::int32_t> y;  // Y-domain user indices
    std::size_t paired = 0;       // leading positions holding the same user in both
};

/// Draws groups of N users per domain. The first `paired` positions hold
/// overlap users at the same position in both batches; the rest are filled
/// with that domain's unpaired training users. Not thread-safe.
class UserGroupSampler {
public:
    UserGroupSampler(const InteractionDataset& ds, std::size_t group_size, std::uint64_t seed,
                     double overlap_ratio = 1.0, double pair_fraction = 1.0)
        : group_size_(group_size), pair_fraction_(pair_fraction), rng_(derive_seed(seed, 20)) {
        if (group_size < 1) throw ConfigError("group size N must be >= 1");
        if (overlap_ratio < 0 || overlap_ratio > 1) throw ConfigError("overlap ratio must be in [0, 1]");
        if (pair_fraction < 0 || pair_fraction > 1) throw ConfigError("pair fraction must be in [0, 1]");
        auto train = ds.overlap_in(Split::train);
        // Which training overlap users keep their pairing is itself seeded.
        Rng pick(derive_seed(seed, 21));
        pick.shuffle(train);
        const auto keep = static_cast<std::size_t>(std::floor(overlap_ratio * static_cast<double>(train.size()) + 0.5));
        train.resize(std::min(keep, train.size()));
        std::sort(train.begin(), train.end(), [](const auto& a, const auto& b) { return a.user_x < b.user_x; });
        pairs_ = std::move(train);
        for (const Domain d : {Domain::x, Domain::y}) {
            std::vector<char> is_paired(static_cast<std::size_t>(ds.domain(d).num_users()), 0);
            for (const auto& p : pairs_) is_paired[static_cast<std::size_t>(InteractionDataset::user_of(p, d))] = 1;
            auto& pool = exclusive_[static_cast<std::size_t>(d)];
            for (auto u : ds.training_users(d)) {
                if (!is_paired[static_cast<std::size_t>(u)]) pool.push_back(u);
            }
        }
    }

    [[nodiscard]] const std::vector<OverlapUser>& pairs() const { return pairs_; }
    [[nodiscard]] std::size_t group_size() const { return group_size_; }

    [[nodiscard]] std::size_t population(Domain d) const {
        return pairs_.size() + exclusive_[static_cast<std::size_t>(d)].size();
    }

    UserBatch next() {
        UserBatch b;
        const auto want_pairs = static_cast<std::size_t>(
            std::floor(pair_fraction_ * static_cast<double>(group_size_) + 0.5));
        const std::size_t n_pairs = std::min(want_pairs, pairs_.size());
        for (std::size_t k : draw(pairs_.size(), n_pairs)) {
            b.x.push_back(pairs_[k].user_x);
            b.y.push_back(pairs_[k].user_y);
        }
        b.paired = n_pairs;
        for (const Domain d : {Domain::x, Domain::y}) {
            auto& out = d == Domain::x ? b.x : b.y;
            const auto& pool = exclusive_[static_cast<std::size_t>(d)];
            const std::size_t need = group_size_ - n_pairs;
            if (need == 0) continue;
            if (pool.empty()) {
                // Only paired users exist; reuse them domain-locally.
                for (std::size_t k : draw(pairs_.size(), need)) {
                    out.push_back(InteractionDataset::user_of(pairs_[k], d));
                }
                continue;
            }
            for (std::size_t k : draw(pool.size(), need)) out.push_back(pool[k]);
        }
        return b;
    }

private:
    std::vector<std::size_t> draw(std::size_t population, std::size_t count) {
        std::vector<std::size_t> out;
        if (count == 0 || population == 0) return out;
        if (count > population) {
            if (!warned_) {
                warn("group size exceeds training population; sampling with replacement");
                warned_ = true;
            }
            for (std::size_t k = 0; k < count; ++k) out.push_back(static_cast<std::size_t>(rng_.below(population)));
            return out;
        }
        std::unordered_set<std::size_t> taken;
        while (out.size() < count) {
            const auto k = static_cast<std::size_t>(rng_.below(population));
            if (taken.insert(k).second) out.push_back(k);
        }
        return out;
    }

    std::size_t group_size_;
    double pair_fraction_;
    Rng rng_;
    bool warned_ = false;
    std::vector<OverlapUser> pairs_;
    std::array<std::vector<std::int32_t>, 2> exclusive_;
};

// ---- dataset cache ----------------------------------------------------------

namespace detail {

inline constexpr char kDatasetMagic[8] = {'C', 'I', 'D', 'E', 'R', 'D', 'S', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.put(static_cast<char>(u & 0xFF));
        u = static_cast<U>(u >> 8);
    }
}

template <class T>
T get(std::istream& in) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw DataError("dataset cache truncated");
        u = static_cast<U>(u | (static_cast<U>(static_cast<unsigned char>(c)) << (8 * i)));
    }
    return static_cast<T>(u);
}

inline void put_string(std::ostream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
    const auto n = get<std::uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (static_cast<std::uint32_t>(in.gcount()) != n) throw DataError("dataset cache truncated");
    return s;
}

inline void put_domain(std::ostream& out, const DomainData& d) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(d.users.size()));
    for (const auto& s : d.users) put_string(out, s);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(d.items.size()));
    for (const auto& s : d.items) put_string(out, s);
    put<std::uint64_t>(out, d.interactions.size());
    put<std::uint8_t>(out, d.timestamps.empty() ? 0 : 1);
    for (std::size_t k = 0; k < d.interactions.size(); ++k) {
        put<std::int32_t>(out, d.interactions[k].user);
        put<std::int32_t>(out, d.interactions[k].item);
        if (!d.timestamps.empty()) put<std::int64_t>(out, d.timestamps[k]);
    }
    for (auto h : d.held_out) put<std::int32_t>(out, h);
}

inline DomainData get_domain(std::istream& in) {
    DomainData d;
    d.users.resize(get<std::uint32_t>(in));
    for (auto& s : d.users) s = get_string(in);
    d.items.resize(get<std::uint32_t>(in));
    for (auto& s : d.items) s = get_string(in);
    const auto n = get<std::uint64_t>(in);
    const bool timed = get<std::uint8_t>(in) != 0;
    d.interactions.resize(n);
    if (timed) d.timestamps.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
        d.interactions[k].user = get<std::int32_t>(in);
        d.interactions[k].item = get<std::int32_t>(in);
        if (timed) d.timestamps[k] = get<std::int64_t>(in);
    }
    d.held_out.resize(d.users.size());
    for (auto& h : d.held_out) h = get<std::int32_t>(in);
    d.rebuild_lookup();
    return d;
}

}  // namespace detail

/// Versioned little-endian binary cache:
///   magic "CIDERDS\0", u32 version, u64 seed, domain x, domain y,
///   u32 overlap count, then (i32 user_x, i32 user_y, u8 split) per pair.
/// Each domain: u32 users + strings, u32 items + strings, u64 interactions,
/// u8 has_timestamps, (i32 user, i32 item[, i64 ts]) rows, i32 held-out per user.
/// Strings are u32 length + raw UTF-8 bytes.
inline void save_dataset(std::ostream& out, const InteractionDataset& ds) {
    out.write(detail::kDatasetMagic, sizeof(detail::kDatasetMagic));
    detail::put<std::uint32_t>(out, detail::kDatasetVersion);
    detail::put<std::uint64_t>(out, ds.seed);
    detail::put_domain(out, ds.x);
    detail::put_domain(out, ds.y);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.overlap.size()));
    for (const auto& o : ds.overlap) {
        detail::put<std::int32_t>(out, o.user_x);
        detail::put<std::int32_t>(out, o.user_y);
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(o.split));
    }
}

inline InteractionDataset load_dataset(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, detail::kDatasetMagic, sizeof(magic)) != 0) {
        throw DataError("not a dataset cache file");
    }
    const auto version = detail::get<std::uint32_t>(in);
    if (version != detail::kDatasetVersion) {
        throw DataError("unsupported dataset cache version " + std::to_string(version));
    }
    InteractionDataset ds;
    ds.seed = detail::get<std::uint64_t>(in);
    ds.x = detail::get_domain(in);
    ds.y = detail::get_domain(in);
    ds.overlap.resize(detail::get<std::uint32_t>(in));
    for (auto& o : ds.overlap) {
        o.user_x = detail::get<std::int32_t>(in);
        o.user_y = detail::get<std::int32_t>(in);
        const auto s = detail::get<std::uint8_t>(in);
        if (s > 2) throw DataError("dataset cache has an invalid split tag");
        o.split = static_cast<Split>(s);
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const std::string& path, const InteractionDataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    save_dataset(out, ds);
}

inline InteractionDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return load_dataset(in);
}

}  // namespace cider::data
