#pragma once

// Mini-batch training over user groups.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/cpa.hpp"
#include "cider/data.hpp"
#include "cider/deep.hpp"
#include "cider/errors.hpp"
#include "cider/format.hpp"
#include "cider/model.hpp"
#include "cider/objective.hpp"
#include "cider/random.hpp"

namespace cider {

struct TrainConfig {
    int epochs = 100;
    double learning_rate = 1e-3;
    int group_size = 16;  // N
    objective::LossWeights weights;
    objective::Variant variant = objective::Variant::full;
    std::uint64_t seed = 1;
    int negatives = 1;  // per positive
    double centroid_learning_rate = 0.05;
    int centroid_update_period = 1;  // optimizer steps between centroid updates
    double overlap_ratio = 1.0;  // fraction of training pairs kept paired
    double pair_fraction = 1.0;  // share of each group drawn from the pairs
    double divergence_factor = 1e3;

    void validate() const {
        if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
        if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
        if (group_size < 1) throw ConfigError("train.group_size (N) must be >= 1");
        weights.validate();
        if (negatives < 1) throw ConfigError("train.negatives must be >= 1");
        if (!(centroid_learning_rate > 0)) throw ConfigError("train.centroid_learning_rate must be > 0");
        if (centroid_update_period < 1) throw ConfigError("cpa.update_period must be >= 1");
        if (overlap_ratio < 0 || overlap_ratio > 1) throw ConfigError("train.overlap_ratio must be in [0, 1]");
        if (pair_fraction < 0 || pair_fraction > 1) throw ConfigError("train.pair_fraction must be in [0, 1]");
        if (!(divergence_factor > 1)) throw ConfigError("train.divergence_factor must be > 1");
    }
};

struct LossLogRow {
    int epoch = 0;
    long step = 0;
    objective::LossBreakdown loss;
};

struct EpochSummary {
    int epoch = 0;
    objective::LossBreakdown mean;
    double alignment = 0.0;           // shallow L_sa after the epoch (0 without CPA)
    double max_assignment_error = 0.0;  // max |sum_t pi_i(t) - 1| seen in the epoch
};

struct TrainResult {
    std::vector<LossLogRow> log;
    std::vector<EpochSummary> epochs;
    double initial_alignment = 0.0;
    std::vector<data::OverlapUser> trained_pairs;
};

inline void write_loss_log(std::ostream& os, const std::vector<LossLogRow>& rows) {
    os << "epoch,step,L_s,L_d,vib_x,vib_y,total\n";
    for (const auto& r : rows) {
        os << r.epoch << ',' << r.step << ',' << format_double(r.loss.shallow) << ',' << format_double(r.loss.deep)
           << ',' << format_double(r.loss.vib_x) << ',' << format_double(r.loss.vib_y) << ','
           << format_double(r.loss.total) << '\n';
    }
}

inline void write_loss_log(const std::string& path, const std::vector<LossLogRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write loss log " + path);
    write_loss_log(os, rows);
}

namespace detail {

struct DomainTrainingData {
    std::vector<std::vector<std::int32_t>> positives;           // training items per user
    std::vector<std::unordered_set<std::int32_t>> interacted;  // every item per user
    std::int32_t items = 0;
};

inline DomainTrainingData training_data(const data::InteractionDataset& ds, Domain d) {
    const auto& dd = ds.domain(d);
    DomainTrainingData out;
    out.items = dd.num_items();
    out.positives.resize(static_cast<std::size_t>(dd.num_users()));
    out.interacted.resize(static_cast<std::size_t>(dd.num_users()));
    for (const auto& e : ds.training_interactions(d)) out.positives[static_cast<std::size_t>(e.user)].push_back(e.item);
    for (const auto& e : dd.interactions) out.interacted[static_cast<std::size_t>(e.user)].insert(e.item);
    return out;
}

/// Rows of the batch and their positive / negative item indices.
struct VibSample {
    std::vector<Eigen::Index> rows;
    std::vector<Eigen::Index> positives;
    std::vector<Eigen::Index> negatives;
};

inline VibSample vib_sample(const DomainTrainingData& td, const std::vector<std::int32_t>& users, int negatives,
                            Rng& rng) {
    VibSample s;
    for (std::size_t r = 0; r < users.size(); ++r) {
        const auto u = static_cast<std::size_t>(users[r]);
        const auto& seen = td.interacted[u];
        if (seen.size() >= static_cast<std::size_t>(td.items)) continue;
        for (auto item : td.positives[u]) {
            for (int k = 0; k < negatives; ++k) {
                std::int32_t neg = 0;
                do {
                    neg = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(td.items)));
                } while (seen.count(neg) != 0);
                s.rows.push_back(static_cast<Eigen::Index>(r));
                s.positives.push_back(item);
                s.negatives.push_back(neg);
            }
        }
    }
    return s;
}

inline std::vector<Eigen::Index> as_index(const std::vector<std::int32_t>& v) {
    return {v.begin(), v.end()};
}

inline Matrix gather(const Matrix& m, const std::vector<std::int32_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

}  // namespace detail

/// Builds centroids from the current encoder state: shared k-means over the
/// paired training users, or per-domain clustering when there are none.
inline void init_centroids(CiderModel& model, const data::InteractionDataset& ds,
                           const std::array<data::NormalizedAdjacency, 2>& adjacency,
                           const std::vector<data::OverlapUser>& pairs) {
    const Encoded enc = model.encode(adjacency);
    for (const Subspace s : {Subspace::shallow, Subspace::deep}) {
        if (!model.uses_centroids(s)) continue;
        std::array<Matrix, 2> mean;
        std::array<Matrix, 2> var;
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto& r = enc.users[index_of(d)];
            mean[index_of(d)] = (s == Subspace::shallow ? model.shallow_mean(r) : model.deep_mean(r)).value();
            var[index_of(d)] = (s == Subspace::shallow ? model.shallow_variance(r) : model.deep_variance(r)).value();
        }
        cpa::SharedInit init;
        if (!pairs.empty()) {
            std::vector<std::int32_t> ux;
            std::vector<std::int32_t> uy;
            for (const auto& p : pairs) {
                ux.push_back(p.user_x);
                uy.push_back(p.user_y);
            }
            init = cpa::init_centroids_shared(detail::gather(mean[0], ux), detail::gather(var[0], ux),
                                              detail::gather(mean[1], uy), detail::gather(var[1], uy),
                                              model.config().centroids, model.seed());
        } else {
            const auto tx = ds.training_users(Domain::x);
            const auto ty = ds.training_users(Domain::y);
            init = cpa::init_centroids_unpaired(detail::gather(mean[0], tx), detail::gather(var[0], tx),
                                                detail::gather(mean[1], ty), detail::gather(var[1], ty),
                                                model.config().centroids, model.seed());
        }
        model.centroids(Domain::x, s) = std::move(init.x);
        model.centroids(Domain::y, s) = std::move(init.y);
    }
}

inline double alignment_value(const CiderModel& model, Subspace s) {
    const auto& cx = model.centroids(Domain::x, s);
    const auto& cy = model.centroids(Domain::y, s);
    if (!cx || !cy) return 0.0;
    return cpa::centroid_alignment_loss(*cx, *cy).item();
}

/// Observer called after every optimizer step.
using StepObserver = std::function<void(const LossLogRow&)>;
/// Observer called after every epoch with the model in its end-of-epoch state.
using EpochObserver = std::function<void(const EpochSummary&, const CiderModel&)>;

/// Runs `config.epochs` epochs. An epoch is ceil(max population / N) steps.
inline TrainResult train(CiderModel& model, const data::InteractionDataset& ds, const TrainConfig& config,
                         const StepObserver& observer = {}, const EpochObserver& epoch_observer = {}) {
    config.validate();
    if (config.variant != model.variant()) throw ContractError("train: model built for a different variant");
    const auto adjacency = training_adjacency(ds);
    data::UserGroupSampler sampler(ds, static_cast<std::size_t>(config.group_size), config.seed, config.overlap_ratio,
                                   config.pair_fraction);
    TrainResult result;
    result.trained_pairs = sampler.pairs();
    init_centroids(model, ds, adjacency, sampler.pairs());
    result.initial_alignment = alignment_value(model, Subspace::shallow);

    const std::array<detail::DomainTrainingData, 2> td{detail::training_data(ds, Domain::x),
                                                       detail::training_data(ds, Domain::y)};
    Rng negative_rng(derive_seed(config.seed, 50));
    Rng noise_rng(derive_seed(config.seed, 51));
    ad::Adam optimizer(model.trainable_params(), {.learning_rate = config.learning_rate});
    const auto& mask = model.mask();
    const double alpha = model.config().alpha;
    const auto population = std::max(sampler.population(Domain::x), sampler.population(Domain::y));
    const long steps_per_epoch = std::max<long>(
        1, static_cast<long>((population + static_cast<std::size_t>(config.group_size) - 1) /
                             static_cast<std::size_t>(config.group_size)));
    double initial_total = std::numeric_limits<double>::quiet_NaN();
    long step = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        EpochSummary summary;
        summary.epoch = epoch;
        for (long s = 0; s < steps_per_epoch; ++s) {
            const auto batch = sampler.next();
            const std::array<const std::vector<std::int32_t>*, 2> users{&batch.x, &batch.y};
            const Encoded enc = model.encode(adjacency);

            std::array<Var, 2> shallow_mean;
            std::array<Var, 2> shallow_var;
            std::array<Var, 2> deep_mean;
            std::array<Var, 2> deep_var;
            for (const Domain d : {Domain::x, Domain::y}) {
                const auto k = index_of(d);
                const auto idx = detail::as_index(*users[k]);
                const auto& r = enc.users[k];
                if (model.shallow_layers() > 0) {
                    shallow_mean[k] = ad::gather_rows(model.shallow_mean(r), idx);
                    shallow_var[k] = ad::gather_rows(model.shallow_variance(r), idx);
                }
                deep_mean[k] = ad::gather_rows(model.deep_mean(r), idx);
                deep_var[k] = ad::gather_rows(model.deep_variance(r), idx);
            }

            Var shallow_loss;
            Var deep_loss;
            std::array<Matrix, 4> responsibilities;  // [subspace * 2 + domain]
            for (const Subspace sub : {Subspace::shallow, Subspace::deep}) {
                if (!model.uses_centroids(sub)) continue;
                const auto& m = sub == Subspace::shallow ? shallow_mean : deep_mean;
                const auto& v = sub == Subspace::shallow ? shallow_var : deep_var;
                Var term;
                for (const Domain d : {Domain::x, Domain::y}) {
                    const auto score = cpa::matching_score(m[index_of(d)], v[index_of(d)],
                                                           *model.centroids(d, sub), alpha);
                    responsibilities[static_cast<std::size_t>(sub) * 2 + index_of(d)] = score.responsibilities.value();
                    term = term.defined() ? term + score.loss : score.loss;
                }
                term = term + cpa::centroid_alignment_loss(*model.centroids(Domain::x, sub),
                                                           *model.centroids(Domain::y, sub));
                shallow_loss = shallow_loss.defined() ? shallow_loss + term : term;
                for (std::size_t q = static_cast<std::size_t>(sub) * 2; q < static_cast<std::size_t>(sub) * 2 + 2; ++q) {
                    const double err = (responsibilities[q].rowwise().sum().array() - 1.0).abs().maxCoeff();
                    summary.max_assignment_error = std::max(summary.max_assignment_error, err);
                }
            }
            if (mask.mmd) {
                shallow_loss = deep::mmd_rbf(shallow_mean[0], shallow_mean[1]);
                deep_loss = deep::mmd_rbf(deep_mean[0], deep_mean[1]);
            }

            std::array<Var, 2> reconstructed{deep_mean[0], deep_mean[1]};
            if (mask.decomposition) {
                const auto lat = deep::decompose(deep_mean[0], deep_mean[1], *model.heads(), batch.paired);
                reconstructed[0] = deep::reparameterize(lat.stable_x, lat.variant_x, &noise_rng);
                reconstructed[1] = deep::reparameterize(lat.stable_y, lat.variant_y, &noise_rng);
                if (mask.flow && batch.paired > 0) {
                    std::vector<Eigen::Index> head(batch.paired);
                    for (std::size_t i = 0; i < batch.paired; ++i) head[i] = static_cast<Eigen::Index>(i);
                    deep_loss = deep::flow_nll(*model.flow(), ad::gather_rows(lat.variant_x, head),
                                               ad::gather_rows(lat.variant_y, head), model.config().flow_bandwidth,
                                               model.config().flow_target);
                }
            }

            std::array<Var, 2> vib;
            for (const Domain d : {Domain::x, Domain::y}) {
                const auto k = index_of(d);
                const auto sample = detail::vib_sample(td[k], *users[k], config.negatives, negative_rng);
                if (sample.rows.empty()) continue;
                const Var items = model.deep_mean(enc.items[k]);
                vib[k] = objective::vib_bound(ad::gather_rows(reconstructed[k], sample.rows),
                                              ad::gather_rows(items, sample.positives),
                                              ad::gather_rows(items, sample.negatives));
            }

            const auto obj = objective::total_loss(shallow_loss, deep_loss, vib[0], vib[1], config.weights);
            const double total = obj.breakdown.total;
            if (std::isnan(initial_total)) initial_total = total;
            if (!std::isfinite(total) ||
                std::abs(total) > config.divergence_factor * std::max(1.0, std::abs(initial_total))) {
                std::ostringstream msg;
                msg << "training diverged at epoch " << epoch << " step " << step << ": total " << total
                    << " (initial " << initial_total << "), L_s " << obj.breakdown.shallow << ", L_d "
                    << obj.breakdown.deep << ", vib_x " << obj.breakdown.vib_x << ", vib_y " << obj.breakdown.vib_y;
                throw NumericError(msg.str());
            }

            optimizer.zero_grad();
            for (const Subspace sub : {Subspace::shallow, Subspace::deep}) {
                for (const Domain d : {Domain::x, Domain::y}) {
                    if (auto& c = model.centroids(d, sub)) {
                        for (auto p : c->params()) p.zero_grad();
                    }
                }
            }
            ad::backward(obj.total);
            optimizer.step();
            const bool update_now = (step + 1) % config.centroid_update_period == 0;
            for (const Subspace sub : {Subspace::shallow, Subspace::deep}) {
                for (const Domain d : {Domain::x, Domain::y}) {
                    if (auto& c = model.centroids(d, sub); c && update_now) {
                        const auto& resp = responsibilities[static_cast<std::size_t>(sub) * 2 + index_of(d)];
                        cpa::update_centroids(*c, config.centroid_learning_rate, &resp);
                    }
                }
            }

            LossLogRow row{epoch, step, obj.breakdown};
            result.log.push_back(row);
            summary.mean.shallow += row.loss.shallow;
            summary.mean.deep += row.loss.deep;
            summary.mean.vib_x += row.loss.vib_x;
            summary.mean.vib_y += row.loss.vib_y;
            summary.mean.total += row.loss.total;
            if (observer) observer(row);
            ++step;
        }
        const double n = static_cast<double>(steps_per_epoch);
        summary.mean.shallow /= n;
        summary.mean.deep /= n;
        summary.mean.vib_x /= n;
        summary.mean.vib_y /= n;
        summary.mean.total /= n;
        summary.alignment = alignment_value(model, Subspace::shallow);
        result.epochs.push_back(summary);
        if (epoch_observer) epoch_observer(summary, model);
    }
    return result;
}

}  // namespace cider
