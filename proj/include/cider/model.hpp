#pragma once

// Two-domain model: per-domain encoders, interest centroids, deep heads and
// the flow, wired according to the variant's component mask.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/cpa.hpp"
#include "cider/data.hpp"
#include "cider/deep.hpp"
#include "cider/encoder.hpp"
#include "cider/errors.hpp"
#include "cider/flow.hpp"
#include "cider/objective.hpp"
#include "cider/random.hpp"

namespace cider {

using ad::Matrix;
using ad::Var;
using data::Domain;

struct ModelConfig {
    encoder::EncoderConfig encoder{3, 2, 64};
    int centroids = 5;      // T
    double alpha = 3.0;     // assignment temperature
    flow::FlowConfig flow;  // NCSF, 3 layers
    double flow_bandwidth = 0.1;
    deep::FlowTarget flow_target = deep::FlowTarget::paired_gaussian;

    void validate() const {
        encoder.validate();
        if (centroids < 1) throw ConfigError("cpa.centroids (T) must be >= 1");
        if (!(alpha > 0)) throw ConfigError("cpa.alpha must be > 0");
        flow.validate();
        if (!(flow_bandwidth > 0)) throw ConfigError("flow.bandwidth must be > 0");
    }
};

struct DomainSizes {
    std::int32_t users_x = 0;
    std::int32_t items_x = 0;
    std::int32_t users_y = 0;
    std::int32_t items_y = 0;

    static DomainSizes of(const data::InteractionDataset& ds) {
        return {ds.x.num_users(), ds.x.num_items(), ds.y.num_users(), ds.y.num_items()};
    }
    [[nodiscard]] std::int32_t users(Domain d) const { return d == Domain::x ? users_x : users_y; }
    [[nodiscard]] std::int32_t items(Domain d) const { return d == Domain::x ? items_x : items_y; }
};

enum class Subspace { shallow = 0, deep = 1 };

inline const char* to_string(Subspace s) { return s == Subspace::shallow ? "shallow" : "deep"; }

inline std::size_t index_of(Domain d) { return static_cast<std::size_t>(d); }

/// Encoder output for both domains.
struct Encoded {
    std::array<encoder::LayeredRepresentation, 2> users;
    std::array<encoder::LayeredRepresentation, 2> items;
};

/// Full-width user and item matrices used for ranking.
struct InferenceResult {
    std::array<Matrix, 2> users;
    std::array<Matrix, 2> items;
    std::size_t cross_domain_inferred = 0;  // users rebuilt through the other domain
};

class CiderModel {
public:
    CiderModel(ModelConfig config, objective::Variant variant, DomainSizes sizes, std::uint64_t seed)
        : config_(std::move(config)),
          variant_(variant),
          mask_(objective::select_variant(variant)),
          sizes_(sizes),
          seed_(seed) {
        config_.validate();
        encoders_.emplace_back("x", sizes.users_x, sizes.items_x, config_.encoder, derive_seed(seed, 200));
        encoders_.emplace_back("y", sizes.users_y, sizes.items_y, config_.encoder, derive_seed(seed, 201));
        if (mask_.decomposition) heads_.emplace(deep_width(), derive_seed(seed, 210));
        if (mask_.flow) flow_ = std::make_unique<flow::FlowTransform>(deep_width(), config_.flow, derive_seed(seed, 220));
    }

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] objective::Variant variant() const { return variant_; }
    [[nodiscard]] const objective::ComponentMask& mask() const { return mask_; }
    [[nodiscard]] const DomainSizes& sizes() const { return sizes_; }
    [[nodiscard]] std::uint64_t seed() const { return seed_; }

    /// Layers in the shallow block; 0 when the hierarchy is switched off.
    [[nodiscard]] int shallow_layers() const { return mask_.hierarchy ? config_.encoder.shallow_layers : 0; }
    [[nodiscard]] int shallow_width() const { return shallow_layers() * config_.encoder.width; }
    [[nodiscard]] int deep_width() const {
        return (config_.encoder.layers - shallow_layers()) * config_.encoder.width;
    }

    [[nodiscard]] const encoder::DomainEncoder& encoder(Domain d) const { return encoders_[index_of(d)]; }
    [[nodiscard]] const deep::DecompositionHeads* heads() const { return heads_ ? &*heads_ : nullptr; }
    [[nodiscard]] const flow::FlowTransform* flow() const { return flow_.get(); }

    [[nodiscard]] std::optional<cpa::CentroidSet>& centroids(Domain d, Subspace s) {
        return centroids_[index_of(d)][static_cast<std::size_t>(s)];
    }
    [[nodiscard]] const std::optional<cpa::CentroidSet>& centroids(Domain d, Subspace s) const {
        return centroids_[index_of(d)][static_cast<std::size_t>(s)];
    }
    [[nodiscard]] bool uses_centroids(Subspace s) const {
        return s == Subspace::shallow ? mask_.shallow_cpa : mask_.deep_cpa;
    }

    [[nodiscard]] Encoded encode(const std::array<data::NormalizedAdjacency, 2>& adjacency) const {
        Encoded e;
        for (const Domain d : {Domain::x, Domain::y}) {
            auto [u, i] = encoders_[index_of(d)].encode(adjacency[index_of(d)]);
            e.users[index_of(d)] = std::move(u);
            e.items[index_of(d)] = std::move(i);
        }
        return e;
    }

    [[nodiscard]] Var shallow_mean(const encoder::LayeredRepresentation& r) const {
        return r.block_mean(0, shallow_layers());
    }
    [[nodiscard]] Var shallow_variance(const encoder::LayeredRepresentation& r) const {
        return r.block_variance(0, shallow_layers());
    }
    [[nodiscard]] Var deep_mean(const encoder::LayeredRepresentation& r) const {
        return r.block_mean(shallow_layers(), r.layers());
    }
    [[nodiscard]] Var deep_variance(const encoder::LayeredRepresentation& r) const {
        return r.block_variance(shallow_layers(), r.layers());
    }

    /// Parameters updated by the optimizer (centroids are stepped separately).
    [[nodiscard]] std::vector<Var> trainable_params() const {
        std::vector<Var> out;
        for (const auto& [name, v] : model_params()) out.push_back(v);
        if (flow_) {
            for (auto& v : flow_->params()) out.push_back(v);
        }
        return out;
    }

    /// Encoder and decomposition-head parameters by checkpoint key.
    [[nodiscard]] std::vector<std::pair<std::string, Var>> model_params() const {
        std::vector<std::pair<std::string, Var>> out;
        for (const auto& enc : encoders_) {
            for (auto& p : enc.named_params()) out.push_back(std::move(p));
        }
        if (heads_) {
            for (auto& p : heads_->named_params()) out.push_back(std::move(p));
        }
        return out;
    }

    [[nodiscard]] std::vector<std::pair<std::string, Var>> flow_params() const {
        if (!flow_) return {};
        return flow_->named_params();
    }

    /// Evaluation-mode representations (eps = 0) for every user and item.
    /// Overlap users get the fused stable latent of the domains where they
    /// have training history; those not paired during training go through
    /// cross-domain inference.
    [[nodiscard]] InferenceResult infer(const data::InteractionDataset& ds,
                                        const std::array<data::NormalizedAdjacency, 2>& adjacency,
                                        const std::vector<data::OverlapUser>& trained_pairs) const {
        const Encoded enc = encode(adjacency);
        InferenceResult out;
        std::array<Matrix, 2> deep;
        std::array<Matrix, 2> shallow;
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto k = index_of(d);
            out.items[k] = enc.items[k].full_mean().value();
            deep[k] = deep_mean(enc.users[k]).value();
            if (shallow_layers() > 0) shallow[k] = shallow_mean(enc.users[k]).value();
        }
        if (!heads_) {
            for (const Domain d : {Domain::x, Domain::y}) out.users[index_of(d)] = enc.users[index_of(d)].full_mean().value();
            return out;
        }
        std::array<Matrix, 2> stable;
        std::array<Matrix, 2> variant;
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto& h = d == Domain::x ? heads_->x() : heads_->y();
            stable[index_of(d)] = deep::stable_head(Var(deep[index_of(d)]), h).value();
            variant[index_of(d)] = deep::variant_head(Var(deep[index_of(d)]), h).value();
        }
        std::array<Matrix, 2> recon = stable;
        std::array<std::vector<char>, 2> history;
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto& fwd = *adjacency[index_of(d)].forward;
            auto& hist = history[index_of(d)];
            hist.assign(static_cast<std::size_t>(fwd.rows()), 0);
            for (Eigen::Index u = 0; u < fwd.outerSize(); ++u) {
                hist[static_cast<std::size_t>(u)] = ad::SparseMatrix::InnerIterator(fwd, u) ? 1 : 0;
            }
        }
        std::vector<char> trained_x(static_cast<std::size_t>(sizes_.users_x), 0);
        for (const auto& p : trained_pairs) trained_x[static_cast<std::size_t>(p.user_x)] = 1;
        for (const auto& o : ds.overlap) {
            const auto ux = static_cast<Eigen::Index>(o.user_x);
            const auto uy = static_cast<Eigen::Index>(o.user_y);
            const bool hx = history[0][static_cast<std::size_t>(ux)] != 0;
            const bool hy = history[1][static_cast<std::size_t>(uy)] != 0;
            Eigen::RowVectorXd fused;
            if (hx && hy) {
                fused = 0.5 * (stable[0].row(ux) + stable[1].row(uy));
            } else if (hx) {
                fused = stable[0].row(ux);
            } else if (hy) {
                fused = stable[1].row(uy);
            } else {
                continue;
            }
            if (trained_x[static_cast<std::size_t>(ux)] != 0) {
                recon[0].row(ux) = fused;
                recon[1].row(uy) = fused;
                continue;
            }
            if (flow_) {
                recon[1].row(uy) = deep::cross_domain_infer(*flow_, fused, variant[0].row(ux), deep::InferDirection::x_to_y,
                                                            nullptr);
                recon[0].row(ux) = deep::cross_domain_infer(*flow_, fused, variant[1].row(uy), deep::InferDirection::y_to_x,
                                                            nullptr);
            } else {
                recon[0].row(ux) = fused;
                recon[1].row(uy) = fused;
            }
            ++out.cross_domain_inferred;
        }
        for (const Domain d : {Domain::x, Domain::y}) {
            const auto k = index_of(d);
            if (shallow_layers() == 0) {
                out.users[k] = recon[k];
            } else {
                out.users[k].resize(recon[k].rows(), shallow[k].cols() + recon[k].cols());
                out.users[k] << shallow[k], recon[k];
            }
        }
        return out;
    }

private:
    ModelConfig config_;
    objective::Variant variant_;
    objective::ComponentMask mask_;
    DomainSizes sizes_;
    std::uint64_t seed_;
    std::vector<encoder::DomainEncoder> encoders_;
    std::optional<deep::DecompositionHeads> heads_;
    std::unique_ptr<flow::FlowTransform> flow_;
    std::array<std::array<std::optional<cpa::CentroidSet>, 2>, 2> centroids_;
};

/// Training adjacency per domain with every evaluation held-out removed.
inline std::array<data::NormalizedAdjacency, 2> training_adjacency(const data::InteractionDataset& ds) {
    return {data::build_adjacency(ds, Domain::x), data::build_adjacency(ds, Domain::y)};
}

}  // namespace cider
