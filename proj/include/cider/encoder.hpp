#pragma once

// K-layer variational bipartite graph encoder. Each layer maps the previous
// layer's means on the opposite side of the bipartite graph through the
// normalized adjacency into a diagonal Gaussian per node:
//
//   user  mu_l = ELU(A  X_{l-1} W_mu),  var_l = softplus(A  X_{l-1} W_sigma) + 1e-6
//   item  mu_l = ELU(A' Y_{l-1} W_mu),  var_l = softplus(A' Y_{l-1} W_sigma) + 1e-6
//
// where X_0 / Y_0 are the item / user base embeddings. Layers 1..k form the
// shallow block and k+1..K the deep block.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/data.hpp"
#include "cider/errors.hpp"
#include "cider/random.hpp"

namespace cider::encoder {

using ad::Matrix;
using ad::Var;

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kEmbeddingInitStd = 0.1;

struct EncoderConfig {
    int layers = 3;         // K
    int shallow_layers = 2; // k
    int width = 64;         // d

    void validate() const {
        if (layers < 2) throw ConfigError("encoder.layers (K) must be >= 2");
        if (shallow_layers < 1 || shallow_layers >= layers) {
            throw ConfigError("encoder.shallow_layers (k) must satisfy 1 <= k < K");
        }
        if (width < 1) throw ConfigError("encoder.width (d) must be >= 1");
    }
};

/// Per-layer Gaussian node representations for one side of one domain.
struct LayeredRepresentation {
    std::vector<Var> means;      // K entries, nodes x d
    std::vector<Var> variances;  // K entries, strictly positive

    [[nodiscard]] int layers() const { return static_cast<int>(means.size()); }

    /// Concatenation of layers [from, to) (0-based).
    [[nodiscard]] Var block_mean(int from, int to) const { return ad::concat_cols(slice(means, from, to)); }
    [[nodiscard]] Var block_variance(int from, int to) const {
        return ad::concat_cols(slice(variances, from, to));
    }
    [[nodiscard]] Var full_mean() const { return block_mean(0, layers()); }

private:
    static std::vector<Var> slice(const std::vector<Var>& v, int from, int to) {
        if (from < 0 || to > static_cast<int>(v.size()) || from >= to) {
            throw ContractError("layer block [" + std::to_string(from) + ", " + std::to_string(to) +
                                ") is empty or out of range");
        }
        return {v.begin() + from, v.begin() + to};
    }
};

/// Shallow / deep view over a layered representation.
struct SplitRepresentation {
    LayeredRepresentation layered;
    int shallow_layers;

    [[nodiscard]] Var shallow_mean() const { return layered.block_mean(0, shallow_layers); }
    [[nodiscard]] Var shallow_variance() const { return layered.block_variance(0, shallow_layers); }
    [[nodiscard]] Var deep_mean() const { return layered.block_mean(shallow_layers, layered.layers()); }
    [[nodiscard]] Var deep_variance() const {
        return layered.block_variance(shallow_layers, layered.layers());
    }
    [[nodiscard]] Var full_mean() const { return layered.full_mean(); }
};

struct LayerParams {
    Var w_mu;
    Var w_sigma;
};

/// Base embeddings, initialized i.i.d. N(0, 0.1^2).
inline std::pair<Matrix, Matrix> init_embeddings(int num_users, int num_items, int width, std::uint64_t seed) {
    if (num_users < 1 || num_items < 1 || width < 1) {
        throw ConfigError("init_embeddings: dimensions must be positive");
    }
    Rng rng(derive_seed(seed, 30));
    Matrix users = rng.normal_matrix(num_users, width, kEmbeddingInitStd);
    Matrix items = rng.normal_matrix(num_items, width, kEmbeddingInitStd);
    return {std::move(users), std::move(items)};
}

/// One variational graph layer. `messages` is the sparse operator that routes
/// the opposite side's features to this side.
inline std::pair<Var, Var> vbge_layer(const std::shared_ptr<const ad::SparseMatrix>& messages,
                                      const std::shared_ptr<const ad::SparseMatrix>& messages_t,
                                      const Var& input, const LayerParams& params,
                                      const std::string& where = "vbge layer") {
    if (input.cols() != params.w_mu.rows() || input.cols() != params.w_sigma.rows()) {
        throw ContractError(where + ": input width " + std::to_string(input.cols()) +
                            " does not match layer parameters");
    }
    const Var pooled = ad::spmm(messages, messages_t, input);
    const Var mu = ad::elu(ad::matmul(pooled, params.w_mu));
    const Var var = ad::add_scalar(ad::softplus(ad::matmul(pooled, params.w_sigma)), kVarianceFloor);
    if (!mu.value().allFinite() || !var.value().allFinite()) {
        throw NumericError(where + ": non-finite output");
    }
    return {mu, var};
}

/// Trainable state of one domain's encoder.
class DomainEncoder {
public:
    DomainEncoder(std::string domain, int num_users, int num_items, EncoderConfig config, std::uint64_t seed)
        : domain_(std::move(domain)), config_(config) {
        config_.validate();
        auto [u, i] = init_embeddings(num_users, num_items, config_.width, seed);
        user_embedding_ = Var(std::move(u), true);
        item_embedding_ = Var(std::move(i), true);
        Rng rng(derive_seed(seed, 31));
        const double scale = 1.0 / std::sqrt(static_cast<double>(config_.width));
        for (int l = 0; l < config_.layers; ++l) {
            user_layers_.push_back({Var(rng.normal_matrix(config_.width, config_.width, scale), true),
                                    Var(rng.normal_matrix(config_.width, config_.width, scale), true)});
            item_layers_.push_back({Var(rng.normal_matrix(config_.width, config_.width, scale), true),
                                    Var(rng.normal_matrix(config_.width, config_.width, scale), true)});
        }
    }

    [[nodiscard]] const EncoderConfig& config() const { return config_; }
    [[nodiscard]] const Var& user_embedding() const { return user_embedding_; }
    [[nodiscard]] const Var& item_embedding() const { return item_embedding_; }
    [[nodiscard]] const std::vector<LayerParams>& user_layers() const { return user_layers_; }
    [[nodiscard]] const std::vector<LayerParams>& item_layers() const { return item_layers_; }

    /// Runs all K layers on both sides.
    [[nodiscard]] std::pair<LayeredRepresentation, LayeredRepresentation> encode(
        const data::NormalizedAdjacency& adj) const {
        if (adj.rows != user_embedding_.rows() || adj.cols != item_embedding_.rows()) {
            throw ContractError("encode_domain: adjacency shape does not match embedding tables");
        }
        LayeredRepresentation users;
        LayeredRepresentation items;
        Var user_in = user_embedding_;
        Var item_in = item_embedding_;
        for (int l = 0; l < config_.layers; ++l) {
            const std::string where = "domain " + domain_ + " layer " + std::to_string(l + 1);
            auto [umu, uvar] = vbge_layer(adj.forward, adj.transpose, item_in,
                                          user_layers_[static_cast<std::size_t>(l)], where + " (users)");
            auto [imu, ivar] = vbge_layer(adj.transpose, adj.forward, user_in,
                                          item_layers_[static_cast<std::size_t>(l)], where + " (items)");
            users.means.push_back(umu);
            users.variances.push_back(uvar);
            items.means.push_back(imu);
            items.variances.push_back(ivar);
            user_in = umu;
            item_in = imu;
        }
        return {std::move(users), std::move(items)};
    }

    /// Keys "domain/{x|y}/{user|item}/layer{l}/{mu|sigma}" plus the two
    /// embedding tables "domain/{x|y}/{user|item}/embedding".
    [[nodiscard]] std::vector<std::pair<std::string, Var>> named_params() const {
        const std::string base = "domain/" + domain_ + "/";
        std::vector<std::pair<std::string, Var>> out;
        out.emplace_back(base + "user/embedding", user_embedding_);
        out.emplace_back(base + "item/embedding", item_embedding_);
        for (int l = 0; l < config_.layers; ++l) {
            const auto tag = "/layer" + std::to_string(l + 1) + "/";
            out.emplace_back(base + "user" + tag + "mu", user_layers_[static_cast<std::size_t>(l)].w_mu);
            out.emplace_back(base + "user" + tag + "sigma", user_layers_[static_cast<std::size_t>(l)].w_sigma);
            out.emplace_back(base + "item" + tag + "mu", item_layers_[static_cast<std::size_t>(l)].w_mu);
            out.emplace_back(base + "item" + tag + "sigma", item_layers_[static_cast<std::size_t>(l)].w_sigma);
        }
        return out;
    }

private:
    std::string domain_;
    EncoderConfig config_;
    Var user_embedding_;
    Var item_embedding_;
    std::vector<LayerParams> user_layers_;
    std::vector<LayerParams> item_layers_;
};

}  // namespace cider::encoder
