#include <cmath>

#include <gtest/gtest.h>

#include "cider/encoder.hpp"
#include "test_util.hpp"

namespace cider::encoder {
namespace {

data::NormalizedAdjacency path_graph() {
    // users 0..4, items 0..3
    return data::build_adjacency(5, 4, {{0, 0}, {0, 1}, {1, 1}, {2, 2}, {3, 2}, {3, 3}, {4, 0}, {4, 3}});
}

TEST(EncoderConfig, RejectsBadDepths) {
    EXPECT_THROW((EncoderConfig{1, 1, 4}.validate()), ConfigError);
    EXPECT_THROW((EncoderConfig{3, 3, 4}.validate()), ConfigError);
    EXPECT_THROW((EncoderConfig{3, 0, 4}.validate()), ConfigError);
    EXPECT_THROW((EncoderConfig{3, 2, 0}.validate()), ConfigError);
    EXPECT_NO_THROW((EncoderConfig{2, 1, 4}.validate()));
}

TEST(InitEmbeddings, DeterministicAndShaped) {
    const auto a = init_embeddings(7, 5, 64, 42);
    const auto b = init_embeddings(7, 5, 64, 42);
    const auto c = init_embeddings(7, 5, 64, 43);
    EXPECT_EQ(a.first.rows(), 7);
    EXPECT_EQ(a.second.rows(), 5);
    EXPECT_EQ(a.first.cols(), 64);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_NE(a.first, c.first);
}

TEST(InitEmbeddings, MomentsMatchInitialisationLaw) {
    const auto [u, i] = init_embeddings(1000, 10, 100, 1);
    const double n = static_cast<double>(u.size());
    const double mean = u.mean();
    const double var = (u.array() - mean).square().sum() / (n - 1);
    EXPECT_LT(std::abs(mean), 3.0 * kEmbeddingInitStd / std::sqrt(n));
    EXPECT_NEAR(std::sqrt(var), kEmbeddingInitStd, 3.0 * kEmbeddingInitStd / std::sqrt(2.0 * n));
}

TEST(InitEmbeddings, RejectsEmptyShapes) { EXPECT_THROW((void)init_embeddings(0, 3, 4, 1), ConfigError); }

TEST(DomainEncoder, ZeroAdjacencyGivesElu0AndSoftplus0) {
    const auto adj = data::build_adjacency(3, 2, {});
    DomainEncoder enc("x", 3, 2, {3, 2, 8}, 5);
    const auto [users, items] = enc.encode(adj);
    for (int l = 0; l < 3; ++l) {
        EXPECT_EQ(users.means[static_cast<std::size_t>(l)].value().cwiseAbs().maxCoeff(), 0.0);
        EXPECT_NEAR(users.variances[static_cast<std::size_t>(l)].value().maxCoeff(), std::log(2.0) + 1e-6, 1e-15);
        EXPECT_NEAR(items.variances[static_cast<std::size_t>(l)].value().minCoeff(), std::log(2.0) + 1e-6, 1e-15);
    }
}

TEST(DomainEncoder, SingleEdgeMatchesHandComputation) {
    // One user, one item, one edge: normalized weight is 1, so the user's
    // first layer is ELU(e_item W_mu) and softplus(e_item W_sigma) + 1e-6.
    const auto adj = data::build_adjacency(1, 1, {{0, 0}});
    DomainEncoder enc("x", 1, 1, {2, 1, 3}, 9);
    const auto [users, items] = enc.encode(adj);
    const Matrix e_item = enc.item_embedding().value();
    const Matrix wm = enc.user_layers()[0].w_mu.value();
    const Matrix ws = enc.user_layers()[0].w_sigma.value();
    for (int j = 0; j < 3; ++j) {
        double zm = 0.0;
        double zs = 0.0;
        for (int k = 0; k < 3; ++k) {
            zm += e_item(0, k) * wm(k, j);
            zs += e_item(0, k) * ws(k, j);
        }
        const double mu = zm > 0 ? zm : std::exp(zm) - 1.0;
        const double var = std::log1p(std::exp(zs)) + 1e-6;
        EXPECT_NEAR(users.means[0].value()(0, j), mu, 1e-14);
        EXPECT_NEAR(users.variances[0].value()(0, j), var, 1e-14);
    }
}

TEST(DomainEncoder, VariancesRespectFloorUnderLargeWeights) {
    DomainEncoder enc("y", 5, 4, {3, 1, 6}, 2);
    for (const auto& layer : enc.user_layers()) layer.w_sigma.node()->value *= -500.0;
    for (const auto& layer : enc.item_layers()) layer.w_sigma.node()->value *= -500.0;
    const auto [users, items] = enc.encode(path_graph());
    for (int l = 0; l < 3; ++l) {
        EXPECT_GE(users.variances[static_cast<std::size_t>(l)].value().minCoeff(), kVarianceFloor);
        EXPECT_GE(items.variances[static_cast<std::size_t>(l)].value().minCoeff(), kVarianceFloor);
    }
}

TEST(DomainEncoder, ShallowDeepSlicing) {
    DomainEncoder enc("x", 5, 4, {3, 2, 4}, 1);
    const auto [users, items] = enc.encode(path_graph());
    const SplitRepresentation split{users, 2};
    EXPECT_EQ(split.shallow_mean().cols(), 8);
    EXPECT_EQ(split.deep_mean().cols(), 4);
    EXPECT_EQ(split.full_mean().cols(), 12);
    EXPECT_EQ(split.deep_mean().value(), users.means[2].value());
    EXPECT_EQ(split.shallow_variance().value().rightCols(4), users.variances[1].value());
    const SplitRepresentation two{enc.encode(path_graph()).first, 1};
    EXPECT_EQ(two.shallow_mean().cols(), 4);
    EXPECT_THROW((void)users.block_mean(2, 2), ContractError);
}

TEST(DomainEncoder, PermutationEquivariance) {
    const std::vector<data::Interaction> edges{{0, 0}, {0, 1}, {1, 1}, {2, 2}, {3, 2}, {3, 3}, {4, 0}, {4, 3}};
    const std::vector<int> perm{3, 0, 4, 1, 2};  // new index of old user u is perm[u]
    std::vector<data::Interaction> permuted;
    for (const auto& e : edges) permuted.push_back({perm[static_cast<std::size_t>(e.user)], e.item});
    DomainEncoder a("x", 5, 4, {3, 2, 4}, 11);
    DomainEncoder b("x", 5, 4, {3, 2, 4}, 11);
    for (int u = 0; u < 5; ++u) {
        b.user_embedding().node()->value.row(perm[static_cast<std::size_t>(u)]) = a.user_embedding().value().row(u);
    }
    const auto ra = a.encode(data::build_adjacency(5, 4, edges));
    const auto rb = b.encode(data::build_adjacency(5, 4, permuted));
    for (int l = 0; l < 3; ++l) {
        const auto ls = static_cast<std::size_t>(l);
        for (int u = 0; u < 5; ++u) {
            const int pu = perm[static_cast<std::size_t>(u)];
            EXPECT_LT((ra.first.means[ls].value().row(u) - rb.first.means[ls].value().row(pu)).cwiseAbs().maxCoeff(),
                      1e-10);
            EXPECT_LT((ra.first.variances[ls].value().row(u) - rb.first.variances[ls].value().row(pu))
                          .cwiseAbs()
                          .maxCoeff(),
                      1e-10);
        }
        EXPECT_LT((ra.second.means[ls].value() - rb.second.means[ls].value()).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(DomainEncoder, GradientsMatchFiniteDifferences) {
    DomainEncoder enc("x", 5, 4, {3, 2, 3}, 4);
    const auto adj = path_graph();
    std::vector<ad::Var> params;
    for (const auto& [name, p] : enc.named_params()) params.push_back(p);
    auto loss = [&] {
        const auto [users, items] = enc.encode(adj);
        const SplitRepresentation su{users, 2};
        const SplitRepresentation si{items, 2};
        return ad::sum(ad::mul(su.full_mean(), su.full_mean())) + ad::sum(ad::log(si.deep_variance()));
    };
    testing_util::expect_gradients_match(params, loss, 1e-6, 1e-4);
}

TEST(DomainEncoder, CheckpointKeys) {
    DomainEncoder enc("y", 5, 4, {2, 1, 3}, 4);
    std::vector<std::string> names;
    for (const auto& [name, p] : enc.named_params()) names.push_back(name);
    EXPECT_NE(std::find(names.begin(), names.end(), "domain/y/user/layer1/mu"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "domain/y/item/layer2/sigma"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "domain/y/user/embedding"), names.end());
    EXPECT_EQ(names.size(), 2u + 2u * 2u * 2u);
}

TEST(DomainEncoder, AdjacencyShapeMismatch) {
    DomainEncoder enc("x", 5, 4, {2, 1, 3}, 4);
    EXPECT_THROW((void)enc.encode(data::build_adjacency(4, 4, {})), ContractError);
}

}  // namespace
}  // namespace cider::encoder
