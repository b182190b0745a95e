#include <cmath>
#include <numbers>
#include <numeric>

#include <gtest/gtest.h>

#include "cider/deep.hpp"
#include "test_util.hpp"

namespace cider::deep {
namespace {

using flow::FlowConfig;
using flow::FlowKind;
using flow::FlowTransform;

void set(Var v, const Matrix& m) { v.mutable_value() = m; }

FlowTransform identity_flow(int width, FlowKind kind = FlowKind::ncsf) {
    FlowConfig c;
    c.kind = kind;
    c.init_scale = 0.0;
    return FlowTransform(width, c, 3);
}

FlowTransform random_flow(int width, FlowKind kind, std::uint64_t seed) {
    FlowConfig c;
    c.kind = kind;
    c.init_scale = 0.3;
    c.ode_steps = 16;
    return FlowTransform(width, c, seed);
}

TEST(Decompose, ZeroInputThroughActivations) {
    const DecompositionHeads heads(4, 1);
    const auto r = decompose(Var(Matrix::Zero(3, 4)), Var(Matrix::Zero(2, 4)), heads, 0);
    EXPECT_EQ(r.stable_x.value().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(r.variant_x.value(), Matrix::Constant(3, 4, 0.5));
    EXPECT_EQ(r.variant_y.value(), Matrix::Constant(2, 4, 0.5));
}

TEST(Decompose, IdentityWeightsOnUnitInput) {
    const DecompositionHeads heads(1, 1);
    for (const auto& h : {heads.x(), heads.y()}) {
        set(h.w_stable, Matrix::Identity(1, 1));
        set(h.w_variant, Matrix::Identity(1, 1));
    }
    const auto r = decompose(Var(Matrix::Ones(1, 1)), Var(Matrix::Ones(1, 1)), heads, 1);
    EXPECT_DOUBLE_EQ(r.stable_x.item(), 1.0);
    EXPECT_NEAR(r.variant_x.item(), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(r.variant_x.item(), 0.7311, 1e-4);
}

TEST(Decompose, PairedRowsShareAveragedStableHead) {
    Rng rng(2);
    const DecompositionHeads heads(3, 4);
    const Matrix dx = rng.normal_matrix(4, 3, 1.0);
    const Matrix dy = rng.normal_matrix(5, 3, 1.0);
    const auto r = decompose(Var(dx), Var(dy), heads, 2);
    auto elu = [](const Matrix& m) { return m.unaryExpr([](double v) { return v > 0 ? v : std::expm1(v); }).eval(); };
    const Matrix hx = elu(dx * heads.x().w_stable.value());
    const Matrix hy = elu(dy * heads.y().w_stable.value());
    for (int i = 0; i < 2; ++i) {
        const Eigen::RowVectorXd fused = 0.5 * (hx.row(i) + hy.row(i));
        EXPECT_LT((r.stable_x.value().row(i) - fused).cwiseAbs().maxCoeff(), 1e-14);
        EXPECT_LT((r.stable_y.value().row(i) - fused).cwiseAbs().maxCoeff(), 1e-14);
    }
    EXPECT_LT((r.stable_x.value().bottomRows(2) - hx.bottomRows(2)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((r.stable_y.value().bottomRows(3) - hy.bottomRows(3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Decompose, VariantLatentsStayInOpenUnitInterval) {
    Rng rng(7);
    const DecompositionHeads heads(6, 9);
    for (int k = 0; k < 20; ++k) {
        const auto r = decompose(Var(rng.normal_matrix(10, 6, 3.0)), Var(rng.normal_matrix(10, 6, 3.0)), heads, 10);
        EXPECT_GT(r.variant_x.value().minCoeff(), 0.0);
        EXPECT_LT(r.variant_x.value().maxCoeff(), 1.0);
        EXPECT_GT(r.variant_y.value().minCoeff(), 0.0);
        EXPECT_LT(r.variant_y.value().maxCoeff(), 1.0);
    }
}

TEST(Decompose, ContractErrors) {
    const DecompositionHeads heads(3, 1);
    EXPECT_THROW((void)decompose(Var(Matrix::Zero(2, 4)), Var(Matrix::Zero(2, 3)), heads, 0), ContractError);
    EXPECT_THROW((void)decompose(Var(Matrix::Zero(2, 3)), Var(Matrix::Zero(1, 3)), heads, 2), ContractError);
}

TEST(Decompose, NonFiniteInputIsNumericError) {
    const DecompositionHeads heads(2, 1);
    Matrix d = Matrix::Zero(2, 2);
    d(1, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW((void)decompose(Var(d), Var(Matrix::Zero(2, 2)), heads, 0), NumericError);
}

TEST(FlowNll, IdentityFlowZeroResidualGivesFloor) {
    const auto flow = identity_flow(3);
    Rng rng(1);
    const Matrix z = (rng.normal_matrix(8, 3, 1.0).array().abs() * 0.3).matrix();
    const double s = 0.1;
    const double floor = 3.0 * std::log(s * std::sqrt(2.0 * std::numbers::pi));
    EXPECT_NEAR(flow_nll(flow, Var(z), Var(z), s).item(), floor, 1e-12);
}

TEST(FlowNll, IncreasesWithResidualNorm) {
    const auto flow = random_flow(2, FlowKind::ncsf, 5);
    Rng rng(3);
    const Matrix z = rng.normal_matrix(6, 2, 0.5);
    const Matrix target = flow.forward_values(z).output;
    const Matrix dir = rng.normal_matrix(6, 2, 1.0);
    double prev = -1e300;
    for (double t = 0.0; t <= 2.0; t += 0.25) {
        const double v = flow_nll(flow, Var(z), Var(Matrix(target + t * dir)), 0.1).item();
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(FlowNll, DoublingAffineContributesMinusMLn2) {
    const auto flow = testing_util::doubling_flow(3);
    Matrix z(2, 3);
    z << 0.1, 0.2, 0.3, 0.5, 0.6, 0.7;
    const Matrix fz = 2.0 * z.array() + 1.0;
    const double floor = 3.0 * std::log(0.1 * std::sqrt(2.0 * std::numbers::pi));
    EXPECT_NEAR(flow_nll(flow, Var(z), Var(fz), 0.1).item(), floor - 3.0 * std::log(2.0), 1e-12);
}

TEST(FlowNll, StandardNormalTarget) {
    const auto flow = identity_flow(2);
    Matrix z(1, 2);
    z << 0.3, -0.4;
    const double expected = 0.5 * 0.25 + std::log(2.0 * std::numbers::pi);
    EXPECT_NEAR(flow_nll(flow, Var(z), Var(z), 0.1, FlowTarget::standard_normal).item(), expected, 1e-14);
    EXPECT_EQ(parse_flow_target("standard_normal"), FlowTarget::standard_normal);
    EXPECT_THROW((void)parse_flow_target("laplace"), ConfigError);
}

TEST(FlowNll, GradientsMatchFiniteDifferences) {
    for (auto kind : {FlowKind::maf, FlowKind::naf, FlowKind::node, FlowKind::ncsf}) {
        const auto flow = random_flow(2, kind, 8);
        Rng rng(4);
        Var zx(rng.normal_matrix(3, 2, 0.4), true);
        Var zy(rng.normal_matrix(3, 2, 0.4), true);
        auto params = flow.params();
        params.push_back(zx);
        params.push_back(zy);
        testing_util::expect_gradients_match(params, [&] { return flow_nll(flow, zx, zy, 0.5); }, 1e-5, 1e-4);
    }
}

TEST(FlowNll, RejectsUnpairedBatches) {
    const auto flow = identity_flow(2);
    EXPECT_THROW((void)flow_nll(flow, Var(Matrix::Zero(2, 2)), Var(Matrix::Zero(3, 2)), 0.1), ContractError);
    EXPECT_THROW((void)flow_nll(flow, Var(Matrix::Zero(2, 2)), Var(Matrix::Zero(2, 2)), 0.0), ConfigError);
}

TEST(Reparameterize, EvaluationModeIsExactlyStable) {
    Rng rng(1);
    const Matrix s = rng.normal_matrix(4, 3, 1.0);
    const Matrix v = Matrix::Constant(4, 3, 0.5);
    EXPECT_EQ(reparameterize(Var(s), Var(v), nullptr).value(), s);
}

TEST(Reparameterize, VanishingScaleReturnsStable) {
    Rng rng(1);
    Rng noise(2);
    const Matrix s = rng.normal_matrix(4, 3, 1.0);
    const Matrix v = Matrix::Constant(4, 3, 1e-12);
    EXPECT_LT((reparameterize(Var(s), Var(v), &noise).value() - s).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Reparameterize, MonteCarloVarianceMatchesSquaredScale) {
    Matrix s(1, 3);
    s << 0.2, -1.0, 0.0;
    Matrix v(1, 3);
    v << 0.1, 0.5, 0.9;
    Rng noise(11);
    const int draws = 100000;
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(3);
    Eigen::ArrayXd sq = Eigen::ArrayXd::Zero(3);
    for (int k = 0; k < draws; ++k) {
        const Eigen::ArrayXd d = (reparameterize(Var(s), Var(v), &noise).value() - s).row(0).transpose().array();
        sum += d;
        sq += d.square();
    }
    const Eigen::ArrayXd mean = sum / draws;
    const Eigen::ArrayXd var = (sq - draws * mean.square()) / (draws - 1);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(var(j) / (v(0, j) * v(0, j)), 1.0, 0.03) << j;
}

TEST(Reparameterize, GradientFlowsToBothLatents) {
    Rng rng(5);
    Var s(rng.normal_matrix(2, 2, 1.0), true);
    Var v(Matrix::Constant(2, 2, 0.4), true);
    const Matrix fixed = rng.normal_matrix(2, 2, 1.0);
    auto loss = [&] {
        Rng noise(9);
        return ad::sum(ad::mul(reparameterize(s, v, &noise), Var(fixed)));
    };
    testing_util::expect_gradients_match({s, v}, loss, 1e-6, 1e-6);
}

TEST(CrossDomainInfer, IdentityFlowEvaluationMode) {
    const auto flow = identity_flow(3);
    Rng rng(1);
    const Matrix zs = rng.normal_matrix(5, 3, 1.0);
    const Matrix zv = (rng.normal_matrix(5, 3, 1.0).array().abs() * 0.2).matrix();
    const Matrix dx = reparameterize(Var(zs), Var(zv), nullptr).value();
    EXPECT_EQ(cross_domain_infer(flow, zs, zv, InferDirection::x_to_y, nullptr), dx);
}

TEST(CrossDomainInfer, IdentityFlowNoiseMatchesSourceReparameterization) {
    const auto flow = identity_flow(2);
    Rng rng(1);
    const Matrix zs = rng.normal_matrix(3, 2, 1.0);
    const Matrix zv = Matrix::Constant(3, 2, 0.3);
    Rng a(4);
    Rng b(4);
    const Matrix inferred = cross_domain_infer(flow, zs, zv, InferDirection::x_to_y, &a);
    const Matrix direct = reparameterize(Var(zs), Var(zv), &b).value();
    EXPECT_LT((inferred - direct).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CrossDomainInfer, RoundTripRecoversSourceReconstruction) {
    for (auto kind : {FlowKind::maf, FlowKind::naf, FlowKind::node, FlowKind::ncsf}) {
        const auto flow = random_flow(3, kind, 12);
        Rng rng(2);
        const Matrix zs = rng.normal_matrix(50, 3, 1.0);
        const Matrix zv = (rng.normal_matrix(50, 3, 1.0).array().abs() * 0.3).matrix();
        const Matrix zv_y = flow.forward_values(zv).output;
        Rng a(7);
        Rng b(7);
        const Matrix back = cross_domain_infer(flow, zs, zv_y, InferDirection::y_to_x, &a);
        const Matrix dx = reparameterize(Var(zs), Var(zv), &b).value();
        EXPECT_LT((back - dx).cwiseAbs().maxCoeff(), 1e-3) << flow::to_string(kind);
    }
}

TEST(ChangeOfVariables, PushforwardDensityIntegratesToOne) {
    for (auto kind : {FlowKind::maf, FlowKind::naf, FlowKind::node, FlowKind::ncsf}) {
        const auto flow = random_flow(2, kind, 31);
        EXPECT_NEAR(testing_util::pushforward_mass(flow, 10.0, 400), 1.0, 0.01) << flow::to_string(kind);
    }
}

TEST(Mmd, ZeroForIdenticalSamplesAndPositiveForShift) {
    Rng rng(3);
    const Matrix a = rng.normal_matrix(100, 2, 1.0);
    EXPECT_NEAR(mmd_rbf(a, a), 0.0, 1e-12);
    const Matrix b = (a.array() + 2.0).matrix();
    EXPECT_GT(mmd_rbf(a, b), 0.3);
    const Matrix c = rng.normal_matrix(100, 2, 1.0);
    EXPECT_LT(mmd_rbf(a, c), 0.05);
}

TEST(Mmd, MatchesBruteForceOracle) {
    Rng rng(6);
    const Matrix a = rng.normal_matrix(7, 3, 1.0);
    const Matrix b = rng.normal_matrix(5, 3, 1.0);
    const double s2 = 1.7;
    auto k = [s2](const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q) {
        return std::exp(-(p - q).squaredNorm() / (2.0 * s2));
    };
    double aa = 0.0;
    double bb = 0.0;
    double ab = 0.0;
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) aa += k(a.row(i), a.row(j));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) bb += k(b.row(i), b.row(j));
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 5; ++j) ab += k(a.row(i), b.row(j));
    EXPECT_NEAR(mmd_rbf(a, b, s2), aa / 49.0 + bb / 25.0 - 2.0 * ab / 35.0, 1e-13);
}

TEST(Mmd, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    Var a(rng.normal_matrix(4, 2, 1.0), true);
    Var b(rng.normal_matrix(3, 2, 1.0), true);
    testing_util::expect_gradients_match({a, b}, [&] { return mmd_rbf(a, b, 0.8); }, 1e-6, 1e-5);
}

/// Fits F by minimizing flow_nll on fixed pairs.
void fit(const FlowTransform& flow, const Matrix& zx, const Matrix& zy, int steps) {
    ad::Adam opt(flow.params(), {.learning_rate = 1e-2});
    for (int s = 0; s < steps; ++s) {
        opt.zero_grad();
        ad::backward(flow_nll(flow, Var(zx), Var(zy), 0.1));
        opt.step();
    }
}

TEST(Identifiability, IndependentlyFittedFlowsAgreeOnPushforward) {
    // Paired latents with a smooth invertible relation plus small noise.
    Rng rng(21);
    const int n = 300;
    Matrix zx(n, 2);
    Matrix zy(n, 2);
    for (int i = 0; i < n; ++i) {
        const double a = 0.15 + 0.7 * rng.uniform();
        const double b = 0.15 + 0.7 * rng.uniform();
        zx(i, 0) = a;
        zx(i, 1) = b;
        zy(i, 0) = 0.8 * a * a + 0.1 + 0.02 * rng.normal();
        zy(i, 1) = 0.5 * b + 0.3 * a + 0.02 * rng.normal();
    }
    FlowConfig c;
    c.kind = FlowKind::ncsf;
    c.init_scale = 0.1;
    const FlowTransform f1(2, c, 100);
    const FlowTransform f2(2, c, 200);
    fit(f1, zx, zy, 600);
    fit(f2, zx, zy, 600);
    const Matrix p1 = f1.forward_values(zx).output;
    const Matrix p2 = f2.forward_values(zx).output;
    EXPECT_LT(mmd_rbf(p1, p2), 0.05);
    EXPECT_LT(mmd_rbf(p1, zy), 0.05);
}

}  // namespace
}  // namespace cider::deep
