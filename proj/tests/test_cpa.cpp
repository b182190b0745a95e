#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "cider/cpa.hpp"
#include "test_util.hpp"

namespace cider::cpa {
namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

Matrix row(std::initializer_list<double> v) { return vec(v).transpose(); }

TEST(KlDiagGaussian, ClosedFormCases) {
    EXPECT_DOUBLE_EQ(kl_diag_gaussian(vec({0, 0}), vec({1, 1}), vec({0, 0}), vec({1, 1})), 0.0);
    EXPECT_NEAR(kl_diag_gaussian(vec({0}), vec({1}), vec({1}), vec({1})), 0.5, 1e-15);
    EXPECT_NEAR(kl_diag_gaussian(vec({0}), vec({4}), vec({0}), vec({1})), 0.5 * (std::log(0.25) + 3.0), 1e-15);
    EXPECT_NEAR(kl_diag_gaussian(vec({0}), vec({4}), vec({0}), vec({1})), 0.8069, 1e-4);
}

double kl_monte_carlo(const Eigen::VectorXd& mq, const Eigen::VectorXd& vq, const Eigen::VectorXd& mp,
                      const Eigen::VectorXd& vp, int samples, Rng& rng) {
    double sum = 0.0;
    for (int n = 0; n < samples; ++n) {
        double log_ratio = 0.0;
        for (Eigen::Index k = 0; k < mq.size(); ++k) {
            const double z = mq(k) + std::sqrt(vq(k)) * rng.normal();
            log_ratio += -0.5 * std::log(vq(k)) - 0.5 * (z - mq(k)) * (z - mq(k)) / vq(k) + 0.5 * std::log(vp(k)) +
                         0.5 * (z - mp(k)) * (z - mp(k)) / vp(k);
        }
        sum += log_ratio;
    }
    return sum / samples;
}

TEST(KlDiagGaussian, AgreesWithMonteCarloInSeveralDimensions) {
    Rng rng(17);
    Rng sampler(18);
    for (int k = 0; k < 20; ++k) {
        const auto width = static_cast<Eigen::Index>(2 + rng.below(7));
        Eigen::VectorXd mq(width), vq(width), mp(width), vp(width);
        for (Eigen::Index j = 0; j < width; ++j) {
            mq(j) = rng.normal();
            mp(j) = rng.normal();
            vq(j) = 0.5 + rng.uniform();
            vp(j) = 0.5 + rng.uniform();
        }
        const double exact = kl_diag_gaussian(mq, vq, mp, vp);
        const double mc = kl_monte_carlo(mq, vq, mp, vp, 100000, sampler);
        EXPECT_NEAR(mc, exact, 0.01 * exact) << "pair " << k << " width " << width;
    }
}

TEST(KlDiagGaussian, AgreesWithQuadratureOracle) {
    EXPECT_NEAR(testing_util::kl_by_quadrature_1d(0, 1, 1, 1), 0.5, 1e-9);
    EXPECT_NEAR(testing_util::kl_by_quadrature_1d(0, 4, 0, 1), 0.5 * (std::log(0.25) + 3.0), 1e-9);
    Rng rng(3);
    for (int k = 0; k < 20; ++k) {
        const double mq = rng.normal();
        const double mp = rng.normal();
        const double vq = 0.2 + 2.0 * rng.uniform();
        const double vp = 0.2 + 2.0 * rng.uniform();
        const double oracle = testing_util::kl_by_quadrature_1d(mq, vq, mp, vp);
        EXPECT_NEAR(kl_diag_gaussian(vec({mq}), vec({vq}), vec({mp}), vec({vp})), oracle,
                    1e-8 + 1e-8 * oracle);
    }
}

TEST(KlDiagGaussian, WidthMismatchIsContractError) {
    EXPECT_THROW((void)kl_diag_gaussian(vec({0, 1}), vec({1, 1}), vec({0}), vec({1})), ContractError);
}

TEST(KlToCentroids, MatchesScalarClosedForm) {
    Rng rng(5);
    const Matrix um = rng.normal_matrix(4, 3, 1.0);
    const Matrix uv = (rng.normal_matrix(4, 3, 0.3).array().exp()).matrix();
    const Matrix cm = rng.normal_matrix(2, 3, 1.0);
    const Matrix cv = (rng.normal_matrix(2, 3, 0.3).array().exp()).matrix();
    const auto c = CentroidSet::make(cm, cv);
    const Matrix kl = kl_to_centroids(Var(um), Var(uv), c).value();
    for (int i = 0; i < 4; ++i) {
        for (int t = 0; t < 2; ++t) {
            EXPECT_NEAR(kl(i, t),
                        kl_diag_gaussian(um.row(i).transpose(), uv.row(i).transpose(), cm.row(t).transpose(),
                                         cv.row(t).transpose()),
                        1e-12);
        }
    }
}

TEST(SoftAssign, UniformWhenKlsEqual) {
    const Var kl(Matrix::Constant(3, 4, 0.7));
    const auto r = soft_assign(kl, Eigen::VectorXd::Constant(4, 0.25), 3.0).value();
    EXPECT_LT((r.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(SoftAssign, HandEvaluatedSoftmax) {
    const auto r = soft_assign(Var(row({0.0, std::log(2.0)})), Eigen::VectorXd::Constant(2, 0.5), 1.0).value();
    EXPECT_NEAR(r(0, 0), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(r(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(SoftAssign, LargeTemperatureSelectsArgmin) {
    const auto r = soft_assign(Var(row({0.9, 0.3, 1.4})), Eigen::VectorXd::Constant(3, 1.0 / 3), 50.0).value();
    EXPECT_NEAR(r(0, 1), 1.0, 1e-6);
}

TEST(SoftAssign, RowsSumToOneAcrossTemperatures) {
    Rng rng(8);
    for (double alpha : {1e-3, 1e-1, 1.0, 3.0, 1e2, 1e3}) {
        const Matrix kl = (rng.normal_matrix(50, 7, 30.0).array().abs()).matrix();
        const auto r = soft_assign(Var(kl), Eigen::VectorXd::Constant(7, 1.0 / 7), alpha).value();
        EXPECT_LT((r.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6) << alpha;
        EXPECT_TRUE(r.allFinite());
    }
}

TEST(SoftAssign, EntropyNonIncreasingInTemperature) {
    Rng rng(9);
    const Matrix kl = (rng.normal_matrix(20, 5, 1.0).array().abs()).matrix();
    auto entropy = [&](double alpha) {
        const auto r = soft_assign(Var(kl), Eigen::VectorXd::Constant(5, 0.2), alpha).value();
        return -(r.array() * (r.array() + 1e-300).log()).sum();
    };
    double prev = entropy(1e-3);
    for (double alpha = 2e-3; alpha < 1e3; alpha *= 1.5) {
        const double h = entropy(alpha);
        EXPECT_LE(h, prev + 1e-12);
        prev = h;
    }
}

TEST(SoftAssign, RejectsNonPositiveTemperature) {
    EXPECT_THROW((void)soft_assign(Var(row({0.0})), vec({1.0}), 0.0), ContractError);
}

TEST(MatchingScore, ZeroWhenPosteriorIsTheCentroid) {
    const auto c = CentroidSet::make(row({0.3, -1.0}), row({0.5, 2.0}));
    const auto s = matching_score(Var(row({0.3, -1.0})), Var(row({0.5, 2.0})), c, 3.0);
    EXPECT_NEAR(s.loss.item(), 0.0, 1e-15);
}

TEST(MatchingScore, TwoByTwoTableOracle) {
    // 1-D users and centroids; KL table and responsibilities by hand.
    const double um[2] = {0.0, 2.0};
    const double uv[2] = {1.0, 0.5};
    const double cm[2] = {0.0, 1.5};
    const double cv[2] = {1.0, 2.0};
    const double alpha = 2.0;
    double expected = 0.0;
    for (int i = 0; i < 2; ++i) {
        double kl[2];
        for (int t = 0; t < 2; ++t) {
            kl[t] = 0.5 * (std::log(cv[t] / uv[i]) + (uv[i] + (um[i] - cm[t]) * (um[i] - cm[t])) / cv[t] - 1.0);
        }
        const double w0 = 0.5 * std::exp(-alpha * kl[0]);
        const double w1 = 0.5 * std::exp(-alpha * kl[1]);
        expected += (w0 * kl[0] + w1 * kl[1]) / (w0 + w1);
    }
    Matrix m(2, 1);
    m << 0.0, 2.0;
    Matrix v(2, 1);
    v << 1.0, 0.5;
    Matrix c_m(2, 1);
    c_m << 0.0, 1.5;
    Matrix c_v(2, 1);
    c_v << 1.0, 2.0;
    const auto s = matching_score(Var(m), Var(v), CentroidSet::make(c_m, c_v), alpha);
    EXPECT_NEAR(s.loss.item(), expected, 1e-13);
}

TEST(MatchingScore, TemperatureIrrelevantWhenKlsEqual) {
    // Two centroids symmetric around the user give equal KLs.
    Matrix c_m(2, 1);
    c_m << -1.0, 1.0;
    const auto c = CentroidSet::make(c_m, Matrix::Ones(2, 1));
    const auto a = matching_score(Var(Matrix::Zero(1, 1)), Var(Matrix::Ones(1, 1)), c, 1.0);
    const auto b = matching_score(Var(Matrix::Zero(1, 1)), Var(Matrix::Ones(1, 1)), c, 100.0);
    EXPECT_NEAR(a.expected.item(), b.expected.item(), 1e-15);
}

TEST(MatchingScore, ZeroIffEveryUserSitsOnItsCentroid) {
    Matrix c_m(2, 1);
    c_m << -3.0, 3.0;
    const auto c = CentroidSet::make(c_m, Matrix::Constant(2, 1, 0.1));
    Matrix on(2, 1);
    on << -3.0, 3.0;
    // Responsibility of the matching centroid is 1 only in the large-alpha limit.
    EXPECT_NEAR(matching_score(Var(on), Var(Matrix::Constant(2, 1, 0.1)), c, 50.0).loss.item(), 0.0, 1e-12);
    Matrix off(2, 1);
    off << -2.0, 3.0;
    EXPECT_GT(matching_score(Var(off), Var(Matrix::Constant(2, 1, 0.1)), c, 50.0).loss.item(), 0.1);
}

TEST(UpdateCentroids, ZeroGradientIsFixedPoint) {
    auto c = CentroidSet::make(row({1.0, 2.0}), row({0.5, 0.7}));
    const Matrix mean = c.mean.value();
    const Matrix lv = c.log_var.value();
    ad::backward(ad::scale(ad::sum(c.mean) + ad::sum(c.log_var), 0.0));
    ASSERT_TRUE(update_centroids(c, 0.1));
    EXPECT_EQ(c.mean.value(), mean);
    EXPECT_EQ(c.log_var.value(), lv);
}

TEST(UpdateCentroids, OneStepDescendsTowardUser) {
    auto c = CentroidSet::make(row({0.0, 0.0}), row({1.0, 1.0}));
    const Var um(row({1.0, -0.5}));
    const Var uv(row({0.5, 0.5}));
    const auto before = matching_score(um, uv, c, 3.0);
    ad::backward(before.loss);
    const Matrix resp = before.responsibilities.value();
    ASSERT_TRUE(update_centroids(c, 1e-2, &resp));
    EXPECT_GT(c.mean.value()(0, 0), 0.0);
    EXPECT_LT(c.mean.value()(0, 1), 0.0);
    const auto after = matching_score(um, uv, c, 3.0);
    EXPECT_LT(after.loss.item(), before.loss.item());
    EXPECT_NEAR(c.prior.sum(), 1.0, 1e-12);
}

TEST(UpdateCentroids, PriorsRenormalisedFromResponsibilities) {
    auto c = CentroidSet::make(Matrix::Zero(3, 1), Matrix::Ones(3, 1));
    Matrix resp(2, 3);
    resp << 0.5, 0.5, 0.0, 1.0, 0.0, 0.0;
    ad::backward(ad::scale(ad::sum(c.mean), 0.0));
    ASSERT_TRUE(update_centroids(c, 0.1, &resp));
    EXPECT_NEAR(c.prior.sum(), 1.0, 1e-8);
    EXPECT_NEAR(c.prior(0), 0.75, 1e-7);
    EXPECT_GT(c.prior(2), 0.0);
}

TEST(UpdateCentroids, NonFiniteGradientSkipsWithWarning) {
    std::vector<std::string> warnings;
    ScopedWarningSink sink([&](const std::string& m) { warnings.push_back(m); });
    auto c = CentroidSet::make(row({1.0}), row({1.0}));
    ad::backward(ad::sum(ad::log(ad::scale(c.mean, 0.0))));
    EXPECT_FALSE(update_centroids(c, 0.1));
    EXPECT_EQ(c.mean.value()(0, 0), 1.0);
    EXPECT_EQ(warnings.size(), 1u);
}

TEST(CentroidAlignment, IdenticalSetsGiveZero) {
    Rng rng(1);
    const Matrix m = rng.normal_matrix(3, 4, 1.0);
    const Matrix v = Matrix::Constant(3, 4, 0.3);
    EXPECT_NEAR(centroid_alignment_loss(CentroidSet::make(m, v), CentroidSet::make(m, v)).item(), 0.0, 1e-14);
}

TEST(CentroidAlignment, OneDimensionalPairsMatchQuadrature) {
    Matrix mx(2, 1);
    mx << 0.0, 1.0;
    Matrix vx(2, 1);
    vx << 1.0, 0.5;
    Matrix my(2, 1);
    my << 0.5, -1.0;
    Matrix vy(2, 1);
    vy << 2.0, 1.5;
    const double oracle =
        testing_util::kl_by_quadrature_1d(0.0, 1.0, 0.5, 2.0) + testing_util::kl_by_quadrature_1d(1.0, 0.5, -1.0, 1.5);
    EXPECT_NEAR(centroid_alignment_loss(CentroidSet::make(mx, vx), CentroidSet::make(my, vy)).item(), oracle, 1e-8);
}

TEST(CentroidAlignment, AsymmetricWhenVariancesDiffer) {
    const auto a = CentroidSet::make(Matrix::Zero(1, 1), Matrix::Ones(1, 1));
    const auto b = CentroidSet::make(Matrix::Zero(1, 1), Matrix::Constant(1, 1, 4.0));
    const double ab = centroid_alignment_loss(a, b).item();
    const double ba = centroid_alignment_loss(b, a).item();
    EXPECT_NEAR(ab, testing_util::kl_by_quadrature_1d(0, 1, 0, 4), 1e-9);
    EXPECT_NEAR(ba, testing_util::kl_by_quadrature_1d(0, 4, 0, 1), 1e-9);
    EXPECT_GT(std::abs(ab - ba), 0.1);
}

TEST(CentroidAlignment, JointPermutationInvariance) {
    Rng rng(4);
    const Matrix mx = rng.normal_matrix(4, 3, 1.0);
    const Matrix my = rng.normal_matrix(4, 3, 1.0);
    const Matrix vx = (rng.normal_matrix(4, 3, 0.2).array().exp()).matrix();
    const Matrix vy = (rng.normal_matrix(4, 3, 0.2).array().exp()).matrix();
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
    perm.indices() << 2, 0, 3, 1;
    const double base = centroid_alignment_loss(CentroidSet::make(mx, vx), CentroidSet::make(my, vy)).item();
    const double permuted = centroid_alignment_loss(CentroidSet::make(perm * mx, perm * vx),
                                                    CentroidSet::make(perm * my, perm * vy))
                                .item();
    EXPECT_NEAR(base, permuted, 1e-12);
}

TEST(CentroidAlignment, TMismatchIsContractError) {
    EXPECT_THROW((void)centroid_alignment_loss(CentroidSet::make(Matrix::Zero(2, 1), Matrix::Ones(2, 1)),
                                               CentroidSet::make(Matrix::Zero(3, 1), Matrix::Ones(3, 1))),
                 ContractError);
}

TEST(Cpa, MatchingAndAlignmentGradientsMatchFiniteDifferences) {
    Rng rng(12);
    Var um(rng.normal_matrix(5, 3, 1.0), true);
    Var uv((rng.normal_matrix(5, 3, 0.3).array().exp()).matrix(), true);
    auto cx = CentroidSet::make(rng.normal_matrix(2, 3, 1.0), Matrix::Constant(2, 3, 0.8));
    auto cy = CentroidSet::make(rng.normal_matrix(2, 3, 1.0), Matrix::Constant(2, 3, 1.2));
    auto loss = [&] { return matching_score(um, uv, cx, 3.0).loss + centroid_alignment_loss(cx, cy); };
    testing_util::expect_gradients_match({um, uv, cx.mean, cx.log_var, cy.mean, cy.log_var}, loss, 1e-5, 1e-4);
}

TEST(SharedInit, IndexPairedClustersAcrossDomains) {
    // Two well-separated blobs; Y is X shifted, so cluster t must map to the
    // shifted blob t.
    Rng rng(2);
    Matrix mx(40, 2);
    for (int i = 0; i < 40; ++i) {
        const double cx = i < 20 ? -5.0 : 5.0;
        mx(i, 0) = cx + 0.1 * rng.normal();
        mx(i, 1) = 0.1 * rng.normal();
    }
    Matrix my = mx.array() + 1.0;
    const Matrix v = Matrix::Constant(40, 2, 0.01);
    const auto init = init_centroids_shared(mx, v, my, v, 2, 7);
    for (int t = 0; t < 2; ++t) {
        EXPECT_NEAR(init.y.mean.value()(t, 0) - init.x.mean.value()(t, 0), 1.0, 1e-9);
    }
    EXPECT_GT(std::abs(init.x.mean.value()(0, 0) - init.x.mean.value()(1, 0)), 8.0);
    EXPECT_TRUE((init.x.variance().array() >= kVarianceFloor).all());
    EXPECT_NEAR(init.x.prior.sum(), 1.0, 1e-12);
}

}  // namespace
}  // namespace cider::cpa
