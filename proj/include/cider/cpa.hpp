#pragma once

// Centroid-based probabilistic alignment of shallow user representations.
//
// Each domain keeps T diagonal-Gaussian interest centroids with mixture
// weights. Users are softly assigned to centroids by a tempered softmax of
// negative KL divergences; the expected KL is the within-domain matching
// score, and index-paired centroid KLs across domains form the alignment
// loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/errors.hpp"
#include "cider/random.hpp"

namespace cider::cpa {

using ad::Matrix;
using ad::Var;

inline constexpr double kVarianceFloor = 1e-6;

/// KL(q || p) between diagonal Gaussians given means and variances.
inline double kl_diag_gaussian(std::span<const double> mean_q, std::span<const double> var_q,
                               std::span<const double> mean_p, std::span<const double> var_p) {
    const auto n = mean_q.size();
    if (var_q.size() != n || mean_p.size() != n || var_p.size() != n) {
        throw ContractError("kl_diag_gaussian: width mismatch");
    }
    double kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double diff = mean_q[j] - mean_p[j];
        kl += std::log(var_p[j] / var_q[j]) + (var_q[j] + diff * diff) / var_p[j] - 1.0;
    }
    return std::max(0.0, 0.5 * kl);
}

inline double kl_diag_gaussian(const Eigen::VectorXd& mean_q, const Eigen::VectorXd& var_q,
                               const Eigen::VectorXd& mean_p, const Eigen::VectorXd& var_p) {
    return kl_diag_gaussian(std::span<const double>(mean_q.data(), static_cast<std::size_t>(mean_q.size())),
                            std::span<const double>(var_q.data(), static_cast<std::size_t>(var_q.size())),
                            std::span<const double>(mean_p.data(), static_cast<std::size_t>(mean_p.size())),
                            std::span<const double>(var_p.data(), static_cast<std::size_t>(var_p.size())));
}

/// T diagonal Gaussians parameterized by mean and log-variance, with prior
/// weights summing to one.
struct CentroidSet {
    Var mean;     // T x w
    Var log_var;  // T x w
    Eigen::VectorXd prior;

    [[nodiscard]] int count() const { return static_cast<int>(mean.rows()); }
    [[nodiscard]] int width() const { return static_cast<int>(mean.cols()); }
    [[nodiscard]] Matrix variance() const { return log_var.value().array().exp().matrix(); }

    static CentroidSet make(Matrix mean, const Matrix& variance) {
        if (mean.rows() != variance.rows() || mean.cols() != variance.cols() || mean.rows() < 1) {
            throw ContractError("CentroidSet: mean and variance shapes differ or T < 1");
        }
        CentroidSet c;
        const auto t = mean.rows();
        c.mean = Var(std::move(mean), true);
        c.log_var = Var(variance.cwiseMax(kVarianceFloor).array().log().matrix(), true);
        c.prior = Eigen::VectorXd::Constant(t, 1.0 / static_cast<double>(t));
        return c;
    }

    [[nodiscard]] std::vector<Var> params() const { return {mean, log_var}; }
};

/// KL(q_i || C_t) for every user row i and centroid t (batch x T).
inline Var kl_to_centroids(const Var& user_mean, const Var& user_var, const CentroidSet& c) {
    if (user_mean.cols() != c.width() || user_var.cols() != c.width() || user_mean.rows() != user_var.rows()) {
        throw ContractError("kl_to_centroids: posterior width " + std::to_string(user_mean.cols()) +
                            " does not match centroid width " + std::to_string(c.width()));
    }
    const Var precision = ad::exp(ad::neg(c.log_var));                              // T x w
    const Var log_det_p = ad::transpose(ad::row_sum(c.log_var));                    // 1 x T
    const Var log_det_q = ad::row_sum(ad::log(user_var));                            // B x 1
    const Var trace = ad::matmul(user_var, ad::transpose(precision));                // B x T
    const Var quad_user = ad::matmul(ad::square(user_mean), ad::transpose(precision));
    const Var cross = ad::matmul(user_mean, ad::transpose(ad::mul(c.mean, precision)));
    const Var quad_centroid = ad::transpose(ad::row_sum(ad::mul(ad::square(c.mean), precision)));
    Var kl = trace + quad_user - ad::scale(cross, 2.0);
    kl = ad::add_row(kl, quad_centroid);
    kl = ad::add_row(kl, log_det_p);
    kl = ad::add_col(kl, ad::neg(log_det_q));
    return ad::scale(ad::add_scalar(kl, -static_cast<double>(c.width())), 0.5);
}

/// Responsibilities pi_i(t) proportional to pi(t) exp(-alpha KL_it), row-wise,
/// evaluated in log space.
inline Var soft_assign(const Var& kl, const Eigen::VectorXd& prior, double alpha) {
    if (!(alpha > 0)) throw ContractError("soft_assign: temperature alpha must be > 0");
    if (kl.cols() != prior.size() || kl.cols() < 1) throw ContractError("soft_assign: prior size mismatch");
    Matrix log_prior(1, prior.size());
    for (Eigen::Index t = 0; t < prior.size(); ++t) {
        log_prior(0, t) = prior(t) > 0 ? std::log(prior(t)) : -std::numeric_limits<double>::infinity();
    }
    return ad::softmax_rows(ad::add_row(ad::scale(kl, -alpha), Var(log_prior)));
}

struct MatchingScore {
    Var loss;             // sum_i xi_i
    Var expected;         // batch x 1, xi_i
    Var responsibilities; // batch x T
    Var kl;               // batch x T
};

/// Expected KL of each user over the centroids and its sum over the batch.
inline MatchingScore matching_score(const Var& user_mean, const Var& user_var, const CentroidSet& c,
                                    double alpha) {
    if (user_mean.rows() < 1) throw ContractError("matching_score: empty batch");
    MatchingScore s;
    s.kl = kl_to_centroids(user_mean, user_var, c);
    s.responsibilities = soft_assign(s.kl, c.prior, alpha);
    s.expected = ad::row_sum(ad::mul(s.responsibilities, s.kl));
    s.loss = ad::sum(s.expected);
    return s;
}

/// Sum over t of KL(C_t^X || C_t^Y), pairing centroids by index.
inline Var centroid_alignment_loss(const CentroidSet& cx, const CentroidSet& cy) {
    if (cx.count() != cy.count() || cx.width() != cy.width()) {
        throw ContractError("centroid_alignment_loss: centroid sets differ in T or width");
    }
    const Var var_x = ad::exp(cx.log_var);
    const Var prec_y = ad::exp(ad::neg(cy.log_var));
    const Var diff = cx.mean - cy.mean;
    Var per = (cy.log_var - cx.log_var) + ad::mul(var_x + ad::square(diff), prec_y);
    return ad::scale(ad::add_scalar(ad::sum(per), -static_cast<double>(cx.mean.value().size())), 0.5);
}

/// One explicit gradient step on the centroid parameters using their
/// accumulated gradients, followed by the variance floor and the prior
/// refresh pi(t) proportional to sum_i pi_i(t). Returns false (and leaves the
/// centroids untouched) when a gradient is non-finite.
inline bool update_centroids(CentroidSet& c, double learning_rate, const Matrix* responsibilities = nullptr) {
    if (!(learning_rate > 0)) throw ContractError("update_centroids: learning rate must be > 0");
    const bool has_mean = c.mean.has_grad();
    const bool has_var = c.log_var.has_grad();
    if ((has_mean && !c.mean.grad().allFinite()) || (has_var && !c.log_var.grad().allFinite())) {
        warn("centroid update skipped: non-finite gradient");
        return false;
    }
    if (has_mean) c.mean.mutable_value() -= learning_rate * c.mean.grad();
    if (has_var) {
        c.log_var.mutable_value() -= learning_rate * c.log_var.grad();
    }
    c.log_var.mutable_value() = c.log_var.value().cwiseMax(std::log(kVarianceFloor));
    if (responsibilities != nullptr && responsibilities->rows() > 0) {
        Eigen::VectorXd mass = responsibilities->colwise().sum().transpose();
        mass = mass.cwiseMax(1e-8);
        c.prior = mass / mass.sum();
    }
    return true;
}

/// k-means++ seeding plus Lloyd refinement on the X-domain shallow means of
/// paired users; both domains' centroids are then moment-matched to the same
/// clusters so index t denotes the same user group on each side. Centroid
/// variance is the within-cluster variance of the means plus the members'
/// average posterior variance.
struct SharedInit {
    CentroidSet x;
    CentroidSet y;
    std::vector<int> assignment;
};

namespace detail {

inline std::vector<int> kmeans(const Matrix& points, int clusters, Rng& rng, int iterations = 20) {
    const auto n = points.rows();
    Matrix centers(clusters, points.cols());
    centers.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd dist = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < clusters; ++c) {
        const double total = dist.sum();
        Eigen::Index pick = 0;
        if (total > 0) {
            double r = rng.uniform() * total;
            for (pick = 0; pick < n - 1; ++pick) {
                r -= dist(pick);
                if (r < 0) break;
            }
        } else {
            pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
        }
        centers.row(c) = points.row(pick);
        dist = dist.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < iterations; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = 0;
            (centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
            if (assign[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
                assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
                changed = true;
            }
        }
        Matrix sums = Matrix::Zero(clusters, points.cols());
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(clusters);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
            counts(assign[static_cast<std::size_t>(i)]) += 1.0;
        }
        for (int c = 0; c < clusters; ++c) {
            if (counts(c) > 0) centers.row(c) = sums.row(c) / counts(c);
        }
        if (!changed && it > 0) break;
    }
    return assign;
}

inline CentroidSet moment_match(const Matrix& means, const Matrix& variances, const std::vector<int>& assign,
                                int clusters) {
    const auto w = means.cols();
    Matrix mu = Matrix::Zero(clusters, w);
    Matrix var = Matrix::Zero(clusters, w);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(clusters);
    for (Eigen::Index i = 0; i < means.rows(); ++i) {
        mu.row(assign[static_cast<std::size_t>(i)]) += means.row(i);
        counts(assign[static_cast<std::size_t>(i)]) += 1.0;
    }
    const Eigen::RowVectorXd global_mean = means.colwise().mean();
    const Eigen::RowVectorXd global_var =
        ((means.rowwise() - global_mean).array().square().colwise().mean() + variances.colwise().mean().array())
            .matrix();
    for (int c = 0; c < clusters; ++c) {
        if (counts(c) > 0) {
            mu.row(c) /= counts(c);
        } else {
            mu.row(c) = global_mean;
        }
    }
    for (Eigen::Index i = 0; i < means.rows(); ++i) {
        const int c = assign[static_cast<std::size_t>(i)];
        var.row(c) += (means.row(i) - mu.row(c)).array().square().matrix() + variances.row(i);
    }
    for (int c = 0; c < clusters; ++c) {
        if (counts(c) > 0) {
            var.row(c) /= counts(c);
        } else {
            var.row(c) = global_var;
        }
    }
    return CentroidSet::make(std::move(mu), var);
}

}  // namespace detail

inline SharedInit init_centroids_shared(const Matrix& mean_x, const Matrix& var_x, const Matrix& mean_y,
                                        const Matrix& var_y, int clusters, std::uint64_t seed) {
    if (clusters < 1) throw ConfigError("number of centroids T must be >= 1");
    if (mean_x.rows() != mean_y.rows() || mean_x.rows() < 1) {
        throw ContractError("init_centroids_shared: need the same non-empty user set in both domains");
    }
    Rng rng(derive_seed(seed, 40));
    SharedInit out;
    out.assignment = detail::kmeans(mean_x, clusters, rng);
    out.x = detail::moment_match(mean_x, var_x, out.assignment, clusters);
    out.y = detail::moment_match(mean_y, var_y, out.assignment, clusters);
    return out;
}

/// Fallback without paired users: each domain is clustered on its own, so
/// index t carries no cross-domain meaning until alignment pulls pairs
/// together. `assignment` holds the X-side clustering.
inline SharedInit init_centroids_unpaired(const Matrix& mean_x, const Matrix& var_x, const Matrix& mean_y,
                                          const Matrix& var_y, int clusters, std::uint64_t seed) {
    if (clusters < 1) throw ConfigError("number of centroids T must be >= 1");
    if (mean_x.rows() < 1 || mean_y.rows() < 1) throw ContractError("init_centroids_unpaired: empty user set");
    Rng rng(derive_seed(seed, 40));
    SharedInit out;
    out.assignment = detail::kmeans(mean_x, clusters, rng);
    const auto assign_y = detail::kmeans(mean_y, clusters, rng);
    out.x = detail::moment_match(mean_x, var_x, out.assignment, clusters);
    out.y = detail::moment_match(mean_y, var_y, assign_y, clusters);
    return out;
}

}  // namespace cider::cpa
