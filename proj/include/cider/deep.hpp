#pragma once

// Deep-subspace identification: per-domain stable / variant heads over the
// deep block, a flow linking the two variant latents, and reconstruction by
// reparameterization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/errors.hpp"
#include "cider/flow.hpp"
#include "cider/random.hpp"

namespace cider::deep {

using ad::Matrix;
using ad::Var;

inline constexpr double kMinVariantScale = 1e-6;

/// Z_s (fused for paired rows) and the two variant latents. Rows of the X
/// and Y tensors follow the batch order of each domain; the first `paired`
/// rows of each are the same users.
struct LatentDecomposition {
    Var stable_x;
    Var stable_y;
    Var variant_x;
    Var variant_y;
    std::size_t paired = 0;
};

/// W_s and W_v for one domain (m x m, rows act on the deep block).
struct Heads {
    Var w_stable;
    Var w_variant;
};

class DecompositionHeads {
public:
    DecompositionHeads() = default;
    DecompositionHeads(int width, std::uint64_t seed) : width_(width) {
        if (width < 1) throw ConfigError("decomposition width must be >= 1");
        Rng rng(seed);
        const double scale = 1.0 / std::sqrt(static_cast<double>(width));
        for (auto* h : {&x_, &y_}) {
            h->w_stable = Var(rng.normal_matrix(width, width, scale), true);
            h->w_variant = Var(rng.normal_matrix(width, width, scale), true);
        }
    }

    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] const Heads& x() const { return x_; }
    [[nodiscard]] const Heads& y() const { return y_; }

    [[nodiscard]] std::vector<std::pair<std::string, Var>> named_params() const {
        return {{"deep/x/stable", x_.w_stable},
                {"deep/x/variant", x_.w_variant},
                {"deep/y/stable", y_.w_stable},
                {"deep/y/variant", y_.w_variant}};
    }

private:
    int width_ = 0;
    Heads x_;
    Heads y_;
};

inline Var stable_head(const Var& deep, const Heads& h) { return ad::elu(ad::matmul(deep, h.w_stable)); }
inline Var variant_head(const Var& deep, const Heads& h) { return ad::sigmoid(ad::matmul(deep, h.w_variant)); }

namespace detail {

inline void check_finite(const Var& v, const char* what) {
    if (!v.value().allFinite()) throw NumericError(std::string("decompose: non-finite ") + what);
}

/// rows x other selection with weight w on (i, i) for i < paired.
inline std::shared_ptr<const ad::SparseMatrix> pairing(Eigen::Index rows, Eigen::Index other, std::size_t paired,
                                                       double w) {
    auto m = std::make_shared<ad::SparseMatrix>(rows, other);
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t i = 0; i < paired; ++i) {
        trip.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i), w);
    }
    m->setFromTriplets(trip.begin(), trip.end());
    m->makeCompressed();
    return m;
}

/// own * (0.5 on paired rows, 1 elsewhere) + 0.5 * other on paired rows.
inline Var fuse(const Var& own, const Var& other, std::size_t paired) {
    if (paired == 0) return own;
    Matrix weight = Matrix::Ones(own.rows(), 1);
    weight.topRows(static_cast<Eigen::Index>(paired)).setConstant(0.5);
    auto sel = pairing(own.rows(), other.rows(), paired, 0.5);
    auto sel_t = std::make_shared<const ad::SparseMatrix>(sel->transpose());
    return ad::mul_col(own, Var(std::move(weight))) + ad::spmm(sel, sel_t, other);
}

}  // namespace detail

/// Z_s = ELU(D W_s), Z_v = sigmoid(D W_v) per domain; the first `paired`
/// rows share Z_s as the average of both domains' stable heads.
inline LatentDecomposition decompose(const Var& deep_x, const Var& deep_y, const DecompositionHeads& heads,
                                     std::size_t paired) {
    if (deep_x.cols() != heads.width() || deep_y.cols() != heads.width()) {
        throw ContractError("decompose: deep block width " + std::to_string(deep_x.cols()) + "/" +
                            std::to_string(deep_y.cols()) + " does not match head width " +
                            std::to_string(heads.width()));
    }
    if (paired > static_cast<std::size_t>(std::min(deep_x.rows(), deep_y.rows()))) {
        throw ContractError("decompose: more paired rows than batch rows");
    }
    const Var sx = stable_head(deep_x, heads.x());
    const Var sy = stable_head(deep_y, heads.y());
    LatentDecomposition out;
    out.paired = paired;
    out.stable_x = detail::fuse(sx, sy, paired);
    out.stable_y = detail::fuse(sy, sx, paired);
    out.variant_x = variant_head(deep_x, heads.x());
    out.variant_y = variant_head(deep_y, heads.y());
    detail::check_finite(out.stable_x, "stable latent (X)");
    detail::check_finite(out.stable_y, "stable latent (Y)");
    detail::check_finite(out.variant_x, "variant latent (X)");
    detail::check_finite(out.variant_y, "variant latent (Y)");
    return out;
}

enum class FlowTarget { paired_gaussian, standard_normal };

inline std::string to_string(FlowTarget t) {
    return t == FlowTarget::paired_gaussian ? "paired_gaussian" : "standard_normal";
}

inline FlowTarget parse_flow_target(const std::string& s) {
    if (s == "paired_gaussian") return FlowTarget::paired_gaussian;
    if (s == "standard_normal") return FlowTarget::standard_normal;
    throw ConfigError("unknown flow target '" + s + "' (expected paired_gaussian or standard_normal)");
}

/// L_d = mean over pairs of -[log N(F(z_x); z_y, s^2 I) + log|det J_F(z_x)|].
/// With FlowTarget::standard_normal the density is N(0, I) and z_y only
/// fixes the batch shape.
inline Var flow_nll(const flow::FlowTransform& flow, const Var& z_x, const Var& z_y, double bandwidth,
                    FlowTarget target = FlowTarget::paired_gaussian) {
    if (z_x.rows() != z_y.rows() || z_x.cols() != z_y.cols()) {
        throw ContractError("flow_nll: z_x and z_y must be paired row-for-row");
    }
    if (z_x.rows() < 1) throw ContractError("flow_nll: empty batch");
    if (!(bandwidth > 0)) throw ConfigError("flow bandwidth must be > 0");
    const auto fwd = flow.forward(z_x);
    const double m = static_cast<double>(z_x.cols());
    Var log_p;
    if (target == FlowTarget::paired_gaussian) {
        const Var r = ad::scale(fwd.output - z_y, 1.0 / bandwidth);
        log_p = ad::add_scalar(ad::scale(ad::row_sum(ad::square(r)), -0.5),
                               -m * std::log(bandwidth * std::sqrt(2.0 * std::numbers::pi)));
    } else {
        log_p = ad::add_scalar(ad::scale(ad::row_sum(ad::square(fwd.output)), -0.5),
                               -0.5 * m * std::log(2.0 * std::numbers::pi));
    }
    return ad::neg(ad::mean(log_p + fwd.log_det));
}

/// D_hat = Z_s + Z_v * eps with eps ~ N(0, I) from `rng`; eps = 0 when `rng`
/// is null (evaluation mode). Z_v is floored at 1e-6.
inline Var reparameterize(const Var& stable, const Var& variant, Rng* rng) {
    if (stable.rows() != variant.rows() || stable.cols() != variant.cols()) {
        throw ContractError("reparameterize: Z_s and Z_v shapes differ");
    }
    if (rng == nullptr) return stable;
    Matrix noise = rng->normal_matrix(stable.rows(), stable.cols(), 1.0);
    const Matrix floor_mask = (variant.value().array() < kMinVariantScale).cast<double>().matrix();
    // Floored entries contribute the constant 1e-6 and no gradient.
    const Var clamped = ad::mul(variant, Var(Matrix::Ones(variant.rows(), variant.cols()) - floor_mask)) +
                        Var(floor_mask * kMinVariantScale);
    return stable + ad::mul(clamped, Var(std::move(noise)));
}

enum class InferDirection { x_to_y, y_to_x };

/// Reconstructs the target-domain deep block of users seen only through the
/// source domain: D_hat_Y = Z_s + F(z_v_x) * eps, or with F^{-1} for the
/// reverse direction. Returns values only.
inline Matrix cross_domain_infer(const flow::FlowTransform& flow, const Matrix& stable, const Matrix& variant_source,
                                 InferDirection direction, Rng* rng) {
    if (stable.rows() != variant_source.rows() || stable.cols() != variant_source.cols()) {
        throw ContractError("cross_domain_infer: Z_s and Z_v shapes differ");
    }
    if (rng == nullptr) {
        // Still pushes the source latent through the flow so numeric failures
        // surface on this path.
        (void)(direction == InferDirection::x_to_y ? flow.forward_values(variant_source)
                                                   : flow.inverse(variant_source));
        return stable;
    }
    const Matrix mapped = direction == InferDirection::x_to_y ? flow.forward_values(variant_source).output
                                                              : flow.inverse(variant_source).output;
    return stable + mapped.cwiseProduct(rng->normal_matrix(stable.rows(), stable.cols(), 1.0));
}

/// RBF bandwidth by the median heuristic: sigma^2 = median pairwise squared
/// distance of the pooled samples / 2.
inline double median_bandwidth_sq(const Matrix& a, const Matrix& b) {
    Matrix pooled(a.rows() + b.rows(), a.cols());
    pooled << a, b;
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).squaredNorm());
    }
    if (d.empty()) return 1.0;
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return std::max(*mid / 2.0, 1e-12);
}

/// Biased squared MMD with an RBF kernel; the bandwidth is fixed from the
/// current values and carries no gradient.
inline Var mmd_rbf(const Var& a, const Var& b, std::optional<double> bandwidth_sq = std::nullopt) {
    if (a.cols() != b.cols()) throw ContractError("mmd: sample widths differ");
    if (a.rows() < 1 || b.rows() < 1) throw ContractError("mmd: empty sample");
    const double s2 = bandwidth_sq.value_or(median_bandwidth_sq(a.value(), b.value()));
    auto kernel_mean = [s2](const Var& p, const Var& q) {
        return ad::mean(ad::exp(ad::scale(ad::pairwise_sq_dist(p, q), -0.5 / s2)));
    };
    return kernel_mean(a, a) + kernel_mean(b, b) - ad::scale(kernel_mean(a, b), 2.0);
}

inline double mmd_rbf(const Matrix& a, const Matrix& b, std::optional<double> bandwidth_sq = std::nullopt) {
    return mmd_rbf(Var(a), Var(b), bandwidth_sq).item();
}

}  // namespace cider::deep
