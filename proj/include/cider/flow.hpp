#pragma once

// Bijective flows between per-domain variant latents.
//
// Four layer families share one contract: forward() is differentiable and
// returns the mapped batch together with a per-sample log|det J|; inverse()
// works on plain matrices and returns the preimage with log|det J^{-1}|.
//
//   maf   masked affine autoregressive layer
//   naf   autoregressive deep sigmoidal layer (inverse by bisection)
//   node  continuous-time layer integrated with fixed-step RK4
//   ncsf  autoregressive rational-quadratic spline on [-B, B] with matching
//         unit end slopes (circular-compatible knots) and identity tails

#include <array>
#include <cctype>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cider/autodiff.hpp"
#include "cider/dual.hpp"
#include "cider/errors.hpp"
#include "cider/random.hpp"

namespace cider::flow {

using ad::Matrix;
using ad::Var;

enum class FlowKind { maf, naf, node, ncsf };

inline std::string to_string(FlowKind kind) {
    switch (kind) {
        case FlowKind::maf: return "MAF";
        case FlowKind::naf: return "NAF";
        case FlowKind::node: return "NODE";
        case FlowKind::ncsf: return "NCSF";
    }
    return "?";
}

inline FlowKind parse_flow_kind(std::string name) {
    for (auto& c : name) {
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    if (name == "MAF") return FlowKind::maf;
    if (name == "NAF") return FlowKind::naf;
    if (name == "NODE") return FlowKind::node;
    if (name == "NCSF") return FlowKind::ncsf;
    throw ConfigError("unknown flow kind '" + name + "' (expected MAF, NAF, NODE or NCSF)");
}

struct FlowConfig {
    FlowKind kind = FlowKind::ncsf;
    int layers = 3;
    int hidden = 0;           // conditioner width; 0 means 2 * latent width
    int bins = 8;             // ncsf
    double bound = 3.0;       // ncsf spline support [-bound, bound]
    int sigmoid_units = 4;    // naf
    int ode_steps = 12;       // node
    double init_scale = 0.0;  // std of the output layer at init; 0 gives the identity map

    void validate() const {
        if (layers < 1) throw ConfigError("flow.layers must be >= 1");
        if (hidden < 0) throw ConfigError("flow.hidden must be >= 0");
        if (bins < 2 || 3 * bins - 1 > 63) throw ConfigError("flow.bins must be in [2, 21]");
        if (!(bound > 0)) throw ConfigError("flow.bound must be > 0");
        if (sigmoid_units < 1 || 3 * sigmoid_units > 63) {
            throw ConfigError("flow.sigmoid_units must be in [1, 21]");
        }
        if (ode_steps < 1) throw ConfigError("flow.ode_steps must be >= 1");
        if (init_scale < 0) throw ConfigError("flow.init_scale must be >= 0");
    }
};

struct ForwardResult {
    Var output;
    Var log_det;  // batch x 1
};

struct InverseResult {
    Matrix output;
    Eigen::VectorXd log_det;
};

using NamedParams = std::vector<std::pair<std::string, Var>>;

class Layer {
public:
    virtual ~Layer() = default;
    [[nodiscard]] virtual ForwardResult forward(const Var& z) const = 0;
    [[nodiscard]] virtual InverseResult inverse(const Matrix& y) const = 0;
    [[nodiscard]] virtual NamedParams named_params() const = 0;
};

namespace detail {

using D = ad::Dual<64>;

template <class T>
T sigmoid(const T& u) {
    using std::exp;
    if (ad::value_of(u) >= 0) {
        return 1.0 / (1.0 + exp(-u));
    }
    const T e = exp(u);
    return e / (1.0 + e);
}

template <class T>
T softplus(const T& u) {
    using std::exp;
    using std::log1p;
    if (ad::value_of(u) > 0) {
        return u + log1p(exp(-u));
    }
    return log1p(exp(u));
}

inline void check_finite(const Matrix& m, const std::string& where) {
    if (!m.allFinite()) {
        throw NumericError(where + ": non-finite value");
    }
}

// ---- per-element bijection kernels ---------------------------------------

/// y = x * exp(s) + t with s = 3 tanh(raw / 3).
struct AffineKernel {
    [[nodiscard]] int params() const { return 2; }

    template <class T>
    void forward(const T& x, const T* p, T& y, T& log_det) const {
        using std::exp;
        using std::tanh;
        const T s = 3.0 * tanh(p[1] / 3.0);
        y = x * exp(s) + p[0];
        log_det = s;
    }

    [[nodiscard]] double inverse(double y, const double* p) const {
        const double s = 3.0 * std::tanh(p[1] / 3.0);
        return (y - p[0]) * std::exp(-s);
    }
};

/// y = logit(sum_j w_j sigmoid(a_j x + b_j)), a_j > 0, w on the simplex.
/// Zero raw parameters give the identity.
struct SigmoidalKernel {
    int units = 4;

    [[nodiscard]] int params() const { return 3 * units; }

    template <class T>
    void forward(const T& x, const T* p, T& y, T& log_det) const {
        using std::exp;
        using std::log;
        const double shift = std::log(std::numbers::e - 1.0);
        // softmax over the weight logits
        double mx = ad::value_of(p[2 * units]);
        for (int j = 1; j < units; ++j) mx = std::max(mx, ad::value_of(p[2 * units + j]));
        T norm = x * 0.0;
        for (int j = 0; j < units; ++j) norm = norm + exp(p[2 * units + j] - mx);
        T s = x * 0.0;
        T s_comp = x * 0.0;
        T slope = x * 0.0;
        for (int j = 0; j < units; ++j) {
            const T a = softplus(p[j] + shift);
            const T u = a * x + p[units + j];
            const T w = exp(p[2 * units + j] - mx) / norm;
            const T sig = sigmoid(u);
            const T sig_neg = sigmoid(-u);
            s = s + w * sig;
            s_comp = s_comp + w * sig_neg;
            slope = slope + w * a * sig * sig_neg;
        }
        y = log(s) - log(s_comp);
        log_det = log(slope) - log(s) - log(s_comp);
    }

    [[nodiscard]] double inverse(double y, const double* p) const {
        auto f = [&](double x) {
            double out = 0.0;
            double ld = 0.0;
            forward<double>(x, p, out, ld);
            return out;
        };
        double lo = -1.0;
        double hi = 1.0;
        while (f(lo) > y) lo *= 2.0;
        while (f(hi) < y) hi *= 2.0;
        for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo)); ++it) {
            const double mid = 0.5 * (lo + hi);
            if (f(mid) < y) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return 0.5 * (lo + hi);
    }
};

/// Monotone rational-quadratic spline on [-bound, bound] with unit slope at
/// both ends and identity outside. Parameters per element: K width logits,
/// K height logits, K - 1 interior slope parameters. Zero parameters give the
/// identity.
struct SplineKernel {
    int bins = 8;
    double bound = 3.0;
    static constexpr double min_bin = 1e-3;
    static constexpr double min_slope = 1e-3;

    [[nodiscard]] int params() const { return 3 * bins - 1; }

    template <class T>
    void knots(const T* p, int offset, T* out) const {
        using std::exp;
        double mx = ad::value_of(p[offset]);
        for (int k = 1; k < bins; ++k) mx = std::max(mx, ad::value_of(p[offset + k]));
        T norm = p[offset] * 0.0;
        for (int k = 0; k < bins; ++k) norm = norm + exp(p[offset + k] - mx);
        out[0] = p[offset] * 0.0 - bound;
        T acc = p[offset] * 0.0;
        for (int k = 0; k < bins; ++k) {
            const T frac = min_bin + (1.0 - min_bin * bins) * exp(p[offset + k] - mx) / norm;
            acc = acc + frac;
            out[k + 1] = 2.0 * bound * acc - bound;
        }
        out[bins] = p[offset] * 0.0 + bound;
    }

    template <class T>
    T slope(const T* p, int k) const {
        // Knot k in [0, bins]; end knots are pinned to 1.
        if (k == 0 || k == bins) {
            return p[0] * 0.0 + 1.0;
        }
        return min_slope + (1.0 - min_slope) * softplus(p[2 * bins + k - 1]) / std::numbers::ln2;
    }

    template <class T>
    void forward(const T& x, const T* p, T& y, T& log_det) const {
        using std::log;
        const double xv = ad::value_of(x);
        if (xv <= -bound || xv >= bound) {
            y = x;
            log_det = x * 0.0;
            return;
        }
        std::array<T, 64> xk;
        std::array<T, 64> yk;
        knots(p, 0, xk.data());
        knots(p, bins, yk.data());
        int k = 0;
        while (k < bins - 1 && ad::value_of(xk[k + 1]) <= xv) ++k;
        const T w = xk[k + 1] - xk[k];
        const T h = yk[k + 1] - yk[k];
        const T s = h / w;
        const T d0 = slope(p, k);
        const T d1 = slope(p, k + 1);
        const T xi = (x - xk[k]) / w;
        const T om = 1.0 - xi;
        const T denom = s + (d1 + d0 - 2.0 * s) * xi * om;
        y = yk[k] + h * (s * xi * xi + d0 * xi * om) / denom;
        const T num = s * s * (d1 * xi * xi + 2.0 * s * xi * om + d0 * om * om);
        log_det = log(num) - 2.0 * log(denom);
    }

    [[nodiscard]] double inverse(double y, const double* p) const {
        if (y <= -bound || y >= bound) {
            return y;
        }
        std::array<double, 64> xk;
        std::array<double, 64> yk;
        knots(p, 0, xk.data());
        knots(p, bins, yk.data());
        int k = 0;
        while (k < bins - 1 && yk[k + 1] <= y) ++k;
        const double w = xk[k + 1] - xk[k];
        const double h = yk[k + 1] - yk[k];
        const double s = h / w;
        const double d0 = slope(p, k);
        const double d1 = slope(p, k + 1);
        const double dy = y - yk[k];
        const double c2 = d1 + d0 - 2.0 * s;
        const double a = h * (s - d0) + dy * c2;
        const double b = h * d0 - dy * c2;
        const double c = -s * dy;
        const double disc = std::max(0.0, b * b - 4.0 * a * c);
        const double xi = (2.0 * c) / (-b - std::sqrt(disc));
        return xk[k] + xi * w;
    }
};

/// Applies `kernel` to every element of x (batch x m) with its parameter block
/// params(:, i*P .. i*P+P). Output is batch x 2m: [y | log_det].
template <class Kernel>
Var elementwise_bijection(const Var& x, const Var& params, const Kernel& kernel) {
    const int p = kernel.params();
    const Eigen::Index rows = x.rows();
    const Eigen::Index m = x.cols();
    if (params.rows() != rows || params.cols() != m * p) {
        throw ContractError("elementwise_bijection: parameter block shape mismatch");
    }
    const bool need_grad = x.requires_grad() || params.requires_grad();
    Matrix out(rows, 2 * m);
    Matrix jac_y;
    Matrix jac_l;
    if (need_grad) {
        jac_y.resize(rows * m, p + 1);
        jac_l.resize(rows * m, p + 1);
    }
    const Matrix& xv = x.value();
    const Matrix& pv = params.value();
    std::vector<double> pbuf(static_cast<std::size_t>(p));
    std::vector<D> dbuf(static_cast<std::size_t>(p));
    for (Eigen::Index b = 0; b < rows; ++b) {
        for (Eigen::Index i = 0; i < m; ++i) {
            if (!need_grad) {
                for (int q = 0; q < p; ++q) pbuf[q] = pv(b, i * p + q);
                double y = 0.0;
                double ld = 0.0;
                kernel.template forward<double>(xv(b, i), pbuf.data(), y, ld);
                out(b, i) = y;
                out(b, m + i) = ld;
                continue;
            }
            const D dx = D::variable(xv(b, i), p + 1, 0);
            for (int q = 0; q < p; ++q) dbuf[q] = D::variable(pv(b, i * p + q), p + 1, q + 1);
            D y;
            D ld;
            kernel.template forward<D>(dx, dbuf.data(), y, ld);
            out(b, i) = y.v;
            out(b, m + i) = ld.v;
            const Eigen::Index r = b * m + i;
            for (int q = 0; q <= p; ++q) {
                jac_y(r, q) = y.d[q];
                jac_l(r, q) = ld.d[q];
            }
        }
    }
    return ad::detail::make_result(
        std::move(out), {x, params}, [x, params, jac_y, jac_l, m, p, rows](const ad::Node& node) {
            const Matrix& g = node.grad;
            Matrix gx(rows, m);
            Matrix gp(rows, m * p);
            for (Eigen::Index b = 0; b < rows; ++b) {
                for (Eigen::Index i = 0; i < m; ++i) {
                    const Eigen::Index r = b * m + i;
                    const double gy = g(b, i);
                    const double gl = g(b, m + i);
                    gx(b, i) = gy * jac_y(r, 0) + gl * jac_l(r, 0);
                    for (int q = 0; q < p; ++q) {
                        gp(b, i * p + q) = gy * jac_y(r, q + 1) + gl * jac_l(r, q + 1);
                    }
                }
            }
            ad::detail::push(x, gx);
            ad::detail::push(params, gp);
        });
}

/// Masked autoregressive conditioner: output block i depends only on inputs
/// that precede i in the layer's ordering.
class Made {
public:
    Made(int width, int hidden, int params_per_dim, bool reversed, double init_scale, Rng& rng)
        : width_(width), hidden_(hidden), per_dim_(params_per_dim) {
        std::vector<int> in_degree(static_cast<std::size_t>(width));
        for (int i = 0; i < width; ++i) {
            in_degree[static_cast<std::size_t>(i)] = reversed ? width - i : i + 1;
        }
        order_.resize(static_cast<std::size_t>(width));
        for (int i = 0; i < width; ++i) {
            order_[static_cast<std::size_t>(in_degree[static_cast<std::size_t>(i)] - 1)] = i;
        }
        const int span = std::max(1, width - 1);
        Matrix m1 = Matrix::Zero(width, hidden);
        Matrix m2 = Matrix::Zero(hidden, width * params_per_dim);
        for (int j = 0; j < hidden; ++j) {
            const int hd = 1 + (j % span);
            for (int i = 0; i < width; ++i) {
                if (hd >= in_degree[static_cast<std::size_t>(i)]) m1(i, j) = 1.0;
                if (in_degree[static_cast<std::size_t>(i)] > hd) {
                    for (int q = 0; q < params_per_dim; ++q) m2(j, i * params_per_dim + q) = 1.0;
                }
            }
        }
        mask1_ = Var(m1);
        mask2_ = Var(m2);
        w1_ = Var(rng.normal_matrix(width, hidden, 1.0 / std::sqrt(static_cast<double>(width))),
                  true);
        b1_ = Var(Matrix::Zero(1, hidden), true);
        w2_ = Var(rng.normal_matrix(hidden, width * params_per_dim, init_scale), true);
        b2_ = Var(Matrix::Zero(1, width * params_per_dim), true);
    }

    [[nodiscard]] Var operator()(const Var& x) const {
        const Var h = ad::tanh(ad::add_row(ad::matmul(x, ad::mul(w1_, mask1_)), b1_));
        return ad::add_row(ad::matmul(h, ad::mul(w2_, mask2_)), b2_);
    }

    [[nodiscard]] Matrix eval(const Matrix& x) const {
        const Matrix pre = (x * w1_.value().cwiseProduct(mask1_.value())).rowwise() +
                           b1_.value().row(0);
        const Matrix h = pre.array().tanh().matrix();
        return (h * w2_.value().cwiseProduct(mask2_.value())).rowwise() + b2_.value().row(0);
    }

    /// Dimension indices in autoregressive order.
    [[nodiscard]] const std::vector<int>& order() const { return order_; }

    [[nodiscard]] NamedParams named_params(const std::string& prefix) const {
        return {{prefix + "w1", w1_}, {prefix + "b1", b1_}, {prefix + "w2", w2_}, {prefix + "b2", b2_}};
    }

private:
    int width_;
    int hidden_;
    int per_dim_;
    std::vector<int> order_;
    Var mask1_, mask2_;
    Var w1_, b1_, w2_, b2_;
};

template <class Kernel>
class AutoregressiveLayer final : public Layer {
public:
    AutoregressiveLayer(int width, int hidden, Kernel kernel, bool reversed, double init_scale,
                        Rng& rng)
        : width_(width),
          kernel_(kernel),
          made_(width, hidden, kernel.params(), reversed, init_scale, rng) {}

    [[nodiscard]] ForwardResult forward(const Var& z) const override {
        const Var params = made_(z);
        const Var both = elementwise_bijection(z, params, kernel_);
        return {ad::slice_cols(both, 0, width_), ad::row_sum(ad::slice_cols(both, width_, width_))};
    }

    [[nodiscard]] InverseResult inverse(const Matrix& y) const override {
        const int p = kernel_.params();
        Matrix x = Matrix::Zero(y.rows(), width_);
        for (const int i : made_.order()) {
            const Matrix params = made_.eval(x);
            for (Eigen::Index b = 0; b < y.rows(); ++b) {
                const auto block = row_block(params, b, i, p);
                x(b, i) = kernel_.inverse(y(b, i), block.data());
            }
        }
        const Matrix params = made_.eval(x);
        Eigen::VectorXd log_det = Eigen::VectorXd::Zero(y.rows());
        for (Eigen::Index b = 0; b < y.rows(); ++b) {
            for (int i = 0; i < width_; ++i) {
                double out = 0.0;
                double ld = 0.0;
                const auto block = row_block(params, b, i, p);
                kernel_.template forward<double>(x(b, i), block.data(), out, ld);
                log_det(b) -= ld;
            }
        }
        return {std::move(x), std::move(log_det)};
    }

    [[nodiscard]] NamedParams named_params() const override { return made_.named_params(""); }

private:
    static std::vector<double> row_block(const Matrix& params, Eigen::Index b, int i, int p) {
        std::vector<double> out(static_cast<std::size_t>(p));
        for (int q = 0; q < p; ++q) out[static_cast<std::size_t>(q)] = params(b, i * p + q);
        return out;
    }

    int width_;
    Kernel kernel_;
    Made made_;
};

/// dz/dt = tanh(z W1 + t w_t + b1) W2 + b2 on t in [0, 1]; the log-det is the
/// integral of the Jacobian trace, integrated alongside z by the same RK4
/// scheme.
class OdeLayer final : public Layer {
public:
    OdeLayer(int width, int hidden, int steps, double init_scale, Rng& rng)
        : width_(width), steps_(steps) {
        w1_ = Var(rng.normal_matrix(width, hidden, 1.0 / std::sqrt(static_cast<double>(width))),
                  true);
        b1_ = Var(Matrix::Zero(1, hidden), true);
        wt_ = Var(rng.normal_matrix(1, hidden, 1.0), true);
        w2_ = Var(rng.normal_matrix(hidden, width, init_scale), true);
        b2_ = Var(Matrix::Zero(1, width), true);
    }

    [[nodiscard]] ForwardResult forward(const Var& z) const override {
        return integrate(z, w1_, b1_, wt_, w2_, b2_, 0.0, 1.0);
    }

    [[nodiscard]] InverseResult inverse(const Matrix& y) const override {
        auto r = integrate(Var(y), ad::detach(w1_), ad::detach(b1_), ad::detach(wt_),
                           ad::detach(w2_), ad::detach(b2_), 1.0, 0.0);
        return {r.output.value(), r.log_det.value().col(0)};
    }

    [[nodiscard]] NamedParams named_params() const override {
        return {{"w1", w1_}, {"b1", b1_}, {"wt", wt_}, {"w2", w2_}, {"b2", b2_}};
    }

private:
    struct Field {
        Var dz;
        Var trace;
    };

    static Field field(const Var& z, double t, const Var& w1, const Var& b1, const Var& wt,
                       const Var& w2, const Var& b2) {
        const Var pre = ad::add_row(ad::add_row(ad::matmul(z, w1), b1), ad::scale(wt, t));
        const Var h = ad::tanh(pre);
        const Var dz = ad::add_row(ad::matmul(h, w2), b2);
        const Var coupling = ad::row_sum(ad::mul(ad::transpose(w1), w2));  // hidden x 1
        const Var gate = ad::add_scalar(ad::neg(ad::square(h)), 1.0);
        return {dz, ad::matmul(gate, coupling)};
    }

    [[nodiscard]] ForwardResult integrate(Var z, const Var& w1, const Var& b1, const Var& wt,
                                          const Var& w2, const Var& b2, double t0,
                                          double t1) const {
        const double h = (t1 - t0) / steps_;
        Var log_det(Matrix::Zero(z.rows(), 1));
        double t = t0;
        for (int s = 0; s < steps_; ++s) {
            const Field k1 = field(z, t, w1, b1, wt, w2, b2);
            const Field k2 = field(z + ad::scale(k1.dz, h / 2), t + h / 2, w1, b1, wt, w2, b2);
            const Field k3 = field(z + ad::scale(k2.dz, h / 2), t + h / 2, w1, b1, wt, w2, b2);
            const Field k4 = field(z + ad::scale(k3.dz, h), t + h, w1, b1, wt, w2, b2);
            z = z + ad::scale(k1.dz + ad::scale(k2.dz, 2.0) + ad::scale(k3.dz, 2.0) + k4.dz,
                              h / 6.0);
            log_det = log_det + ad::scale(k1.trace + ad::scale(k2.trace, 2.0) +
                                              ad::scale(k3.trace, 2.0) + k4.trace,
                                          h / 6.0);
            t += h;
        }
        return {z, log_det};
    }

    int width_;
    int steps_;
    Var w1_, b1_, wt_, w2_, b2_;
};

}  // namespace detail

/// Composition f_L o ... o f_1 of bijective layers over latents of a fixed
/// width.
class FlowTransform {
public:
    FlowTransform(int width, FlowConfig config, std::uint64_t seed)
        : width_(width), config_(config) {
        config_.validate();
        if (width < 1) throw ConfigError("flow width must be >= 1");
        Rng rng(seed);
        const int hidden = config_.hidden > 0 ? config_.hidden : 2 * width;
        for (int l = 0; l < config_.layers; ++l) {
            const bool reversed = (l % 2) == 1;
            switch (config_.kind) {
                case FlowKind::maf:
                    layers_.push_back(std::make_unique<detail::AutoregressiveLayer<detail::AffineKernel>>(
                        width, hidden, detail::AffineKernel{}, reversed, config_.init_scale, rng));
                    break;
                case FlowKind::naf:
                    layers_.push_back(
                        std::make_unique<detail::AutoregressiveLayer<detail::SigmoidalKernel>>(
                            width, hidden, detail::SigmoidalKernel{config_.sigmoid_units}, reversed,
                            config_.init_scale, rng));
                    break;
                case FlowKind::ncsf:
                    layers_.push_back(
                        std::make_unique<detail::AutoregressiveLayer<detail::SplineKernel>>(
                            width, hidden, detail::SplineKernel{config_.bins, config_.bound},
                            reversed, config_.init_scale, rng));
                    break;
                case FlowKind::node:
                    layers_.push_back(std::make_unique<detail::OdeLayer>(
                        width, hidden, config_.ode_steps, config_.init_scale, rng));
                    break;
            }
        }
    }

    FlowTransform(FlowTransform&&) noexcept = default;
    FlowTransform& operator=(FlowTransform&&) noexcept = default;

    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] const FlowConfig& config() const { return config_; }
    [[nodiscard]] std::size_t size() const { return layers_.size(); }

    /// Maps z through every layer; log_det is the per-sample sum of layer
    /// log-determinants (batch x 1).
    [[nodiscard]] ForwardResult forward(const Var& z) const {
        check_width(z.cols());
        detail::check_finite(z.value(), "flow_forward input");
        Var out = z;
        Var log_det(Matrix::Zero(z.rows(), 1));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            auto r = layers_[l]->forward(out);
            detail::check_finite(r.output.value(), "flow layer " + std::to_string(l + 1));
            detail::check_finite(r.log_det.value(), "flow layer " + std::to_string(l + 1) + " log-det");
            out = r.output;
            log_det = log_det + r.log_det;
        }
        return {out, log_det};
    }

    /// Plain-value forward pass without gradient tracking.
    [[nodiscard]] InverseResult forward_values(const Matrix& z) const {
        check_width(z.cols());
        Matrix out = z;
        Eigen::VectorXd log_det = Eigen::VectorXd::Zero(z.rows());
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            auto r = layers_[l]->forward(Var(out));
            out = r.output.value();
            log_det += r.log_det.value().col(0);
        }
        detail::check_finite(out, "flow_forward");
        return {std::move(out), std::move(log_det)};
    }

    [[nodiscard]] InverseResult inverse(const Matrix& y) const {
        check_width(y.cols());
        Matrix out = y;
        Eigen::VectorXd log_det = Eigen::VectorXd::Zero(y.rows());
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            auto r = (*it)->inverse(out);
            out = std::move(r.output);
            log_det += r.log_det;
        }
        detail::check_finite(out, "flow_inverse");
        return {std::move(out), std::move(log_det)};
    }

    /// Parameters keyed "flow/layer{l}/{name}" with l starting at 1.
    [[nodiscard]] NamedParams named_params() const {
        NamedParams out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            for (auto& [name, var] : layers_[l]->named_params()) {
                out.emplace_back("flow/layer" + std::to_string(l + 1) + "/" + name, var);
            }
        }
        return out;
    }

    [[nodiscard]] std::vector<Var> params() const {
        std::vector<Var> out;
        for (auto& [name, var] : named_params()) out.push_back(var);
        return out;
    }

private:
    void check_width(Eigen::Index cols) const {
        if (cols != width_) {
            throw ContractError("flow: input width " + std::to_string(cols) +
                                " does not match flow width " + std::to_string(width_));
        }
    }

    int width_;
    FlowConfig config_;
    std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace cider::flow
