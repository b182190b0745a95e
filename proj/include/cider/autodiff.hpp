#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Var is a handle to a node in a dynamically built computation graph. Rows
// are samples and columns are features throughout the library. Graphs are
// rebuilt on every forward pass; leaves created with requires_grad = true are
// the trainable parameters and keep their accumulated gradient until
// zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace cider::ad {

using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward_fn;

    void accumulate(const Matrix& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var scalar(double v, bool requires_grad = false) {
        Matrix m(1, 1);
        m(0, 0) = v;
        return Var(std::move(m), requires_grad);
    }

    [[nodiscard]] bool defined() const { return node_ != nullptr; }
    [[nodiscard]] const Matrix& value() const { return node_->value; }
    [[nodiscard]] Matrix& mutable_value() { return node_->value; }
    [[nodiscard]] const Matrix& grad() const { return node_->grad; }
    [[nodiscard]] bool has_grad() const { return node_->grad.size() != 0; }
    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    [[nodiscard]] Eigen::Index rows() const { return node_->value.rows(); }
    [[nodiscard]] Eigen::Index cols() const { return node_->value.cols(); }
    [[nodiscard]] double item() const {
        if (node_->value.size() != 1) {
            throw std::logic_error("Var::item on non-scalar of shape " +
                                   std::to_string(rows()) + "x" + std::to_string(cols()));
        }
        return node_->value(0, 0);
    }
    void zero_grad() { node_->grad.resize(0, 0); }

    [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_result(Matrix value, std::vector<Var> inputs,
                       std::function<void(const Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) {
        any = any || in.requires_grad();
    }
    if (any) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

inline void push(const Var& v, const Matrix& g) {
    if (v.requires_grad()) {
        v.node()->accumulate(g);
    }
}

}  // namespace detail

/// Runs reverse accumulation from a scalar output. Gradients accumulate into
/// every reachable node that requires them.
inline void backward(const Var& output) {
    if (output.value().size() != 1) {
        throw std::logic_error("backward: output must be a 1x1 scalar");
    }
    if (!output.requires_grad()) {
        return;
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    seen.insert(output.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    output.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) {
            n->backward_fn(*n);
        }
    }
}

// ---- linear algebra -------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimension mismatch " +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
    }
    return detail::make_result(a.value() * b.value(), {a, b}, [a, b](const Node& out) {
        detail::push(a, out.grad * b.value().transpose());
        detail::push(b, a.value().transpose() * out.grad);
    });
}

/// Sparse constant times dense variable. `transposed` must equal matrix^T; it
/// routes the backward product.
inline Var spmm(std::shared_ptr<const SparseMatrix> matrix,
                std::shared_ptr<const SparseMatrix> transposed, const Var& b) {
    if (matrix->cols() != b.rows()) {
        throw std::invalid_argument("spmm: inner dimension mismatch");
    }
    Matrix value = (*matrix) * b.value();
    return detail::make_result(std::move(value), {b}, [transposed, b](const Node& out) {
        detail::push(b, (*transposed) * out.grad);
    });
}

inline Var transpose(const Var& a) {
    return detail::make_result(a.value().transpose(), {a}, [a](const Node& out) {
        detail::push(a, out.grad.transpose());
    });
}

// ---- arithmetic -----------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    return detail::make_result(a.value() + b.value(), {a, b}, [a, b](const Node& out) {
        detail::push(a, out.grad);
        detail::push(b, out.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    return detail::make_result(a.value() - b.value(), {a, b}, [a, b](const Node& out) {
        detail::push(a, out.grad);
        detail::push(b, -out.grad);
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    return detail::make_result(a.value().cwiseProduct(b.value()), {a, b},
                               [a, b](const Node& out) {
                                   detail::push(a, out.grad.cwiseProduct(b.value()));
                                   detail::push(b, out.grad.cwiseProduct(a.value()));
                               });
}

inline Var div(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "div");
    Matrix q = a.value().cwiseQuotient(b.value());
    return detail::make_result(q, {a, b}, [a, b, q](const Node& out) {
        detail::push(a, out.grad.cwiseQuotient(b.value()));
        detail::push(b, -out.grad.cwiseProduct(q).cwiseQuotient(b.value()));
    });
}

inline Var scale(const Var& a, double s) {
    return detail::make_result(a.value() * s, {a},
                               [a, s](const Node& out) { detail::push(a, out.grad * s); });
}

inline Var add_scalar(const Var& a, double s) {
    Matrix v = a.value().array() + s;
    return detail::make_result(std::move(v), {a},
                               [a](const Node& out) { detail::push(a, out.grad); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: row must be 1 x cols(a)");
    }
    Matrix v = a.value().rowwise() + row.value().row(0);
    return detail::make_result(std::move(v), {a, row}, [a, row](const Node& out) {
        detail::push(a, out.grad);
        detail::push(row, out.grad.colwise().sum());
    });
}

/// a (n x m) elementwise-times row (1 x m) broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("mul_row: row must be 1 x cols(a)");
    }
    Matrix v = a.value().array().rowwise() * row.value().row(0).array();
    return detail::make_result(std::move(v), {a, row}, [a, row](const Node& out) {
        Matrix ga = out.grad.array().rowwise() * row.value().row(0).array();
        detail::push(a, ga);
        detail::push(row, out.grad.cwiseProduct(a.value()).colwise().sum());
    });
}

/// a (n x m) elementwise-times col (n x 1) broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw std::invalid_argument("mul_col: col must be rows(a) x 1");
    }
    Matrix v = a.value().array().colwise() * col.value().col(0).array();
    return detail::make_result(std::move(v), {a, col}, [a, col](const Node& out) {
        Matrix ga = out.grad.array().colwise() * col.value().col(0).array();
        detail::push(a, ga);
        detail::push(col, out.grad.cwiseProduct(a.value()).rowwise().sum());
    });
}

/// a (n x m) + col (n x 1) broadcast over columns.
inline Var add_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw std::invalid_argument("add_col: col must be rows(a) x 1");
    }
    Matrix v = a.value().colwise() + col.value().col(0);
    return detail::make_result(std::move(v), {a, col}, [a, col](const Node& out) {
        detail::push(a, out.grad);
        detail::push(col, out.grad.rowwise().sum());
    });
}

// ---- elementwise nonlinearities ------------------------------------------

namespace detail {

template <class F, class D>
Var unary(const Var& a, F f, D df) {
    Matrix v = a.value().unaryExpr(f);
    return make_result(v, {a}, [a, v, df](const Node& out) {
        Matrix local = a.value().binaryExpr(v, df);
        push(a, out.grad.cwiseProduct(local));
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

inline Var exp(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var elu(const Var& a) {
    return detail::unary(
        a, [](double x) { return x > 0 ? x : std::expm1(x); },
        [](double x, double y) { return x > 0 ? 1.0 : y + 1.0; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a, [](double x) { return detail::stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
    return detail::unary(
        a, [](double x) { return detail::stable_softplus(x); },
        [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Var tanh(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// log(clamp(sigmoid(x), lo, 1 - lo)); zero gradient where the clamp is active.
inline Var log_sigmoid_clamped(const Var& a, double lo) {
    const double hi = 1.0 - lo;
    return detail::unary(
        a,
        [lo, hi](double x) { return std::log(std::clamp(detail::stable_sigmoid(x), lo, hi)); },
        [lo, hi](double x, double) {
            const double s = detail::stable_sigmoid(x);
            return (s < lo || s > hi) ? 0.0 : 1.0 - s;
        });
}

// ---- reductions and reshaping --------------------------------------------

inline Var sum(const Var& a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    const auto r = a.rows();
    const auto c = a.cols();
    return detail::make_result(std::move(v), {a}, [a, r, c](const Node& out) {
        detail::push(a, Matrix::Constant(r, c, out.grad(0, 0)));
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var row_sum(const Var& a) {
    Matrix v = a.value().rowwise().sum();
    const auto c = a.cols();
    return detail::make_result(std::move(v), {a}, [a, c](const Node& out) {
        detail::push(a, out.grad.replicate(1, c));
    });
}

inline Var col_mean(const Var& a) {
    Matrix v = a.value().colwise().mean();
    const auto r = a.rows();
    return detail::make_result(std::move(v), {a}, [a, r](const Node& out) {
        detail::push(a, out.grad.replicate(r, 1) / static_cast<double>(r));
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no inputs");
    }
    const auto r = parts.front().rows();
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) {
            throw std::invalid_argument("concat_cols: row mismatch");
        }
        total += p.cols();
    }
    Matrix v(r, total);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return detail::make_result(std::move(v), parts, [parts](const Node& out) {
        Eigen::Index o = 0;
        for (const auto& p : parts) {
            detail::push(p, out.grad.middleCols(o, p.cols()));
            o += p.cols();
        }
    });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw std::invalid_argument("slice_cols: range out of bounds");
    }
    Matrix v = a.value().middleCols(start, count);
    const auto r = a.rows();
    const auto c = a.cols();
    return detail::make_result(std::move(v), {a}, [a, start, count, r, c](const Node& out) {
        Matrix g = Matrix::Zero(r, c);
        g.middleCols(start, count) = out.grad;
        detail::push(a, g);
    });
}

inline Var gather_rows(const Var& a, std::span<const Eigen::Index> index) {
    Matrix v(static_cast<Eigen::Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= a.rows()) {
            throw std::out_of_range("gather_rows: index out of range");
        }
        v.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
    }
    std::vector<Eigen::Index> idx(index.begin(), index.end());
    const auto r = a.rows();
    const auto c = a.cols();
    return detail::make_result(std::move(v), {a}, [a, idx, r, c](const Node& out) {
        Matrix g = Matrix::Zero(r, c);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            g.row(idx[i]) += out.grad.row(static_cast<Eigen::Index>(i));
        }
        detail::push(a, g);
    });
}

/// Row-wise softmax.
inline Var softmax_rows(const Var& a) {
    Matrix v = a.value();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double mx = v.row(i).maxCoeff();
        v.row(i) = (v.row(i).array() - mx).exp();
        v.row(i) /= v.row(i).sum();
    }
    return detail::make_result(v, {a}, [a, v](const Node& out) {
        Eigen::VectorXd inner = out.grad.cwiseProduct(v).rowwise().sum();
        Matrix g = v.cwiseProduct(out.grad.colwise() - inner);
        detail::push(a, g);
    });
}

/// Pairwise squared euclidean distances between rows of a (n x m) and b (p x m).
inline Var pairwise_sq_dist(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("pairwise_sq_dist: width mismatch");
    }
    const Eigen::VectorXd an = a.value().rowwise().squaredNorm();
    const Eigen::VectorXd bn = b.value().rowwise().squaredNorm();
    Matrix v = -2.0 * a.value() * b.value().transpose();
    v.colwise() += an;
    v.rowwise() += bn.transpose();
    return detail::make_result(std::move(v), {a, b}, [a, b](const Node& out) {
        const Matrix& g = out.grad;
        Matrix ga = 2.0 * (a.value().array().colwise() * g.rowwise().sum().array()).matrix() -
                    2.0 * g * b.value();
        Matrix gb = 2.0 * (b.value().array().colwise() * g.colwise().sum().transpose().array())
                              .matrix() -
                    2.0 * g.transpose() * a.value();
        detail::push(a, ga);
        detail::push(b, gb);
    });
}

/// Returns a copy of the value detached from the graph.
inline Var detach(const Var& a) { return Var(a.value(), false); }

// ---- optimizer ------------------------------------------------------------

/// Adaptive-moment first-order optimizer.
class Adam {
public:
    struct Options {
        double learning_rate = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
    };

    Adam(std::vector<Var> params, Options options) : params_(std::move(params)), opt_(options) {
        for (const auto& p : params_) {
            m_.push_back(Matrix::Zero(p.rows(), p.cols()));
            v_.push_back(Matrix::Zero(p.rows(), p.cols()));
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) {
                continue;
            }
            const Matrix& g = p.grad();
            m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
            v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
            Matrix mhat = m_[i] / c1;
            Matrix vhat = v_[i] / c2;
            p.mutable_value() -= opt_.learning_rate *
                                 mhat.cwiseQuotient((vhat.array().sqrt() + opt_.epsilon).matrix());
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.zero_grad();
        }
    }

    [[nodiscard]] long steps() const { return t_; }
    [[nodiscard]] const std::vector<Var>& params() const { return params_; }

private:
    std::vector<Var> params_;
    Options opt_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long t_ = 0;
};

}  // namespace cider::ad
