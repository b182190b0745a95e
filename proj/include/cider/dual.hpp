#pragma once

// Forward-mode dual numbers with a small fixed-capacity tangent vector. Used to
// differentiate per-element scalar kernels (spline and sigmoidal bijections)
// with respect to their inputs and their conditioner outputs.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>

namespace cider::ad {

template <int Capacity>
struct Dual {
    double v = 0.0;
    int n = 0;
    // Only the first n tangent slots are meaningful.
    std::array<double, Capacity> d;

    Dual() = default;
    Dual(double value, int width) : v(value), n(width) {
        assert(width <= Capacity);
        std::fill_n(d.begin(), width, 0.0);
    }
    static Dual variable(double value, int width, int slot) {
        Dual r(value, width);
        r.d[slot] = 1.0;
        return r;
    }
    Dual constant(double value) const { return Dual(value, n); }
    /// Tangent left unset; the caller writes all n slots.
    static Dual blank(double value, int width) {
        Dual r;
        r.v = value;
        r.n = width;
        return r;
    }
};

template <int C>
Dual<C> operator+(const Dual<C>& a, const Dual<C>& b) {
    auto r = Dual<C>::blank(a.v + b.v, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
}
template <int C>
Dual<C> operator-(const Dual<C>& a, const Dual<C>& b) {
    auto r = Dual<C>::blank(a.v - b.v, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
}
template <int C>
Dual<C> operator-(const Dual<C>& a) {
    auto r = Dual<C>::blank(-a.v, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = -a.d[i];
    return r;
}
template <int C>
Dual<C> operator*(const Dual<C>& a, const Dual<C>& b) {
    auto r = Dual<C>::blank(a.v * b.v, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
template <int C>
Dual<C> operator/(const Dual<C>& a, const Dual<C>& b) {
    auto r = Dual<C>::blank(a.v / b.v, a.n);
    const double inv = 1.0 / b.v;
    for (int i = 0; i < a.n; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
    return r;
}
template <int C>
Dual<C> operator+(const Dual<C>& a, double b) {
    Dual<C> r = a;
    r.v += b;
    return r;
}
template <int C>
Dual<C> operator+(double a, const Dual<C>& b) { return b + a; }
template <int C>
Dual<C> operator-(const Dual<C>& a, double b) { return a + (-b); }
template <int C>
Dual<C> operator-(double a, const Dual<C>& b) { return (-b) + a; }
template <int C>
Dual<C> operator*(const Dual<C>& a, double b) {
    auto r = Dual<C>::blank(a.v * b, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = a.d[i] * b;
    return r;
}
template <int C>
Dual<C> operator*(double a, const Dual<C>& b) { return b * a; }
template <int C>
Dual<C> operator/(const Dual<C>& a, double b) { return a * (1.0 / b); }
template <int C>
Dual<C> operator/(double a, const Dual<C>& b) { return b.constant(a) / b; }

namespace detail {
template <int C>
Dual<C> chain(const Dual<C>& a, double value, double slope) {
    auto r = Dual<C>::blank(value, a.n);
    for (int i = 0; i < a.n; ++i) r.d[i] = a.d[i] * slope;
    return r;
}
}  // namespace detail

template <int C>
Dual<C> exp(const Dual<C>& a) {
    const double e = std::exp(a.v);
    return detail::chain(a, e, e);
}
template <int C>
Dual<C> log(const Dual<C>& a) { return detail::chain(a, std::log(a.v), 1.0 / a.v); }
template <int C>
Dual<C> sqrt(const Dual<C>& a) {
    const double s = std::sqrt(a.v);
    return detail::chain(a, s, 0.5 / s);
}
template <int C>
Dual<C> tanh(const Dual<C>& a) {
    const double t = std::tanh(a.v);
    return detail::chain(a, t, 1.0 - t * t);
}
template <int C>
Dual<C> log1p(const Dual<C>& a) { return detail::chain(a, std::log1p(a.v), 1.0 / (1.0 + a.v)); }

template <int C>
double value_of(const Dual<C>& a) { return a.v; }
inline double value_of(double a) { return a; }

}  // namespace cider::ad
