#pragma once

// Composite objective and ablation masks.

#include <cctype>
#include <cmath>
#include <string>

#include "cider/autodiff.hpp"
#include "cider/errors.hpp"

namespace cider::objective {

using ad::Matrix;
using ad::Var;

inline constexpr double kProbabilityClamp = 1e-7;

enum class Variant { full, a, b, c, d, e };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::a: return "A";
        case Variant::b: return "B";
        case Variant::c: return "C";
        case Variant::d: return "D";
        case Variant::e: return "E";
    }
    return "?";
}

inline Variant parse_variant(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "full" || s == "cider") return Variant::full;
    if (s == "a") return Variant::a;
    if (s == "b") return Variant::b;
    if (s == "c") return Variant::c;
    if (s == "d") return Variant::d;
    if (s == "e") return Variant::e;
    throw ConfigError("unknown variant '" + s + "' (expected full, A, B, C, D or E)");
}

/// Which parts of the model contribute to training and inference.
struct ComponentMask {
    bool shallow_cpa = false;    // centroids on the shallow block
    bool deep_cpa = false;       // separate centroids on the deep block (variant C)
    bool mmd = false;            // MMD on both blocks (variant B)
    bool decomposition = false;  // stable / variant heads and reparameterization
    bool flow = false;           // flow likelihood linking the variant latents
    bool hierarchy = true;       // false: the deep path covers the whole representation

    friend bool operator==(const ComponentMask&, const ComponentMask&) = default;
};

inline ComponentMask select_variant(Variant v) {
    ComponentMask m;
    switch (v) {
        case Variant::a: break;
        case Variant::b: m.mmd = true; break;
        case Variant::c: m.shallow_cpa = m.deep_cpa = true; break;
        case Variant::d: m.shallow_cpa = m.decomposition = true; break;
        case Variant::e:
            m.decomposition = m.flow = true;
            m.hierarchy = false;
            break;
        case Variant::full: m.shallow_cpa = m.decomposition = m.flow = true; break;
    }
    return m;
}

struct LossWeights {
    double shallow = 1.0;  // lambda_s
    double deep = 1.0;     // lambda_d

    void validate() const {
        if (!(shallow >= 0) || !(deep >= 0)) throw ConfigError("loss weights must be >= 0");
    }
};

struct LossBreakdown {
    double shallow = 0.0;  // L_s
    double deep = 0.0;     // L_d
    double vib_x = 0.0;
    double vib_y = 0.0;
    double total = 0.0;

    [[nodiscard]] double recompute(const LossWeights& w) const {
        return w.shallow * shallow + w.deep * deep - vib_x - vib_y;
    }
};

/// Mean over rows of log sigma(<V, D>) + log(1 - sigma(<Vbar, D>)), with
/// probabilities clamped to [1e-7, 1 - 1e-7]. Each row of `reconstructed`
/// pairs with the same row of `positives` and `negatives`.
inline Var vib_bound(const Var& reconstructed, const Var& positives, const Var& negatives) {
    if (reconstructed.rows() < 1) throw ContractError("vib_bound: empty batch");
    if (positives.rows() != reconstructed.rows() || negatives.rows() != reconstructed.rows() ||
        positives.cols() != reconstructed.cols() || negatives.cols() != reconstructed.cols()) {
        throw ContractError("vib_bound: every user row needs one positive and one negative of matching width");
    }
    const Var pos = ad::row_sum(ad::mul(reconstructed, positives));
    const Var neg = ad::row_sum(ad::mul(reconstructed, negatives));
    return ad::mean(ad::log_sigmoid_clamped(pos, kProbabilityClamp) +
                    ad::log_sigmoid_clamped(ad::neg(neg), kProbabilityClamp));
}

struct Objective {
    Var total;
    LossBreakdown breakdown;
};

/// total = lambda_s L_s + lambda_d L_d - vib_x - vib_y. Absent terms are
/// passed as null Vars and count as zero.
inline Objective total_loss(const Var& shallow, const Var& deep, const Var& vib_x, const Var& vib_y,
                            const LossWeights& w) {
    Objective o;
    auto value = [](const Var& v, const char* name) {
        if (!v.defined()) return 0.0;
        const double x = v.item();
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite loss component ") + name);
        return x;
    };
    o.breakdown.shallow = value(shallow, "L_s");
    o.breakdown.deep = value(deep, "L_d");
    o.breakdown.vib_x = value(vib_x, "vib_x");
    o.breakdown.vib_y = value(vib_y, "vib_y");
    Var total(Matrix::Zero(1, 1));
    if (shallow.defined() && w.shallow != 0.0) total = total + ad::scale(shallow, w.shallow);
    if (deep.defined() && w.deep != 0.0) total = total + ad::scale(deep, w.deep);
    if (vib_x.defined()) total = total - vib_x;
    if (vib_y.defined()) total = total - vib_y;
    o.total = total;
    o.breakdown.total = total.item();
    if (std::abs(o.breakdown.total - o.breakdown.recompute(w)) > 1e-10 * std::max(1.0, std::abs(o.breakdown.total))) {
        throw NumericError("loss breakdown does not add up to the total");
    }
    return o;
}

}  // namespace cider::objective
