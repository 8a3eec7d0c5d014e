#pragma once

#include <cmath>
#include <cstdint>

#include "errors.hpp"

namespace martpost {

// Probabilities fed to the normal quantile are clamped to [eps, 1-eps];
// propagated CDF values and resampled uniforms can reach 0/1 in floating point.
inline constexpr double kProbEps = 1e-10;

// Ceiling on the Gaussian copula density; near-duplicate observations at tight
// bandwidths would otherwise overflow the update products.
inline constexpr double kCopulaCeiling = 1e6;

inline constexpr double kInvSqrt2Pi = 0.39894228040143267794; // 1/sqrt(2*pi)

inline double clamp_prob(double u) {
    if (u < kProbEps) return kProbEps;
    if (u > 1.0 - kProbEps) return 1.0 - kProbEps;
    return u;
}

inline double norm_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

inline double norm_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

// Inverse standard normal CDF, algorithm AS241 (Wichura 1988), |error| ~ 1e-15.
// Arguments outside [0,1] are a domain error; interior arguments are clamped
// to [kProbEps, 1-kProbEps] before inversion.
double norm_quantile(double p);

// Validated bandwidth for the bivariate Gaussian copula; the open interval is
// strict, boundary values are rejected.
struct Bandwidth {
    double value;

    explicit Bandwidth(double rho) : value(rho) {
        if (!(rho > 0.0 && rho < 1.0))
            throw UsageError("bandwidth rho must lie strictly inside (0,1), got " + std::to_string(rho));
    }
};

inline void check_rho(double rho) {
    if (!(rho > 0.0 && rho < 1.0))
        throw UsageError("bandwidth rho must lie strictly inside (0,1), got " + std::to_string(rho));
}

// Step-size sequence for the predictive update.
//   paper_default:   alpha_i = (2 - 1/i) / (i+1)
//   scaled_harmonic: alpha_i = a / (i+1)
struct AlphaSchedule {
    enum class Form { PaperDefault, ScaledHarmonic };

    Form form = Form::PaperDefault;
    double a = 0.0; // only for ScaledHarmonic; must keep alpha_i in (0,1)

    double at(long i) const {
        if (i < 1) throw UsageError("alpha schedule index must be >= 1");
        const double di = static_cast<double>(i);
        if (form == Form::PaperDefault) return (2.0 - 1.0 / di) / (di + 1.0);
        return a / (di + 1.0);
    }

    void validate() const {
        if (form == Form::ScaledHarmonic && !(a > 0.0 && a < 2.0))
            throw UsageError("scaled_harmonic schedule needs a in (0,2), got " + std::to_string(a));
    }
};

// --- Bivariate Gaussian copula kernels ------------------------------------
//
// c_rho(u,v) = N2(zu, zv | 0, 1, rho) / (phi(zu) phi(zv)),  zu = Phi^{-1}(u)
// H_rho(u,v) = Phi{ (zu - rho zv) / sqrt(1 - rho^2) }
//
// The _z variants take precomputed quantiles; update loops reuse zv across an
// entire grid sweep.

inline double copula_density_z(double zu, double zv, double rho, double ceiling = kCopulaCeiling) {
    const double r2 = rho * rho;
    const double omr2 = 1.0 - r2;
    const double q = (r2 * (zu * zu + zv * zv) - 2.0 * rho * zu * zv) / (2.0 * omr2);
    const double c = std::exp(-q) / std::sqrt(omr2);
    return c < ceiling ? c : ceiling;
}

inline double copula_conditional_cdf_z(double zu, double zv, double rho) {
    return norm_cdf((zu - rho * zv) / std::sqrt(1.0 - rho * rho));
}

inline double copula_density(double u, double v, double rho, double ceiling = kCopulaCeiling) {
    check_rho(rho);
    return copula_density_z(norm_quantile(u), norm_quantile(v), rho, ceiling);
}

inline double copula_conditional_cdf(double u, double v, double rho) {
    check_rho(rho);
    return copula_conditional_cdf_z(norm_quantile(u), norm_quantile(v), rho);
}

// q_rho(u) = int_0^1 c_rho(u,v)^2 dv = exp{rho^2/(1+rho^2) * zu^2} / sqrt(1-rho^4)
inline double copula_sq_integral(double u, double rho) {
    check_rho(rho);
    const double zu = norm_quantile(u);
    const double r2 = rho * rho;
    return std::exp(r2 / (1.0 + r2) * zu * zu) / std::sqrt(1.0 - r2 * r2);
}

// Beta-Bernoulli copula update factor for binary classification. q is the
// predictive probability of the class being evaluated, r the probability of
// the observed class at the new point. Mixture of the independence copula and
// the Frechet-Hoeffding bound; preserves sum-to-one across the two classes.
inline double bernoulli_copula(double q, double r, bool same_class, double rho) {
    check_rho(rho);
    if (!(q > 0.0 && q < 1.0) || !(r > 0.0 && r < 1.0))
        throw UsageError("bernoulli_copula needs q, r strictly inside (0,1)");
    if (same_class) return 1.0 - rho + rho * std::min(q, r) / (q * r);
    return 1.0 - rho + rho * (q - std::min(q, 1.0 - r)) / (q * r);
}

// Unvalidated variant for inner loops (q, r already clamped by the caller).
inline double bernoulli_copula_fast(double q, double r, bool same_class, double rho) {
    if (same_class) return 1.0 - rho + rho * std::min(q, r) / (q * r);
    return 1.0 - rho + rho * (q - std::min(q, 1.0 - r)) / (q * r);
}

} // namespace martpost
