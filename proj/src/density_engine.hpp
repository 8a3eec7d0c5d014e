#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "matrix.hpp"
#include "special_math.hpp"

namespace martpost {

// Per-dimension location/scale removed before fitting and restored (with the
// 1/prod(sd) Jacobian on densities) on output. Population (1/n) variance.
struct Standardization {
    std::vector<double> mean;
    std::vector<double> sd;

    double to_internal(double y, int j) const { return (y - mean[j]) / sd[j]; }
    double to_original(double z, int j) const { return mean[j] + sd[j] * z; }
    double log_jacobian() const; // -sum_j log sd_j
};

// Starting predictive p_0, a product of per-dimension normals on the internal
// (standardized) scale. Default is the standard normal in every dimension.
struct InitialDensity {
    enum class Kind { StandardNormalProduct, UserNormal };

    Kind kind = Kind::StandardNormalProduct;
    std::vector<double> mean; // per dimension, UserNormal only
    std::vector<double> sd;

    double log_pdf(int j, double z) const;
    double cdf(int j, double z) const;
    double quantile(int j, double u) const;
    void validate(int d) const;
};

struct CopulaConfig {
    std::vector<double> rho;  // bandwidth per dimension; a single value broadcasts
    double rho_y = 0.0;       // response bandwidth, regression/classification only
    AlphaSchedule alpha;
    InitialDensity init;
    int permutations = 10; // M
    std::uint64_t seed = 0;

    bool standardize = true;
    std::vector<int> dim_order; // optional column permutation; empty = input order

    // Conditional regression only: initial conditional mean beta^T x on the
    // standardized scales, i.e. p_0(y|x) = N(beta^T x, 1). Empty = N(0,1).
    std::vector<double> init_beta;

    // Optional per-step overrides. alpha_seq[i-1] replaces alpha_i (values in
    // (0,1]); rho_seq[j][i-1] replaces rho_j at step i. Steps beyond the end of
    // a sequence fall back to the schedule / fixed rho. These let the engine
    // reproduce conjugate predictive sequences exactly, e.g. the normal
    // location model where alpha_i = 1 and rho_i = 1/(i+1).
    std::vector<double> alpha_seq;
    std::vector<std::vector<double>> rho_seq;

    double alpha_at(long i) const;
    double rho_at(int j, long i) const;
    void validate_common() const;
};

// Immutable fitted state. All matrices live on the internal scale with columns
// already in `ordering` order; row order of `train` is the input order, with
// per-permutation row index vectors in `perms`. v_history[m](i, j) is
// P_i(y^j | y^{1:j-1}) evaluated at the (i+1)-th point of permutation m, i.e.
// the conditional CDF seen just before that point is absorbed.
struct FitState {
    CopulaConfig config; // rho / rho_seq / init resolved into ordered-dim space
    Standardization standardization; // ordered dims
    InitialDensity init;             // ordered dims, resolved
    std::vector<int> ordering;

    Matrix train; // n x d internal scale
    long n = 0;
    int d = 0;

    std::vector<std::vector<int>> perms;
    std::vector<Matrix> v_history;  // per permutation, n x d
    std::vector<Matrix> zv_history; // cached normal quantiles of v_history
    std::vector<double> preq_scores; // per permutation, original scale

    long permutation_count() const { return static_cast<long>(perms.size()); }

    // Internal coordinates (standardized, ordered) of a user-space point.
    std::vector<double> internal_point(std::span<const double> point) const;

    double alpha_at(long i) const { return config.alpha_at(i); }
};

FitState fit_univariate(std::span<const double> data, CopulaConfig config);
FitState fit_multivariate(const Matrix& data, CopulaConfig config);

std::vector<std::vector<int>> draw_permutations(long n, int M, std::uint64_t seed);

// Fit with caller-chosen row permutations (first fit path above uses the
// identity plus seeded shuffles). Exposed for exhaustive-permutation checks.
FitState fit_multivariate_with_perms(const Matrix& data, CopulaConfig config,
                                     std::vector<std::vector<int>> perms);

// Legal degenerate fit with no observations; evaluation returns the prior.
FitState prior_fit(CopulaConfig config, int d);

// Permutation-averaged density at a user-space point, original scale.
double eval_density(const FitState& fit, std::span<const double> point);
std::vector<double> eval_density_batch(const FitState& fit, const Matrix& points);

// u_n^{1:d}: conditional CDFs P_n(y^j | y^{1:j-1}) at the point, averaged over
// permutations as the exact conditionals of the permutation-averaged density
// (density-weighted mixture; plain average when d = 1). Ordered-dim indexing.
std::vector<double> eval_cdf_conditionals(const FitState& fit, std::span<const double> point);

// Mean over permutations of sum_i log p_{i-1}(y_i), original scale.
double prequential_loglik(const FitState& fit);

// --- internals shared with the regression and resampling layers -----------

// One multivariate copula update of a point's conditional-CDF state. zv holds
// the quantiles of the new observation's conditional CDFs, rho the per-dim
// bandwidths for this step. Updates u in place and adds the log marginal
// factors log(1 - alpha + alpha * prod_{j<=k} c_j) into logp_prefix[k], k=1..d
// (logp_prefix has d+1 slots, slot 0 stays 0).
void mv_update_prefix(std::span<double> u, std::span<double> logp_prefix,
                      const double* zv, const double* rho, int d, double alpha);

// Same update when only the full-density factor is needed; returns its log.
// F_out, when given, receives the full copula product prod_j c_j.
double mv_update_full(std::span<double> u, const double* zv, const double* rho, int d,
                      double alpha, double* F_out = nullptr);

// State of one point propagated through every update of one permutation.
struct Propagation {
    std::vector<double> u;           // d conditional CDFs
    std::vector<double> logp_prefix; // d+1 prefix log densities, internal scale
};

Propagation propagate_point_perm(const FitState& fit, long m, std::span<const double> zpoint);

} // namespace martpost
