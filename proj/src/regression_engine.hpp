#pragma once

#include <span>
#include <vector>

#include "density_engine.hpp"
#include "matrix.hpp"

namespace martpost {

enum class RegressionMode { Joint, Conditional };

// Copula-based conditional inference. Joint mode models the full (x, y) joint
// with the response ordered last so the conditional stays tractable;
// conditional mode updates p(y|x) directly with covariate-dependent step sizes
// built from fixed Phi transforms of the standardized covariates (the
// covariate distribution itself is never modelled).
struct RegressionFit {
    RegressionMode mode = RegressionMode::Conditional;
    int d = 0; // covariate count
    long n = 0;

    // Joint mode: multivariate fit on [x..., y], response last.
    FitState base;

    // Conditional mode state. Covariates are always standardized (required by
    // the fixed-transform distance); the response is standardized per config.
    CopulaConfig config; // rho = per-covariate bandwidths, rho_y the response one
    Standardization x_std;
    Standardization y_std;
    InitialDensity init_y;
    std::vector<double> init_beta;
    Matrix train_x;              // n x d standardized, input row order
    std::vector<double> train_y; // standardized
    std::vector<std::vector<int>> perms;
    Matrix r_history;  // M x n: P_i(y_{i+1} | x_{i+1}) at absorption
    Matrix zr_history; // cached quantiles
    std::vector<double> preq_scores; // conditional log score per permutation

    long permutation_count() const;
    std::vector<double> internal_x(std::span<const double> x) const;

    // prod_j c_rho_j(Phi(a_j), Phi(b_j)) for standardized covariate vectors;
    // the Phi/quantile pair cancels, so the kernel works on raw z values.
    double covariate_kernel(std::span<const double> a, std::span<const double> b) const;
};

// Binary classifier sharing the regression machinery; the Gaussian response
// copula is replaced by the beta-Bernoulli factor and the tracked state is the
// class-1 probability.
struct ClassifierFit {
    RegressionMode mode = RegressionMode::Conditional;
    int d = 0;
    long n = 0;

    CopulaConfig config;
    Standardization x_std;
    Matrix train_x;
    std::vector<int> labels; // 0/1
    std::vector<std::vector<int>> perms;
    FitState x_fit;     // joint mode only: multivariate fit on the covariates
    Matrix pi_history;  // M x n: p_i(y = 1 | x_{i+1}) at absorption
    std::vector<double> preq_scores;

    long permutation_count() const;
    std::vector<double> internal_x(std::span<const double> x) const;
    double covariate_kernel(std::span<const double> a, std::span<const double> b) const;
};

RegressionFit fit_joint_regression(const Matrix& x, std::span<const double> y, CopulaConfig config);
RegressionFit fit_conditional_regression(const Matrix& x, std::span<const double> y,
                                         CopulaConfig config);
ClassifierFit fit_classifier(const Matrix& x, std::span<const int> labels, CopulaConfig config,
                             RegressionMode mode);

// Permutation-averaged p_n(y | x) on the original scale.
double eval_conditional_density(const RegressionFit& fit, std::span<const double> x, double y);
// Matching conditional CDF P_n(y | x) (mixture-coherent with the density).
double eval_conditional_cdf(const RegressionFit& fit, std::span<const double> x, double y);
// Permutation-averaged p_n(y = 1 | x).
double eval_class_prob(const ClassifierFit& fit, std::span<const double> x);

double prequential_loglik(const RegressionFit& fit);
double prequential_loglik(const ClassifierFit& fit);

// Covariate-dependent step size alpha_i(x, x') given the base alpha and the
// covariate kernel product K.
inline double covariate_alpha(double alpha, double K) {
    return alpha * K / (1.0 - alpha + alpha * K);
}

} // namespace martpost
