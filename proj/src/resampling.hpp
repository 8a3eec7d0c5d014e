#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "density_engine.hpp"
#include "matrix.hpp"
#include "regression_engine.hpp"

namespace martpost {

// Evaluation grid mutated in place while forward sampling (univariate case).
struct GridState {
    std::vector<double> grid; // strictly increasing
    std::vector<double> p;
    std::vector<double> P;
    long step = 0;
};

// One predictive update of the whole grid given the uniform draw (or observed
// conditional CDF value) v.
void apply_copula_step(GridState& gs, double alpha, double v, double rho);

struct ResampleConfig {
    long forward_steps = 5000; // N - n
    long ensemble_size = 1000; // B
    std::uint64_t master_seed = 0;
    bool record_trace = false;
    long trace_stride = 50;
};

struct TraceRow {
    long trajectory;
    long step;
    double l1_p;
    double l1_P;
};

enum class EnsembleKind { UnivariateGrid, MultivariateProbes, RegressionProbes, ClassifierProbes,
                          Statistics };

// Terminal states (or statistic draws) of B independent trajectories.
// Reproducible bit-for-bit from (fit, config): trajectory b always runs on the
// RNG substream derived from (master_seed, b) whatever the thread count.
struct Ensemble {
    EnsembleKind kind = EnsembleKind::UnivariateGrid;
    ResampleConfig config;

    std::vector<double> grid;   // univariate grid, or regression y-grid
    Matrix probes;              // multivariate / regression / classifier x-probes
    int d = 1;
    long nodes = 0;

    std::vector<double> p0; // initial densities per node
    std::vector<double> P0; // initial CDF-like values per node
    Matrix p;               // B x nodes terminal densities
    Matrix P;               // B x nodes terminal CDF-like values (P, u^1, q, or pi)
    std::vector<double> stats; // B statistic draws (bootstraps)
    std::vector<std::uint64_t> trajectory_seeds;
    std::vector<TraceRow> trace;
};

// Default evaluation grid: `size` even points spanning the standardized data
// mean +/- span_sd standard deviations, mapped back to the original scale.
std::vector<double> default_grid(const FitState& fit, long size = 200, double span_sd = 4.0);

Ensemble resample_univariate(const FitState& fit, std::vector<double> grid,
                             const ResampleConfig& cfg);
// Probe rows are points in the original (user) space. Tracked per node: the
// joint density and the first-ordered-dimension conditional CDFs u^{1:d}
// (P column stores u^1, the dim-1 marginal CDF).
Ensemble resample_multivariate(const FitState& fit, const Matrix& probes,
                               const ResampleConfig& cfg);
// Conditional mode draws future covariates by Polya-urn resampling of the
// observed rows; joint mode forward-samples the full joint.
Ensemble resample_regression(const RegressionFit& fit, const Matrix& x_probes,
                             std::vector<double> y_grid, const ResampleConfig& cfg);
// Conditional-mode classifier only (urn covariates, sampled binary responses).
Ensemble resample_classifier(const ClassifierFit& fit, const Matrix& x_probes,
                             const ResampleConfig& cfg);

// --- statistics ------------------------------------------------------------

struct StatisticSpec {
    enum class Kind { Mean, Variance, Quantile, Modes, LossMin };
    Kind kind = Kind::Mean;
    double tau = 0.5; // Quantile only
    // LossMin: theta minimizing sum_i w_i * loss(theta, y_i) (golden section
    // over the data range). Only constructible programmatically.
    std::function<double(double, double)> loss;

    // "mean" | "var" | "variance" | "quantile:TAU" | "modes"
    static StatisticSpec parse(const std::string& text);
    std::string name() const;
};

// Dirichlet(1,...,1) weights via normalized standard exponentials.
std::vector<double> dirichlet_weights(long n, RngStream& rng);

std::vector<double> bayesian_bootstrap(std::span<const double> data, const StatisticSpec& spec,
                                       long B, std::uint64_t seed);
std::vector<double> efron_bootstrap(std::span<const double> data, const StatisticSpec& spec,
                                    long B, std::uint64_t seed);
Ensemble bootstrap_ensemble(std::span<const double> data, const StatisticSpec& spec, long B,
                            std::uint64_t seed, bool bayes);

// Per-trajectory statistics of a univariate grid ensemble (trapezoid moments,
// interpolated quantiles, strict-local-maximum mode counts).
std::vector<double> extract_statistics(const Ensemble& ens, const StatisticSpec& spec);

double trapezoid(std::span<const double> x, std::span<const double> y);
double l1_distance(std::span<const double> grid, std::span<const double> a,
                   std::span<const double> b);
long count_modes(std::span<const double> p);
double grid_quantile(std::span<const double> grid, std::span<const double> P, double tau);

// --- inverse-transform sampling ---------------------------------------------

// Solves P(y) = u on the piecewise-linear grid CDF.
double inverse_cdf_sample(const GridState& gs, double u);
// Sequential conditional chain P(y^j | y^{1:j-1}) = u^j by bracketed bisection
// (|P - u| < 1e-8, bracket expanded up to +/-12 internal sd).
std::vector<double> inverse_cdf_sample(const FitState& fit, std::span<const double> u);

// --- concentration check ------------------------------------------------------

struct ConcentrationConfig {
    long history_steps = 5000;  // absolute step count N (>= fit n)
    long continuation = 1000;   // M - N
    long trajectories = 5000;
    std::vector<double> epsilons = {0.02, 0.05, 0.1};
    std::uint64_t seed = 0;
    std::vector<double> probe; // probe point (density fits: y; regression: x then y)
};

struct ConcentrationRow {
    double epsilon;
    double empirical;
    double bound;
    bool within;
};

struct ConcentrationReport {
    long trajectories = 0;
    long history_steps = 0;
    long continuation = 0;
    double constant_C = 1.0; // regression bound constant, 1 for density fits
    std::vector<ConcentrationRow> rows;
    bool all_within = true;
};

// Azuma/McDiarmid-style bound 2 exp{-eps^2 / (2 eps a_{N+1}/3 + 1/2 sum a_i^2)}
// for the density CDF martingale; regression variant scales by C(rho, x).
double concentration_bound(double epsilon, long N, long M,
                           const std::function<double(long)>& alpha_at, double C = 1.0);

ConcentrationReport concentration_check(const FitState& fit, const ConcentrationConfig& cfg);
ConcentrationReport concentration_check(const RegressionFit& fit, const ConcentrationConfig& cfg);

// Mean over nodes of the across-trajectory standard deviation of terminal
// densities; the posterior-spread summary used to compare sample sizes.
double mean_node_sd(const Ensemble& ens);

} // namespace martpost
