#include "regression_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "errors.hpp"
#include "parallel.hpp"

namespace martpost {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

void check_xy(const Matrix& x, std::size_t ny, long need_rows) {
    if (need_rows < 1) throw DataError("empty dataset");
    if (x.rows() != 0 && x.rows() != need_rows)
        throw DataError("covariate and response row counts differ");
    if (static_cast<long>(ny) != need_rows) throw DataError("response length mismatch");
    for (long i = 0; i < x.rows(); ++i)
        for (long j = 0; j < x.cols(); ++j)
            if (!std::isfinite(x(i, j)))
                throw DataError("non-finite covariate at row " + std::to_string(i) + ", column " +
                                std::to_string(j));
}

Standardization standardize_columns(const Matrix& m, const char* what) {
    const long n = m.rows();
    const int d = static_cast<int>(m.cols());
    Standardization s;
    s.mean.assign(d, 0.0);
    s.sd.assign(d, 1.0);
    for (int j = 0; j < d; ++j) {
        double mu = 0.0;
        for (long i = 0; i < n; ++i) mu += m(i, j);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (long i = 0; i < n; ++i) var += (m(i, j) - mu) * (m(i, j) - mu);
        var /= static_cast<double>(n);
        s.mean[j] = mu;
        if (var > 0.0) {
            s.sd[j] = std::sqrt(var);
        } else if (n > 1) {
            throw DataError(std::string(what) + " column " + std::to_string(j) +
                            " is constant; cannot standardize");
        }
    }
    return s;
}

double kernel_product(std::span<const double> a, std::span<const double> b,
                      const std::vector<double>& rho) {
    double K = 1.0;
    for (std::size_t j = 0; j < rho.size(); ++j) K *= copula_density_z(a[j], b[j], rho[j]);
    return K;
}

// Initial response conditional: N(beta^T zx, 1) on the standardized scale,
// beta empty meaning the x-independent N(0,1) default.
double init_mu(const std::vector<double>& beta, std::span<const double> zx) {
    double mu = 0.0;
    for (std::size_t j = 0; j < beta.size(); ++j) mu += beta[j] * zx[j];
    return mu;
}

void validate_regression_config(const CopulaConfig& config, int d, bool need_x_rho) {
    config.validate_common();
    check_rho(config.rho_y);
    if (need_x_rho) {
        if (config.rho.empty()) throw UsageError("config.rho must provide covariate bandwidths");
        if (static_cast<int>(config.rho.size()) != 1 && static_cast<int>(config.rho.size()) != d)
            throw UsageError("config.rho needs one bandwidth (broadcast) or one per covariate");
        for (double r : config.rho) check_rho(r);
    }
    if (!config.init_beta.empty() && static_cast<int>(config.init_beta.size()) != d)
        throw UsageError("init_beta needs one coefficient per covariate");
}

std::vector<double> broadcast_rho(const CopulaConfig& config, int d) {
    std::vector<double> rho = config.rho;
    if (static_cast<int>(rho.size()) == 1 && d > 1) rho.assign(static_cast<std::size_t>(d), rho[0]);
    return rho;
}

} // namespace

long RegressionFit::permutation_count() const { return static_cast<long>(perms.size()); }
long ClassifierFit::permutation_count() const { return static_cast<long>(perms.size()); }

std::vector<double> RegressionFit::internal_x(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != d)
        throw UsageError("probe has " + std::to_string(x.size()) + " covariates, fit has " +
                         std::to_string(d));
    std::vector<double> z(d);
    for (int j = 0; j < d; ++j) z[j] = x_std.to_internal(x[j], j);
    return z;
}

std::vector<double> ClassifierFit::internal_x(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != d)
        throw UsageError("probe has " + std::to_string(x.size()) + " covariates, fit has " +
                         std::to_string(d));
    std::vector<double> z(d);
    for (int j = 0; j < d; ++j) z[j] = x_std.to_internal(x[j], j);
    return z;
}

double RegressionFit::covariate_kernel(std::span<const double> a, std::span<const double> b) const {
    return kernel_product(a, b, config.rho);
}

double ClassifierFit::covariate_kernel(std::span<const double> a, std::span<const double> b) const {
    return kernel_product(a, b, config.rho);
}

// --- conditional-mode regression -------------------------------------------

RegressionFit fit_conditional_regression(const Matrix& x, std::span<const double> y,
                                         CopulaConfig config) {
    const long n = static_cast<long>(y.size());
    const int d = static_cast<int>(x.cols());
    check_xy(x, y.size(), n);
    if (d < 1) throw UsageError("conditional regression needs at least one covariate");
    for (double v : y)
        if (!std::isfinite(v)) throw DataError("non-finite response value");
    validate_regression_config(config, d, true);
    config.rho = broadcast_rho(config, d);

    RegressionFit fit;
    fit.mode = RegressionMode::Conditional;
    fit.d = d;
    fit.n = n;
    fit.x_std = standardize_columns(x, "covariate");

    Matrix ymat(n, 1);
    for (long i = 0; i < n; ++i) ymat(i, 0) = y[i];
    fit.y_std = config.standardize ? standardize_columns(ymat, "response") : Standardization{{0.0}, {1.0}};

    fit.train_x = Matrix(n, d);
    for (long i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) fit.train_x(i, j) = fit.x_std.to_internal(x(i, j), j);
    fit.train_y.resize(n);
    for (long i = 0; i < n; ++i) fit.train_y[i] = fit.y_std.to_internal(y[i], 0);

    fit.init_y = config.init;
    fit.init_y.validate(1);
    fit.init_beta = config.init_beta;
    fit.config = std::move(config);

    const int M = fit.config.permutations;
    fit.perms = draw_permutations(n, M, fit.config.seed);
    fit.r_history = Matrix(M, n);
    fit.zr_history = Matrix(M, n);
    fit.preq_scores.assign(M, 0.0);

    // Pairwise covariate kernel; fixed transforms make it permutation-free.
    Matrix K(n, n);
    parallel_for(n, [&](long i) {
        for (long k = 0; k < n; ++k)
            K(i, k) = kernel_product(fit.train_x.row(i), fit.train_x.row(k), fit.config.rho);
    });

    const double rho_y = fit.config.rho_y;
    const double yjac = -std::log(fit.y_std.sd[0]);
    parallel_for(M, [&](long m) {
        const auto& perm = fit.perms[m];
        std::vector<double> q(n), logp(n);
        for (long k = 0; k < n; ++k) {
            const double mu = init_mu(fit.init_beta, fit.train_x.row(k));
            q[k] = clamp_prob(fit.init_y.cdf(0, fit.train_y[k] - mu));
            logp[k] = fit.init_y.log_pdf(0, fit.train_y[k] - mu);
        }
        double score = 0.0;
        for (long i = 0; i < n; ++i) {
            const long row = perm[i];
            const double r = clamp_prob(q[row]);
            fit.r_history(m, i) = r;
            const double zr = norm_quantile(r);
            fit.zr_history(m, i) = zr;
            score += logp[row];
            const double alpha = fit.config.alpha_at(i + 1);
            for (long pos = i + 1; pos < n; ++pos) {
                const long k = perm[pos];
                const double A = covariate_alpha(alpha, K(k, row));
                const double zq = norm_quantile(clamp_prob(q[k]));
                const double c = copula_density_z(zq, zr, rho_y);
                const double H = copula_conditional_cdf_z(zq, zr, rho_y);
                logp[k] += std::log(1.0 - A + A * c);
                q[k] = clamp_prob((1.0 - A) * q[k] + A * H);
            }
        }
        fit.preq_scores[m] = score + static_cast<double>(n) * yjac;
    });
    return fit;
}

// --- joint-mode regression ---------------------------------------------------

RegressionFit fit_joint_regression(const Matrix& x, std::span<const double> y,
                                   CopulaConfig config) {
    const long n = static_cast<long>(y.size());
    const int d = static_cast<int>(x.cols());
    check_xy(x, y.size(), n);
    validate_regression_config(config, d, d > 0);

    RegressionFit fit;
    fit.mode = RegressionMode::Joint;
    fit.d = d;
    fit.n = n;
    fit.config = config;

    // Response ordered last so the conditional of interest stays tractable.
    Matrix joint(n, d + 1);
    for (long i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) joint(i, j) = x(i, j);
        joint(i, d) = y[i];
    }
    CopulaConfig base_cfg = config;
    base_cfg.rho = d > 0 ? broadcast_rho(config, d) : std::vector<double>{};
    base_cfg.rho.push_back(config.rho_y);
    base_cfg.init_beta.clear();
    if (!config.dim_order.empty()) {
        if (static_cast<int>(config.dim_order.size()) != d)
            throw UsageError("dim_order for joint regression permutes the covariates only");
        base_cfg.dim_order = config.dim_order;
        base_cfg.dim_order.push_back(d);
    }
    fit.base = fit_multivariate(joint, base_cfg);

    // Prequential *conditional* score: replay each permutation and collect
    // log p_i(y_{i+1} | x_{i+1}) = log p_i(x_{i+1}, y_{i+1}) - log p_i(x_{i+1}).
    const long M = fit.base.permutation_count();
    fit.perms = fit.base.perms;
    fit.r_history = Matrix(M, n);
    fit.zr_history = Matrix(M, n);
    fit.preq_scores.assign(M, 0.0);
    const int dd = d + 1;
    const double yjac = -std::log(fit.base.standardization.sd[d]);
    parallel_for(M, [&](long m) {
        const auto& perm = fit.perms[m];
        Matrix u(n, dd);
        Matrix logp(n, dd + 1); // prefix logs per point
        for (long k = 0; k < n; ++k) {
            auto lrow = logp.row(k);
            lrow[0] = 0.0;
            for (int j = 0; j < dd; ++j) {
                const double z = fit.base.train(k, j);
                u(k, j) = clamp_prob(fit.base.init.cdf(j, z));
                lrow[j + 1] = lrow[j] + fit.base.init.log_pdf(j, z);
            }
        }
        std::vector<double> rho(dd);
        double score = 0.0;
        const Matrix& zvh = fit.base.zv_history[m];
        for (long i = 0; i < n; ++i) {
            const long row = perm[i];
            fit.r_history(m, i) = u(row, d);
            fit.zr_history(m, i) = norm_quantile(clamp_prob(u(row, d)));
            score += logp(row, dd) - logp(row, d);
            const double alpha = fit.base.config.alpha_at(i + 1);
            for (int j = 0; j < dd; ++j) rho[j] = fit.base.config.rho_at(j, i + 1);
            for (long pos = i + 1; pos < n; ++pos) {
                const long k = perm[pos];
                mv_update_prefix(u.row(k), logp.row(k), zvh.row(i).data(), rho.data(), dd, alpha);
            }
        }
        fit.preq_scores[m] = score + static_cast<double>(n) * yjac;
    });
    return fit;
}

// --- classification ----------------------------------------------------------

ClassifierFit fit_classifier(const Matrix& x, std::span<const int> labels, CopulaConfig config,
                             RegressionMode mode) {
    const long n = static_cast<long>(labels.size());
    check_xy(x, labels.size(), n);
    const int d = static_cast<int>(x.cols());
    if (d < 1) throw UsageError("classification needs at least one covariate");
    for (int v : labels)
        if (v != 0 && v != 1) throw DataError("labels must be binary (0/1)");
    validate_regression_config(config, d, true);
    config.rho = broadcast_rho(config, d);
    config.init_beta.clear();

    ClassifierFit fit;
    fit.mode = mode;
    fit.d = d;
    fit.n = n;
    fit.x_std = standardize_columns(x, "covariate");
    fit.train_x = Matrix(n, d);
    for (long i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) fit.train_x(i, j) = fit.x_std.to_internal(x(i, j), j);
    fit.labels.assign(labels.begin(), labels.end());
    fit.config = std::move(config);

    if (mode == RegressionMode::Joint) {
        CopulaConfig xcfg = fit.config;
        xcfg.rho_y = 0.0;
        fit.x_fit = fit_multivariate(x, xcfg);
        fit.perms = fit.x_fit.perms;
    } else {
        fit.perms = draw_permutations(n, fit.config.permutations, fit.config.seed);
    }

    const long M = static_cast<long>(fit.perms.size());
    fit.pi_history = Matrix(M, n);
    fit.preq_scores.assign(M, 0.0);

    Matrix K;
    if (mode == RegressionMode::Conditional) {
        K = Matrix(n, n);
        parallel_for(n, [&](long i) {
            for (long k = 0; k < n; ++k)
                K(i, k) = kernel_product(fit.train_x.row(i), fit.train_x.row(k), fit.config.rho);
        });
    }

    const double rho_y = fit.config.rho_y;
    parallel_for(M, [&](long m) {
        const auto& perm = fit.perms[m];
        std::vector<double> pi(n, 0.5); // uniform over the classes
        Matrix xu;
        std::vector<double> rho;
        if (mode == RegressionMode::Joint) {
            xu = Matrix(n, d);
            for (long k = 0; k < n; ++k)
                for (int j = 0; j < d; ++j)
                    xu(k, j) = clamp_prob(fit.x_fit.init.cdf(j, fit.x_fit.train(k, j)));
            rho.resize(d);
        }
        double score = 0.0;
        for (long i = 0; i < n; ++i) {
            const long row = perm[i];
            fit.pi_history(m, i) = pi[row];
            const bool y1 = fit.labels[row] == 1;
            const double r = clamp_prob(y1 ? pi[row] : 1.0 - pi[row]);
            score += std::log(r);
            const double alpha = fit.config.alpha_at(i + 1);
            if (mode == RegressionMode::Joint)
                for (int j = 0; j < d; ++j) rho[j] = fit.x_fit.config.rho_at(j, i + 1);
            const double* zv =
                mode == RegressionMode::Joint ? fit.x_fit.zv_history[m].row(i).data() : nullptr;
            for (long pos = i + 1; pos < n; ++pos) {
                const long k = perm[pos];
                double A;
                if (mode == RegressionMode::Conditional) {
                    A = covariate_alpha(alpha, K(k, row));
                } else {
                    double F = 1.0;
                    mv_update_full(xu.row(k), zv, rho.data(), d, alpha, &F);
                    A = covariate_alpha(alpha, F);
                }
                const double dfac = bernoulli_copula_fast(clamp_prob(pi[k]), r, y1, rho_y);
                pi[k] = clamp_prob((1.0 - A + A * dfac) * pi[k]);
            }
        }
        fit.preq_scores[m] = score;
    });
    return fit;
}

// --- evaluation ---------------------------------------------------------------

namespace {

// Propagates the response state at (x, y) through one permutation of a
// conditional-mode fit. Returns {q, logp} on the internal scale.
std::pair<double, double> propagate_conditional(const RegressionFit& fit, long m,
                                                std::span<const double> zx, double zy) {
    const double mu = init_mu(fit.init_beta, zx);
    double q = clamp_prob(fit.init_y.cdf(0, zy - mu));
    double logp = fit.init_y.log_pdf(0, zy - mu);
    const double rho_y = fit.config.rho_y;
    for (long i = 0; i < fit.n; ++i) {
        const long row = fit.perms[m][i];
        const double K = kernel_product(zx, fit.train_x.row(row), fit.config.rho);
        const double A = covariate_alpha(fit.config.alpha_at(i + 1), K);
        const double zr = fit.zr_history(m, i);
        const double zq = norm_quantile(clamp_prob(q));
        const double c = copula_density_z(zq, zr, rho_y);
        const double H = copula_conditional_cdf_z(zq, zr, rho_y);
        logp += std::log(1.0 - A + A * c);
        q = clamp_prob((1.0 - A) * q + A * H);
    }
    return {q, logp};
}

} // namespace

double eval_conditional_density(const RegressionFit& fit, std::span<const double> x, double y) {
    if (fit.mode == RegressionMode::Joint) {
        if (static_cast<int>(x.size()) != fit.d)
            throw UsageError("probe covariate dimension mismatch");
        std::vector<double> pt(fit.d + 1);
        for (int j = 0; j < fit.d; ++j) pt[j] = x[j];
        pt[fit.d] = y;
        const auto z = fit.base.internal_point(pt);
        const long M = fit.base.permutation_count();
        std::vector<Propagation> props;
        props.reserve(M);
        double shift = -1e300;
        for (long m = 0; m < M; ++m) {
            props.push_back(propagate_point_perm(fit.base, m, z));
            shift = std::max(shift, props.back().logp_prefix[fit.d]);
        }
        double joint_sum = 0.0, marg_sum = 0.0;
        for (const auto& prop : props) {
            joint_sum += std::exp(prop.logp_prefix[fit.d + 1] - shift);
            marg_sum += std::exp(prop.logp_prefix[fit.d] - shift);
        }
        return joint_sum / marg_sum / fit.base.standardization.sd[fit.d];
    }
    const auto zx = fit.internal_x(x);
    const double zy = fit.y_std.to_internal(y, 0);
    const long M = fit.permutation_count();
    double sum = 0.0;
    for (long m = 0; m < M; ++m) sum += std::exp(propagate_conditional(fit, m, zx, zy).second);
    return sum / static_cast<double>(M) / fit.y_std.sd[0];
}

double eval_conditional_cdf(const RegressionFit& fit, std::span<const double> x, double y) {
    if (fit.mode == RegressionMode::Joint) {
        std::vector<double> pt(fit.d + 1);
        for (int j = 0; j < fit.d; ++j) pt[j] = x[j];
        pt[fit.d] = y;
        const auto z = fit.base.internal_point(pt);
        const long M = fit.base.permutation_count();
        std::vector<Propagation> props;
        props.reserve(M);
        double shift = -1e300;
        for (long m = 0; m < M; ++m) {
            props.push_back(propagate_point_perm(fit.base, m, z));
            shift = std::max(shift, props.back().logp_prefix[fit.d]);
        }
        double wsum = 0.0, qsum = 0.0;
        for (const auto& prop : props) {
            const double w = std::exp(prop.logp_prefix[fit.d] - shift);
            wsum += w;
            qsum += w * prop.u[fit.d];
        }
        return qsum / wsum;
    }
    const auto zx = fit.internal_x(x);
    const double zy = fit.y_std.to_internal(y, 0);
    const long M = fit.permutation_count();
    double sum = 0.0;
    for (long m = 0; m < M; ++m) sum += propagate_conditional(fit, m, zx, zy).first;
    return sum / static_cast<double>(M);
}

double eval_class_prob(const ClassifierFit& fit, std::span<const double> x) {
    const auto zx = fit.internal_x(x);
    const long M = fit.permutation_count();
    const double rho_y = fit.config.rho_y;

    double pi_sum = 0.0, w_sum = 0.0;
    for (long m = 0; m < M; ++m) {
        double pi = 0.5;
        double logpx = 0.0;
        std::vector<double> xu(fit.d);
        std::vector<double> rho(fit.d);
        std::vector<double> zfx(fit.d);
        if (fit.mode == RegressionMode::Joint) {
            for (int j = 0; j < fit.d; ++j) {
                zfx[j] = fit.x_fit.standardization.to_internal(x[fit.x_fit.ordering[j]], j);
                xu[j] = clamp_prob(fit.x_fit.init.cdf(j, zfx[j]));
                logpx += fit.x_fit.init.log_pdf(j, zfx[j]);
            }
        }
        for (long i = 0; i < fit.n; ++i) {
            const long row = fit.perms[m][i];
            const bool y1 = fit.labels[row] == 1;
            const double pr = fit.pi_history(m, i);
            const double r = clamp_prob(y1 ? pr : 1.0 - pr);
            const double alpha = fit.config.alpha_at(i + 1);
            double A;
            if (fit.mode == RegressionMode::Conditional) {
                A = covariate_alpha(alpha, kernel_product(zx, fit.train_x.row(row), fit.config.rho));
            } else {
                for (int j = 0; j < fit.d; ++j) rho[j] = fit.x_fit.config.rho_at(j, i + 1);
                double F = 1.0;
                logpx += mv_update_full(xu, fit.x_fit.zv_history[m].row(i).data(), rho.data(),
                                        fit.d, alpha, &F);
                A = covariate_alpha(alpha, F);
            }
            const double dfac = bernoulli_copula_fast(clamp_prob(pi), r, y1, rho_y);
            pi = clamp_prob((1.0 - A + A * dfac) * pi);
        }
        if (fit.mode == RegressionMode::Joint) {
            const double w = std::exp(logpx);
            pi_sum += w * pi;
            w_sum += w;
        } else {
            pi_sum += pi;
            w_sum += 1.0;
        }
    }
    if (!(w_sum > 0.0)) throw NumericError("class probability undefined: covariate density underflow");
    return pi_sum / w_sum;
}

double prequential_loglik(const RegressionFit& fit) {
    double s = 0.0;
    for (double v : fit.preq_scores) s += v;
    return s / static_cast<double>(fit.preq_scores.size());
}

double prequential_loglik(const ClassifierFit& fit) {
    double s = 0.0;
    for (double v : fit.preq_scores) s += v;
    return s / static_cast<double>(fit.preq_scores.size());
}

} // namespace martpost
