#include "density_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "errors.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace martpost {

double Standardization::log_jacobian() const {
    double s = 0.0;
    for (double v : sd) s -= std::log(v);
    return s;
}

double InitialDensity::log_pdf(int j, double z) const {
    if (kind == Kind::StandardNormalProduct) return -0.5 * z * z - 0.91893853320467274178; // log sqrt(2 pi)
    const double t = (z - mean[j]) / sd[j];
    return -0.5 * t * t - 0.91893853320467274178 - std::log(sd[j]);
}

double InitialDensity::cdf(int j, double z) const {
    if (kind == Kind::StandardNormalProduct) return norm_cdf(z);
    return norm_cdf((z - mean[j]) / sd[j]);
}

double InitialDensity::quantile(int j, double u) const {
    if (kind == Kind::StandardNormalProduct) return norm_quantile(u);
    return mean[j] + sd[j] * norm_quantile(u);
}

void InitialDensity::validate(int d) const {
    if (kind == Kind::StandardNormalProduct) return;
    if (static_cast<int>(mean.size()) != d || static_cast<int>(sd.size()) != d)
        throw UsageError("user_normal initial density needs mean and sd per dimension");
    for (double s : sd)
        if (!(s > 0.0)) throw UsageError("initial density sd must be positive");
}

double CopulaConfig::alpha_at(long i) const {
    if (i >= 1 && static_cast<std::size_t>(i) <= alpha_seq.size()) {
        return alpha_seq[static_cast<std::size_t>(i - 1)];
    }
    return alpha.at(i);
}

double CopulaConfig::rho_at(int j, long i) const {
    if (static_cast<std::size_t>(j) < rho_seq.size() && i >= 1 &&
        static_cast<std::size_t>(i) <= rho_seq[j].size()) {
        return rho_seq[j][static_cast<std::size_t>(i - 1)];
    }
    return rho[j];
}

void CopulaConfig::validate_common() const {
    alpha.validate();
    if (permutations < 1) throw UsageError("permutation count M must be >= 1");
    for (double a : alpha_seq)
        if (!(a > 0.0 && a <= 1.0)) throw UsageError("alpha_seq entries must lie in (0,1]");
    for (const auto& seq : rho_seq)
        for (double r : seq) check_rho(r);
}

std::vector<double> FitState::internal_point(std::span<const double> point) const {
    if (static_cast<int>(point.size()) != d)
        throw UsageError("point has " + std::to_string(point.size()) + " coordinates, fit has " +
                         std::to_string(d));
    std::vector<double> z(d);
    for (int j = 0; j < d; ++j) z[j] = standardization.to_internal(point[ordering[j]], j);
    return z;
}

void mv_update_prefix(std::span<double> u, std::span<double> logp_prefix, const double* zv,
                      const double* rho, int d, double alpha) {
    double F = 1.0; // product of copula densities over preceding dimensions
    for (int j = 0; j < d; ++j) {
        const double uj = clamp_prob(u[j]);
        const double zu = norm_quantile(uj);
        const double c = copula_density_z(zu, zv[j], rho[j]);
        const double H = copula_conditional_cdf_z(zu, zv[j], rho[j]);
        const double denom = 1.0 - alpha + alpha * F;
        u[j] = clamp_prob(((1.0 - alpha) * uj + alpha * H * F) / denom);
        F *= c;
        logp_prefix[j + 1] += std::log(1.0 - alpha + alpha * F);
    }
}

double mv_update_full(std::span<double> u, const double* zv, const double* rho, int d,
                      double alpha, double* F_out) {
    double F = 1.0;
    for (int j = 0; j < d; ++j) {
        const double uj = clamp_prob(u[j]);
        const double zu = norm_quantile(uj);
        const double c = copula_density_z(zu, zv[j], rho[j]);
        const double H = copula_conditional_cdf_z(zu, zv[j], rho[j]);
        const double denom = 1.0 - alpha + alpha * F;
        u[j] = clamp_prob(((1.0 - alpha) * uj + alpha * H * F) / denom);
        F *= c;
    }
    if (F_out) *F_out = F;
    return std::log(1.0 - alpha + alpha * F);
}

namespace {

void check_finite(const Matrix& data) {
    for (long i = 0; i < data.rows(); ++i)
        for (long j = 0; j < data.cols(); ++j)
            if (!std::isfinite(data(i, j)))
                throw DataError("non-finite value at row " + std::to_string(i) + ", column " +
                                std::to_string(j));
}

Standardization compute_standardization(const Matrix& data, bool enabled) {
    const long n = data.rows();
    const int d = static_cast<int>(data.cols());
    Standardization s;
    s.mean.assign(d, 0.0);
    s.sd.assign(d, 1.0);
    if (!enabled) return s;
    for (int j = 0; j < d; ++j) {
        double m = 0.0;
        for (long i = 0; i < n; ++i) m += data(i, j);
        m /= static_cast<double>(n);
        double var = 0.0;
        for (long i = 0; i < n; ++i) {
            const double c = data(i, j) - m;
            var += c * c;
        }
        var /= static_cast<double>(n); // population variance, fixed convention
        s.mean[j] = m;
        if (var > 0.0) {
            s.sd[j] = std::sqrt(var);
        } else if (n > 1) {
            throw DataError("column " + std::to_string(j) + " is constant; cannot standardize");
        } // n == 1: scale undefined, keep sd = 1
    }
    return s;
}

// Sequential prequential walk over one permutation: records every point's
// conditional CDFs just before it is absorbed, and the log score.
void fit_walk(const FitState& fit, const std::vector<int>& perm, Matrix& vhist, Matrix& zvhist,
              double& score_internal) {
    const long n = fit.n;
    const int d = fit.d;
    Matrix u(n, d);
    std::vector<double> logp(n, 0.0);
    for (long k = 0; k < n; ++k) {
        for (int j = 0; j < d; ++j) {
            const double z = fit.train(k, j);
            u(k, j) = clamp_prob(fit.init.cdf(j, z));
            logp[k] += fit.init.log_pdf(j, z);
        }
    }

    std::vector<double> zv(d), rho(d);
    double score = 0.0;
    for (long i = 0; i < n; ++i) {
        const long row = perm[i];
        for (int j = 0; j < d; ++j) {
            const double v = clamp_prob(u(row, j));
            vhist(i, j) = v;
            zvhist(i, j) = norm_quantile(v);
            zv[j] = zvhist(i, j);
        }
        score += logp[row];
        const double alpha = fit.config.alpha_at(i + 1);
        for (int j = 0; j < d; ++j) rho[j] = fit.config.rho_at(j, i + 1);
        for (long pos = i + 1; pos < n; ++pos) {
            const long k = perm[pos];
            logp[k] += mv_update_full(u.row(k), zv.data(), rho.data(), d, alpha);
        }
    }
    score_internal = score;
}

void resolve_config(FitState& fit, const Matrix& data, CopulaConfig&& config) {
    const int d = static_cast<int>(data.cols());
    config.validate_common();

    fit.ordering.resize(d);
    if (config.dim_order.empty()) {
        std::iota(fit.ordering.begin(), fit.ordering.end(), 0);
    } else {
        if (static_cast<int>(config.dim_order.size()) != d)
            throw UsageError("dim_order must be a permutation of the column indices");
        std::vector<bool> seen(d, false);
        for (int j : config.dim_order) {
            if (j < 0 || j >= d || seen[j])
                throw UsageError("dim_order must be a permutation of the column indices");
            seen[j] = true;
        }
        fit.ordering = config.dim_order;
    }

    if (config.rho.empty()) throw UsageError("config.rho must provide at least one bandwidth");
    if (static_cast<int>(config.rho.size()) == 1 && d > 1)
        config.rho.assign(static_cast<std::size_t>(d), config.rho[0]);
    if (static_cast<int>(config.rho.size()) != d)
        throw UsageError("config.rho needs one bandwidth (broadcast) or one per dimension");
    for (double r : config.rho) check_rho(r);

    config.init.validate(d);

    fit.d = d;
    fit.n = data.rows();
    // Reorder columns into the fitting order.
    Matrix ordered(fit.n, d);
    for (long i = 0; i < fit.n; ++i)
        for (int j = 0; j < d; ++j) ordered(i, j) = data(i, fit.ordering[j]);

    fit.init = config.init;
    if (fit.init.kind == InitialDensity::Kind::UserNormal) {
        for (int j = 0; j < d; ++j) {
            fit.init.mean[j] = config.init.mean[fit.ordering[j]];
            fit.init.sd[j] = config.init.sd[fit.ordering[j]];
        }
    }

    fit.standardization = compute_standardization(ordered, config.standardize);
    fit.train = Matrix(fit.n, d);
    for (long i = 0; i < fit.n; ++i)
        for (int j = 0; j < d; ++j) fit.train(i, j) = fit.standardization.to_internal(ordered(i, j), j);

    // Internal evaluation uses ordered-dim bandwidths.
    {
        auto rho_in = config.rho;
        for (int j = 0; j < d; ++j) config.rho[j] = rho_in[fit.ordering[j]];
        if (!config.rho_seq.empty()) {
            if (static_cast<int>(config.rho_seq.size()) != d)
                throw UsageError("rho_seq needs one sequence per dimension");
            auto seq_in = config.rho_seq;
            for (int j = 0; j < d; ++j) config.rho_seq[j] = seq_in[fit.ordering[j]];
        }
    }
    fit.config = std::move(config);
    fit.config.init = fit.init;
}

} // namespace

// Permutation 0 is always the identity; the rest are seeded Fisher-Yates
// shuffles on independent substreams, so prefix refits reproduce histories.
std::vector<std::vector<int>> draw_permutations(long n, int M, std::uint64_t seed) {
    std::vector<std::vector<int>> perms(M);
    std::vector<int> identity(n);
    std::iota(identity.begin(), identity.end(), 0);
    perms[0] = identity;
    for (int m = 1; m < M; ++m) {
        perms[m] = identity;
        RngStream rng(seed, static_cast<std::uint64_t>(m));
        for (long i = n - 1; i > 0; --i) {
            const long j = static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
            std::swap(perms[m][i], perms[m][j]);
        }
    }
    return perms;
}

FitState fit_multivariate_with_perms(const Matrix& data, CopulaConfig config,
                                     std::vector<std::vector<int>> perms) {
    if (data.rows() < 1) throw DataError("empty dataset");
    if (data.cols() < 1) throw DataError("dataset has no columns");
    check_finite(data);

    FitState fit;
    resolve_config(fit, data, std::move(config));

    const long M = static_cast<long>(perms.size());
    for (const auto& p : perms)
        if (static_cast<long>(p.size()) != fit.n)
            throw UsageError("each permutation must index all rows exactly once");

    fit.perms = std::move(perms);
    fit.config.permutations = static_cast<int>(M);
    fit.v_history.assign(M, Matrix(fit.n, fit.d));
    fit.zv_history.assign(M, Matrix(fit.n, fit.d));
    fit.preq_scores.assign(M, 0.0);

    const double jac = fit.standardization.log_jacobian();
    parallel_for(M, [&](long m) {
        double score = 0.0;
        fit_walk(fit, fit.perms[m], fit.v_history[m], fit.zv_history[m], score);
        fit.preq_scores[m] = score + static_cast<double>(fit.n) * jac;
    });
    return fit;
}

FitState fit_multivariate(const Matrix& data, CopulaConfig config) {
    config.validate_common();
    return fit_multivariate_with_perms(
        data, config, draw_permutations(data.rows(), config.permutations, config.seed));
}

FitState fit_univariate(std::span<const double> data, CopulaConfig config) {
    Matrix m(static_cast<long>(data.size()), 1);
    for (long i = 0; i < m.rows(); ++i) m(i, 0) = data[i];
    return fit_multivariate(m, std::move(config));
}

FitState prior_fit(CopulaConfig config, int d) {
    if (d < 1) throw UsageError("prior fit needs d >= 1");
    Matrix dummy(1, d); // resolve against a zero row, then drop it
    FitState fit;
    config.standardize = false;
    resolve_config(fit, dummy, std::move(config));
    fit.n = 0;
    fit.train = Matrix(0, d);
    fit.perms.assign(1, {});
    fit.v_history.assign(1, Matrix(0, d));
    fit.zv_history.assign(1, Matrix(0, d));
    fit.preq_scores.assign(1, 0.0);
    return fit;
}

Propagation propagate_point_perm(const FitState& fit, long m, std::span<const double> zpoint) {
    const int d = fit.d;
    Propagation prop;
    prop.u.resize(d);
    prop.logp_prefix.assign(d + 1, 0.0);
    for (int j = 0; j < d; ++j) {
        const double z = zpoint[j];
        prop.u[j] = clamp_prob(fit.init.cdf(j, z));
        prop.logp_prefix[j + 1] = prop.logp_prefix[j] + fit.init.log_pdf(j, z);
    }
    std::vector<double> rho(d);
    const Matrix& zvh = fit.zv_history[m];
    for (long i = 0; i < fit.n; ++i) {
        const double alpha = fit.config.alpha_at(i + 1);
        for (int j = 0; j < d; ++j) rho[j] = fit.config.rho_at(j, i + 1);
        mv_update_prefix(prop.u, prop.logp_prefix, zvh.row(i).data(), rho.data(), d, alpha);
    }
    return prop;
}

double eval_density(const FitState& fit, std::span<const double> point) {
    const auto z = fit.internal_point(point);
    const long M = fit.permutation_count();
    double sum = 0.0;
    for (long m = 0; m < M; ++m) {
        const auto prop = propagate_point_perm(fit, m, z);
        sum += std::exp(prop.logp_prefix[fit.d]);
    }
    return (sum / static_cast<double>(M)) * std::exp(fit.standardization.log_jacobian());
}

std::vector<double> eval_density_batch(const FitState& fit, const Matrix& points) {
    std::vector<double> out(points.rows());
    parallel_for(points.rows(), [&](long i) { out[i] = eval_density(fit, points.row(i)); });
    return out;
}

std::vector<double> eval_cdf_conditionals(const FitState& fit, std::span<const double> point) {
    const auto z = fit.internal_point(point);
    const long M = fit.permutation_count();
    std::vector<Propagation> props;
    props.reserve(M);
    for (long m = 0; m < M; ++m) props.push_back(propagate_point_perm(fit, m, z));

    // Mixture conditionals of the permutation-averaged density: weight each
    // permutation's conditional CDF by its prefix marginal density.
    std::vector<double> out(fit.d);
    for (int j = 0; j < fit.d; ++j) {
        double max_log = -1e300;
        for (const auto& p : props) max_log = std::max(max_log, p.logp_prefix[j]);
        double wsum = 0.0, usum = 0.0;
        for (const auto& p : props) {
            const double w = std::exp(p.logp_prefix[j] - max_log);
            wsum += w;
            usum += w * p.u[j];
        }
        out[j] = usum / wsum;
    }
    return out;
}

double prequential_loglik(const FitState& fit) {
    if (fit.n < 1) throw UsageError("prequential log-likelihood needs at least one observation");
    double s = 0.0;
    for (double v : fit.preq_scores) s += v;
    return s / static_cast<double>(fit.preq_scores.size());
}

} // namespace martpost
