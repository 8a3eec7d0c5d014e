#include "resampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace martpost {

namespace {

// Shared node update. The first dimension keeps the plain univariate form
// (its prefix product is identically 1), later dimensions carry the marginal
// density ratio. Returns the full density factor 1 - alpha + alpha * prod c_j;
// F_out receives prod c_j when requested.
inline double node_update(double* u, int d, const double* zv, const double* rho, double alpha,
                          double* F_out = nullptr) {
    double F = 1.0;
    for (int j = 0; j < d; ++j) {
        const double uj = clamp_prob(u[j]);
        const double zu = norm_quantile(uj);
        const double c = copula_density_z(zu, zv[j], rho[j]);
        const double H = copula_conditional_cdf_z(zu, zv[j], rho[j]);
        if (j == 0) {
            u[0] = clamp_prob((1.0 - alpha) * uj + alpha * H);
        } else {
            u[j] = clamp_prob(((1.0 - alpha) * uj + alpha * H * F) / (1.0 - alpha + alpha * F));
        }
        F *= c;
    }
    if (F_out) *F_out = F;
    return 1.0 - alpha + alpha * F;
}

void check_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw UsageError("evaluation grid is empty");
    for (std::size_t g = 1; g < grid.size(); ++g)
        if (!(grid[g] > grid[g - 1])) throw UsageError("evaluation grid must be strictly increasing");
}

void check_resample_config(const ResampleConfig& cfg) {
    if (cfg.forward_steps < 0) throw UsageError("forward_steps must be >= 0");
    if (cfg.ensemble_size < 1) throw UsageError("ensemble_size must be >= 1");
    if (cfg.record_trace && cfg.trace_stride < 1) throw UsageError("trace_stride must be >= 1");
}

void seed_ensemble(Ensemble& ens) {
    ens.trajectory_seeds.resize(ens.config.ensemble_size);
    for (long b = 0; b < ens.config.ensemble_size; ++b)
        ens.trajectory_seeds[b] = derive_stream_seed(ens.config.master_seed, b);
}

// Per-trajectory trace rows merged in trajectory order.
void merge_traces(Ensemble& ens, std::vector<std::vector<TraceRow>>& per_traj) {
    for (auto& rows : per_traj)
        for (const auto& r : rows) ens.trace.push_back(r);
}

bool trace_step(const ResampleConfig& cfg, long s) {
    return cfg.record_trace && (s % cfg.trace_stride == 0 || s == cfg.forward_steps);
}

} // namespace

void apply_copula_step(GridState& gs, double alpha, double v, double rho) {
    const double zv = norm_quantile(clamp_prob(v));
    const long G = static_cast<long>(gs.grid.size());
    for (long g = 0; g < G; ++g) {
        double u[1] = {gs.P[g]};
        gs.p[g] *= node_update(u, 1, &zv, &rho, alpha);
        gs.P[g] = u[0];
    }
    ++gs.step;
}

std::vector<double> default_grid(const FitState& fit, long size, double span_sd) {
    if (fit.d != 1) throw UsageError("default_grid applies to univariate fits");
    if (size < 2) throw UsageError("grid size must be >= 2");
    const double mean = fit.standardization.mean[0];
    const double sd = fit.standardization.sd[0];
    std::vector<double> grid(size);
    for (long g = 0; g < size; ++g) {
        const double z = -span_sd + 2.0 * span_sd * static_cast<double>(g) / static_cast<double>(size - 1);
        grid[g] = mean + sd * z;
    }
    return grid;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
    return s;
}

double l1_distance(std::span<const double> grid, std::span<const double> a,
                   std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        const double da = std::fabs(a[i] - b[i]);
        const double db = std::fabs(a[i - 1] - b[i - 1]);
        s += 0.5 * (da + db) * (grid[i] - grid[i - 1]);
    }
    return s;
}

namespace {
double probe_l1(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}
} // namespace

// --- univariate ---------------------------------------------------------------

Ensemble resample_univariate(const FitState& fit, std::vector<double> grid,
                             const ResampleConfig& cfg) {
    if (fit.d != 1) throw UsageError("resample_univariate needs a univariate fit");
    check_grid(grid);
    check_resample_config(cfg);

    Ensemble ens;
    ens.kind = EnsembleKind::UnivariateGrid;
    ens.config = cfg;
    ens.grid = std::move(grid);
    ens.d = 1;
    ens.nodes = static_cast<long>(ens.grid.size());

    ens.p0.resize(ens.nodes);
    ens.P0.resize(ens.nodes);
    parallel_for(ens.nodes, [&](long g) {
        const double y = ens.grid[g];
        ens.p0[g] = eval_density(fit, {&y, 1});
        ens.P0[g] = eval_cdf_conditionals(fit, {&y, 1})[0];
    });

    ens.p = Matrix(cfg.ensemble_size, ens.nodes);
    ens.P = Matrix(cfg.ensemble_size, ens.nodes);
    seed_ensemble(ens);
    std::vector<std::vector<TraceRow>> traces(cfg.record_trace ? cfg.ensemble_size : 0);

    parallel_for(cfg.ensemble_size, [&](long b) {
        RngStream rng(cfg.master_seed, static_cast<std::uint64_t>(b));
        auto p = ens.p.row(b);
        auto P = ens.P.row(b);
        std::copy(ens.p0.begin(), ens.p0.end(), p.begin());
        std::copy(ens.P0.begin(), ens.P0.end(), P.begin());
        if (cfg.record_trace) traces[b].push_back({b, 0, 0.0, 0.0});
        for (long s = 1; s <= cfg.forward_steps; ++s) {
            const long i = fit.n + s;
            const double alpha = fit.config.alpha_at(i);
            const double rho = fit.config.rho_at(0, i);
            const double zv = norm_quantile(rng.uniform_open01());
            for (long g = 0; g < ens.nodes; ++g) {
                double u[1] = {P[g]};
                p[g] *= node_update(u, 1, &zv, &rho, alpha);
                P[g] = u[0];
            }
            if (trace_step(cfg, s))
                traces[b].push_back({b, s, l1_distance(ens.grid, p, ens.p0),
                                     l1_distance(ens.grid, P, ens.P0)});
        }
    });
    if (cfg.record_trace) merge_traces(ens, traces);
    return ens;
}

// --- multivariate ---------------------------------------------------------------

Ensemble resample_multivariate(const FitState& fit, const Matrix& probes,
                               const ResampleConfig& cfg) {
    if (probes.rows() < 1) throw UsageError("probe list is empty");
    if (probes.cols() != fit.d) throw UsageError("probe dimension mismatch");
    check_resample_config(cfg);

    Ensemble ens;
    ens.kind = EnsembleKind::MultivariateProbes;
    ens.config = cfg;
    ens.probes = probes;
    ens.d = fit.d;
    ens.nodes = probes.rows();

    // Initial state per node: permutation-averaged density and conditionals.
    Matrix u0(ens.nodes, fit.d);
    ens.p0.resize(ens.nodes);
    ens.P0.resize(ens.nodes);
    parallel_for(ens.nodes, [&](long g) {
        ens.p0[g] = eval_density(fit, probes.row(g));
        const auto u = eval_cdf_conditionals(fit, probes.row(g));
        for (int j = 0; j < fit.d; ++j) u0(g, j) = u[j];
        ens.P0[g] = u[0];
    });

    ens.p = Matrix(cfg.ensemble_size, ens.nodes);
    ens.P = Matrix(cfg.ensemble_size, ens.nodes);
    seed_ensemble(ens);
    std::vector<std::vector<TraceRow>> traces(cfg.record_trace ? cfg.ensemble_size : 0);

    const int d = fit.d;
    parallel_for(cfg.ensemble_size, [&](long b) {
        RngStream rng(cfg.master_seed, static_cast<std::uint64_t>(b));
        auto p = ens.p.row(b);
        auto P = ens.P.row(b);
        Matrix u = u0;
        std::copy(ens.p0.begin(), ens.p0.end(), p.begin());
        std::copy(ens.P0.begin(), ens.P0.end(), P.begin());
        std::vector<double> zv(d), rho(d);
        if (cfg.record_trace) traces[b].push_back({b, 0, 0.0, 0.0});
        for (long s = 1; s <= cfg.forward_steps; ++s) {
            const long i = fit.n + s;
            const double alpha = fit.config.alpha_at(i);
            for (int j = 0; j < d; ++j) {
                rho[j] = fit.config.rho_at(j, i);
                zv[j] = norm_quantile(rng.uniform_open01());
            }
            for (long g = 0; g < ens.nodes; ++g) {
                p[g] *= node_update(u.row(g).data(), d, zv.data(), rho.data(), alpha);
                P[g] = u(g, 0);
            }
            if (trace_step(cfg, s))
                traces[b].push_back({b, s, probe_l1(p, ens.p0), probe_l1(P, ens.P0)});
        }
    });
    if (cfg.record_trace) merge_traces(ens, traces);
    return ens;
}

// --- regression -----------------------------------------------------------------

namespace {

// Covariate kernel table rows: probes (standardized) against training atoms.
Matrix kernel_table(const Matrix& zprobes, const Matrix& ztrain, const std::vector<double>& rho) {
    Matrix K(zprobes.rows(), ztrain.rows());
    parallel_for(zprobes.rows(), [&](long i) {
        for (long k = 0; k < ztrain.rows(); ++k) {
            double prod = 1.0;
            for (std::size_t j = 0; j < rho.size(); ++j)
                prod *= copula_density_z(zprobes(i, j), ztrain(k, j), rho[j]);
            K(i, k) = prod;
        }
    });
    return K;
}

Ensemble resample_regression_conditional(const RegressionFit& fit, const Matrix& x_probes,
                                         const std::vector<double>& y_grid,
                                         const ResampleConfig& cfg) {
    const long np = x_probes.rows();
    const long ny = static_cast<long>(y_grid.size());

    Ensemble ens;
    ens.kind = EnsembleKind::RegressionProbes;
    ens.config = cfg;
    ens.probes = x_probes;
    ens.grid = y_grid;
    ens.d = fit.d;
    ens.nodes = np * ny; // node = (probe, y) pair, probe-major

    Matrix zprobes(np, fit.d);
    for (long i = 0; i < np; ++i) {
        const auto z = fit.internal_x(x_probes.row(i));
        for (int j = 0; j < fit.d; ++j) zprobes(i, j) = z[j];
    }
    const Matrix Kp = kernel_table(zprobes, fit.train_x, fit.config.rho);

    ens.p0.resize(ens.nodes);
    ens.P0.resize(ens.nodes);
    parallel_for(ens.nodes, [&](long node) {
        const long pi = node / ny;
        const long gi = node % ny;
        ens.p0[node] = eval_conditional_density(fit, x_probes.row(pi), y_grid[gi]);
        ens.P0[node] = eval_conditional_cdf(fit, x_probes.row(pi), y_grid[gi]);
    });

    ens.p = Matrix(cfg.ensemble_size, ens.nodes);
    ens.P = Matrix(cfg.ensemble_size, ens.nodes);
    seed_ensemble(ens);
    std::vector<std::vector<TraceRow>> traces(cfg.record_trace ? cfg.ensemble_size : 0);

    const double rho_y = fit.config.rho_y;
    const long n = fit.n;
    parallel_for(cfg.ensemble_size, [&](long b) {
        RngStream rng(cfg.master_seed, static_cast<std::uint64_t>(b));
        auto p = ens.p.row(b);
        auto q = ens.P.row(b);
        std::copy(ens.p0.begin(), ens.p0.end(), p.begin());
        std::copy(ens.P0.begin(), ens.P0.end(), q.begin());
        std::vector<std::uint32_t> urn(n);
        std::iota(urn.begin(), urn.end(), 0u);
        urn.reserve(n + cfg.forward_steps);
        if (cfg.record_trace) traces[b].push_back({b, 0, 0.0, 0.0});
        for (long s = 1; s <= cfg.forward_steps; ++s) {
            const long i = n + s;
            const double alpha = fit.config.alpha_at(i);
            const std::uint32_t atom = urn[rng.uniform_index(urn.size())];
            urn.push_back(atom);
            const double zr = norm_quantile(rng.uniform_open01());
            for (long pi = 0; pi < np; ++pi) {
                const double A = covariate_alpha(alpha, Kp(pi, atom));
                for (long gi = 0; gi < ny; ++gi) {
                    const long node = pi * ny + gi;
                    const double qv = clamp_prob(q[node]);
                    const double zq = norm_quantile(qv);
                    p[node] *= 1.0 - A + A * copula_density_z(zq, zr, rho_y);
                    q[node] = clamp_prob((1.0 - A) * qv +
                                         A * copula_conditional_cdf_z(zq, zr, rho_y));
                }
            }
            if (trace_step(cfg, s))
                traces[b].push_back({b, s, probe_l1(p, ens.p0), probe_l1(q, ens.P0)});
        }
    });
    if (cfg.record_trace) merge_traces(ens, traces);
    return ens;
}

Ensemble resample_regression_joint(const RegressionFit& fit, const Matrix& x_probes,
                                   const std::vector<double>& y_grid, const ResampleConfig& cfg) {
    const long np = x_probes.rows();
    const long ny = static_cast<long>(y_grid.size());
    const int d = fit.d;
    const int dd = d + 1;

    Ensemble ens;
    ens.kind = EnsembleKind::RegressionProbes;
    ens.config = cfg;
    ens.probes = x_probes;
    ens.grid = y_grid;
    ens.d = d;
    ens.nodes = np * ny;

    // Covariate conditional-CDF state per probe: mixture conditionals of the
    // permutation-averaged joint, same weighting as eval_cdf_conditionals.
    Matrix xu0(np, d);
    parallel_for(np, [&](long pi) {
        std::vector<double> pt(dd);
        for (int j = 0; j < d; ++j) pt[j] = x_probes(pi, j);
        pt[d] = 0.0;
        const auto z = fit.base.internal_point(pt);
        const long M = fit.base.permutation_count();
        std::vector<Propagation> props;
        props.reserve(M);
        for (long m = 0; m < M; ++m) props.push_back(propagate_point_perm(fit.base, m, z));
        for (int j = 0; j < d; ++j) {
            double max_log = -1e300;
            for (const auto& pr : props) max_log = std::max(max_log, pr.logp_prefix[j]);
            double wsum = 0.0, usum = 0.0;
            for (const auto& pr : props) {
                const double w = std::exp(pr.logp_prefix[j] - max_log);
                wsum += w;
                usum += w * pr.u[j];
            }
            xu0(pi, j) = usum / wsum;
        }
    });

    ens.p0.resize(ens.nodes);
    ens.P0.resize(ens.nodes);
    parallel_for(ens.nodes, [&](long node) {
        const long pi = node / ny;
        const long gi = node % ny;
        ens.p0[node] = eval_conditional_density(fit, x_probes.row(pi), y_grid[gi]);
        ens.P0[node] = eval_conditional_cdf(fit, x_probes.row(pi), y_grid[gi]);
    });

    ens.p = Matrix(cfg.ensemble_size, ens.nodes);
    ens.P = Matrix(cfg.ensemble_size, ens.nodes);
    seed_ensemble(ens);
    std::vector<std::vector<TraceRow>> traces(cfg.record_trace ? cfg.ensemble_size : 0);

    const long n = fit.n;
    parallel_for(cfg.ensemble_size, [&](long b) {
        RngStream rng(cfg.master_seed, static_cast<std::uint64_t>(b));
        auto p = ens.p.row(b);
        auto q = ens.P.row(b);
        std::copy(ens.p0.begin(), ens.p0.end(), p.begin());
        std::copy(ens.P0.begin(), ens.P0.end(), q.begin());
        Matrix xu = xu0;
        std::vector<double> zv(dd), rho(dd);
        if (cfg.record_trace) traces[b].push_back({b, 0, 0.0, 0.0});
        for (long s = 1; s <= cfg.forward_steps; ++s) {
            const long i = n + s;
            const double alpha = fit.base.config.alpha_at(i);
            for (int j = 0; j < dd; ++j) {
                rho[j] = fit.base.config.rho_at(j, i);
                zv[j] = norm_quantile(rng.uniform_open01());
            }
            const double rho_y = rho[d];
            const double zr = zv[d];
            for (long pi = 0; pi < np; ++pi) {
                double F = 1.0;
                node_update(xu.row(pi).data(), d, zv.data(), rho.data(), alpha, &F);
                const double A = covariate_alpha(alpha, F);
                for (long gi = 0; gi < ny; ++gi) {
                    const long node = pi * ny + gi;
                    const double qv = clamp_prob(q[node]);
                    const double zq = norm_quantile(qv);
                    p[node] *= 1.0 - A + A * copula_density_z(zq, zr, rho_y);
                    q[node] = clamp_prob((1.0 - A) * qv +
                                         A * copula_conditional_cdf_z(zq, zr, rho_y));
                }
            }
            if (trace_step(cfg, s))
                traces[b].push_back({b, s, probe_l1(p, ens.p0), probe_l1(q, ens.P0)});
        }
    });
    if (cfg.record_trace) merge_traces(ens, traces);
    return ens;
}

} // namespace

Ensemble resample_regression(const RegressionFit& fit, const Matrix& x_probes,
                             std::vector<double> y_grid, const ResampleConfig& cfg) {
    if (x_probes.rows() < 1) throw UsageError("probe list is empty");
    if (x_probes.cols() != fit.d) throw UsageError("probe covariate dimension mismatch");
    if (y_grid.empty()) throw UsageError("response grid is empty");
    check_grid(y_grid);
    check_resample_config(cfg);
    if (fit.mode == RegressionMode::Conditional)
        return resample_regression_conditional(fit, x_probes, y_grid, cfg);
    return resample_regression_joint(fit, x_probes, y_grid, cfg);
}

Ensemble resample_classifier(const ClassifierFit& fit, const Matrix& x_probes,
                             const ResampleConfig& cfg) {
    if (fit.mode != RegressionMode::Conditional)
        throw UsageError("classifier resampling supports conditional-mode fits only "
                         "(joint-mode discrete resampling is quadratic and unsupported)");
    if (x_probes.rows() < 1) throw UsageError("probe list is empty");
    if (x_probes.cols() != fit.d) throw UsageError("probe covariate dimension mismatch");
    check_resample_config(cfg);

    Ensemble ens;
    ens.kind = EnsembleKind::ClassifierProbes;
    ens.config = cfg;
    ens.probes = x_probes;
    ens.d = fit.d;
    ens.nodes = x_probes.rows();

    const long n = fit.n;
    const long np = x_probes.rows();

    Matrix zprobes(np, fit.d);
    for (long i = 0; i < np; ++i) {
        const auto z = fit.internal_x(x_probes.row(i));
        for (int j = 0; j < fit.d; ++j) zprobes(i, j) = z[j];
    }
    const Matrix Kp = kernel_table(zprobes, fit.train_x, fit.config.rho);
    const Matrix Ka = kernel_table(fit.train_x, fit.train_x, fit.config.rho);

    // Fitted class probabilities at the probes and at every training atom.
    std::vector<double> probe_pi0(np), atom_pi0(n);
    parallel_for(np, [&](long i) { ens.P0.push_back(0.0), (void)i; });
    ens.P0.assign(np, 0.0);
    parallel_for(np, [&](long i) { ens.P0[i] = eval_class_prob(fit, x_probes.row(i)); });
    parallel_for(n, [&](long k) {
        std::vector<double> x(fit.d);
        for (int j = 0; j < fit.d; ++j) x[j] = fit.x_std.to_original(fit.train_x(k, j), j);
        atom_pi0[k] = eval_class_prob(fit, x);
    });
    probe_pi0 = ens.P0;
    ens.p0 = ens.P0;

    ens.p = Matrix(cfg.ensemble_size, ens.nodes);
    ens.P = Matrix(cfg.ensemble_size, ens.nodes);
    seed_ensemble(ens);
    std::vector<std::vector<TraceRow>> traces(cfg.record_trace ? cfg.ensemble_size : 0);

    const double rho_y = fit.config.rho_y;
    parallel_for(cfg.ensemble_size, [&](long b) {
        RngStream rng(cfg.master_seed, static_cast<std::uint64_t>(b));
        auto probe_pi = ens.P.row(b);
        std::copy(probe_pi0.begin(), probe_pi0.end(), probe_pi.begin());
        std::vector<double> atom_pi = atom_pi0;
        std::vector<std::uint32_t> urn(n);
        std::iota(urn.begin(), urn.end(), 0u);
        urn.reserve(n + cfg.forward_steps);
        if (cfg.record_trace) traces[b].push_back({b, 0, 0.0, 0.0});
        for (long s = 1; s <= cfg.forward_steps; ++s) {
            const long i = n + s;
            const double alpha = fit.config.alpha_at(i);
            const std::uint32_t atom = urn[rng.uniform_index(urn.size())];
            urn.push_back(atom);
            const bool y1 = rng.uniform01() < atom_pi[atom];
            const double r = clamp_prob(y1 ? atom_pi[atom] : 1.0 - atom_pi[atom]);
            for (long k = 0; k < n; ++k) {
                const double A = covariate_alpha(alpha, Ka(k, atom));
                const double dfac = bernoulli_copula_fast(clamp_prob(atom_pi[k]), r, y1, rho_y);
                atom_pi[k] = clamp_prob((1.0 - A + A * dfac) * atom_pi[k]);
            }
            for (long pi = 0; pi < np; ++pi) {
                const double A = covariate_alpha(alpha, Kp(pi, atom));
                const double dfac = bernoulli_copula_fast(clamp_prob(probe_pi[pi]), r, y1, rho_y);
                probe_pi[pi] = clamp_prob((1.0 - A + A * dfac) * probe_pi[pi]);
            }
            if (trace_step(cfg, s))
                traces[b].push_back({b, s, probe_l1(probe_pi, ens.P0), probe_l1(probe_pi, ens.P0)});
        }
        auto prow = ens.p.row(b);
        std::copy(probe_pi.begin(), probe_pi.end(), prow.begin());
    });
    if (cfg.record_trace) merge_traces(ens, traces);
    return ens;
}

// --- statistics -----------------------------------------------------------------

StatisticSpec StatisticSpec::parse(const std::string& text) {
    StatisticSpec spec;
    if (text == "mean") {
        spec.kind = Kind::Mean;
    } else if (text == "var" || text == "variance") {
        spec.kind = Kind::Variance;
    } else if (text == "modes") {
        spec.kind = Kind::Modes;
    } else if (text.rfind("quantile:", 0) == 0) {
        spec.kind = Kind::Quantile;
        try {
            spec.tau = std::stod(text.substr(9));
        } catch (...) {
            throw UsageError("unparsable quantile level in '" + text + "'");
        }
        if (!(spec.tau > 0.0 && spec.tau < 1.0))
            throw UsageError("quantile level must lie in (0,1)");
    } else {
        throw UsageError("unsupported statistic '" + text + "'");
    }
    return spec;
}

std::string StatisticSpec::name() const {
    switch (kind) {
        case Kind::Mean: return "mean";
        case Kind::Variance: return "variance";
        case Kind::Quantile: return "quantile:" + std::to_string(tau);
        case Kind::Modes: return "modes";
        case Kind::LossMin: return "loss_min";
    }
    return "unknown";
}

std::vector<double> dirichlet_weights(long n, RngStream& rng) {
    std::vector<double> w(n);
    double sum = 0.0;
    for (long i = 0; i < n; ++i) {
        w[i] = rng.exponential();
        sum += w[i];
    }
    for (long i = 0; i < n; ++i) w[i] /= sum;
    return w;
}

namespace {

double golden_minimize(const std::function<double(double)>& f, double lo, double hi) {
    constexpr double invphi = 0.6180339887498949;
    double a = lo, bq = hi;
    double c = bq - invphi * (bq - a);
    double d = a + invphi * (bq - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < 200 && (bq - a) > 1e-10 * (1.0 + std::fabs(a) + std::fabs(bq)); ++it) {
        if (fc < fd) {
            bq = d;
            d = c;
            fd = fc;
            c = bq - invphi * (bq - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (bq - a);
            fd = f(d);
        }
    }
    return 0.5 * (a + bq);
}

// Statistic of the weighted empirical measure. Values are presorted; weights
// follow the same order.
double weighted_statistic(const StatisticSpec& spec, std::span<const double> sorted_vals,
                          std::span<const double> w) {
    switch (spec.kind) {
        case StatisticSpec::Kind::Mean: {
            double s = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * sorted_vals[i];
            return s;
        }
        case StatisticSpec::Kind::Variance: {
            double m = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) m += w[i] * sorted_vals[i];
            double v = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i)
                v += w[i] * (sorted_vals[i] - m) * (sorted_vals[i] - m);
            return v;
        }
        case StatisticSpec::Kind::Quantile: {
            double cum = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                cum += w[i];
                if (cum >= spec.tau) return sorted_vals[i];
            }
            return sorted_vals[w.size() - 1];
        }
        case StatisticSpec::Kind::LossMin: {
            if (!spec.loss) throw UsageError("loss_min statistic needs a loss function");
            const double lo = sorted_vals.front();
            const double hi = sorted_vals.back();
            const double pad = 0.5 * (hi - lo) + 1e-6;
            return golden_minimize(
                [&](double theta) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < w.size(); ++i)
                        s += w[i] * spec.loss(theta, sorted_vals[i]);
                    return s;
                },
                lo - pad, hi + pad);
        }
        case StatisticSpec::Kind::Modes:
            throw UsageError("statistic 'modes' is undefined for weighted atoms");
    }
    throw UsageError("unknown statistic");
}

struct SortedData {
    std::vector<double> values;     // ascending
    std::vector<long> sorted_index; // original index of each sorted slot
};

SortedData sort_data(std::span<const double> data) {
    SortedData sd;
    const long n = static_cast<long>(data.size());
    sd.sorted_index.resize(n);
    std::iota(sd.sorted_index.begin(), sd.sorted_index.end(), 0L);
    std::sort(sd.sorted_index.begin(), sd.sorted_index.end(),
              [&](long a, long b) { return data[a] < data[b]; });
    sd.values.resize(n);
    for (long i = 0; i < n; ++i) sd.values[i] = data[sd.sorted_index[i]];
    return sd;
}

void check_bootstrap_args(std::span<const double> data, long B) {
    if (data.empty()) throw DataError("empty dataset");
    if (B < 1) throw UsageError("bootstrap replicate count must be >= 1");
    for (double v : data)
        if (!std::isfinite(v)) throw DataError("non-finite value in bootstrap data");
}

} // namespace

std::vector<double> bayesian_bootstrap(std::span<const double> data, const StatisticSpec& spec,
                                       long B, std::uint64_t seed) {
    check_bootstrap_args(data, B);
    const long n = static_cast<long>(data.size());
    const SortedData sd = sort_data(data);
    std::vector<double> out(B);
    parallel_for(B, [&](long b) {
        RngStream rng(seed, static_cast<std::uint64_t>(b));
        const auto w_orig = dirichlet_weights(n, rng);
        std::vector<double> w(n);
        for (long i = 0; i < n; ++i) w[i] = w_orig[sd.sorted_index[i]];
        out[b] = weighted_statistic(spec, sd.values, w);
    });
    return out;
}

std::vector<double> efron_bootstrap(std::span<const double> data, const StatisticSpec& spec,
                                    long B, std::uint64_t seed) {
    check_bootstrap_args(data, B);
    const long n = static_cast<long>(data.size());
    const SortedData sd = sort_data(data);
    std::vector<double> out(B);
    parallel_for(B, [&](long b) {
        RngStream rng(seed, static_cast<std::uint64_t>(b));
        std::vector<double> counts(n, 0.0);
        for (long i = 0; i < n; ++i)
            counts[rng.uniform_index(static_cast<std::uint64_t>(n))] += 1.0;
        std::vector<double> w(n);
        for (long i = 0; i < n; ++i) w[i] = counts[sd.sorted_index[i]] / static_cast<double>(n);
        out[b] = weighted_statistic(spec, sd.values, w);
    });
    return out;
}

Ensemble bootstrap_ensemble(std::span<const double> data, const StatisticSpec& spec, long B,
                            std::uint64_t seed, bool bayes) {
    Ensemble ens;
    ens.kind = EnsembleKind::Statistics;
    ens.config.ensemble_size = B;
    ens.config.master_seed = seed;
    ens.config.forward_steps = 0;
    ens.stats = bayes ? bayesian_bootstrap(data, spec, B, seed)
                      : efron_bootstrap(data, spec, B, seed);
    seed_ensemble(ens);
    return ens;
}

long count_modes(std::span<const double> p) {
    const std::size_t G = p.size();
    long count = 0;
    std::size_t i = 1;
    while (i + 1 < G) {
        if (p[i] > p[i - 1]) {
            std::size_t j = i;
            while (j + 1 < G && p[j + 1] == p[j]) ++j; // plateau counts once
            if (j + 1 < G && p[j + 1] < p[j]) ++count;
            i = j + 1;
        } else {
            ++i;
        }
    }
    return count;
}

double grid_quantile(std::span<const double> grid, std::span<const double> P, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw UsageError("quantile level must lie in (0,1)");
    const std::size_t G = grid.size();
    if (P[0] >= tau) return grid[0];
    for (std::size_t i = 1; i < G; ++i) {
        if (P[i] >= tau) {
            const double dP = P[i] - P[i - 1];
            if (dP <= 0.0) return grid[i];
            const double t = (tau - P[i - 1]) / dP;
            return grid[i - 1] + t * (grid[i] - grid[i - 1]);
        }
    }
    return grid[G - 1];
}

std::vector<double> extract_statistics(const Ensemble& ens, const StatisticSpec& spec) {
    if (ens.kind == EnsembleKind::Statistics) {
        if (spec.kind == StatisticSpec::Kind::Modes)
            throw UsageError("statistic 'modes' is undefined for weighted atoms");
        return ens.stats;
    }
    if (ens.kind != EnsembleKind::UnivariateGrid)
        throw UsageError("statistic extraction needs a univariate grid ensemble");
    const long B = ens.p.rows();
    std::vector<double> out(B);
    std::span<const double> grid(ens.grid);
    parallel_for(B, [&](long b) {
        const auto p = ens.p.row(b);
        const auto P = ens.P.row(b);
        switch (spec.kind) {
            case StatisticSpec::Kind::Mean: {
                std::vector<double> yp(grid.size());
                for (std::size_t g = 0; g < grid.size(); ++g) yp[g] = grid[g] * p[g];
                out[b] = trapezoid(grid, yp);
                break;
            }
            case StatisticSpec::Kind::Variance: {
                std::vector<double> yp(grid.size()), y2p(grid.size());
                for (std::size_t g = 0; g < grid.size(); ++g) {
                    yp[g] = grid[g] * p[g];
                    y2p[g] = grid[g] * grid[g] * p[g];
                }
                const double m = trapezoid(grid, yp);
                out[b] = trapezoid(grid, y2p) - m * m;
                break;
            }
            case StatisticSpec::Kind::Quantile:
                out[b] = grid_quantile(grid, P, spec.tau);
                break;
            case StatisticSpec::Kind::Modes:
                out[b] = static_cast<double>(count_modes(p));
                break;
            case StatisticSpec::Kind::LossMin:
                throw UsageError("loss_min extraction from grid ensembles is not supported");
        }
    });
    return out;
}

// --- inverse-transform sampling -------------------------------------------------

double inverse_cdf_sample(const GridState& gs, double u) {
    if (!(u > 0.0 && u < 1.0)) throw UsageError("inverse CDF argument must lie in (0,1)");
    return grid_quantile(gs.grid, gs.P, u);
}

namespace {

// Internal-space conditional CDF of ordered dimension j at z, with preceding
// coordinates fixed; mixture-weighted across permutations.
double conditional_cdf_internal(const FitState& fit, std::vector<double>& zbuf, int j, double z) {
    zbuf[j] = z;
    const long M = fit.permutation_count();
    double max_log = -1e300;
    std::vector<Propagation> props;
    props.reserve(M);
    for (long m = 0; m < M; ++m) {
        props.push_back(propagate_point_perm(fit, m, zbuf));
        max_log = std::max(max_log, props.back().logp_prefix[j]);
    }
    double wsum = 0.0, usum = 0.0;
    for (const auto& pr : props) {
        const double w = std::exp(pr.logp_prefix[j] - max_log);
        wsum += w;
        usum += w * pr.u[j];
    }
    return usum / wsum;
}

} // namespace

std::vector<double> inverse_cdf_sample(const FitState& fit, std::span<const double> u) {
    if (static_cast<int>(u.size()) != fit.d)
        throw UsageError("need one uniform per dimension");
    for (double v : u)
        if (!(v > 0.0 && v < 1.0)) throw UsageError("uniforms must lie in (0,1)");

    std::vector<double> z(fit.d, 0.0);
    for (int j = 0; j < fit.d; ++j) {
        double lo = -4.0, hi = 4.0;
        // Bracket expansion; the internal scale is standardized, +/-12 sd caps it.
        while (conditional_cdf_internal(fit, z, j, lo) > u[j]) {
            lo *= 2.0;
            if (lo < -12.0) throw NumericError("failed to bracket quantile below -12 sd");
        }
        while (conditional_cdf_internal(fit, z, j, hi) < u[j]) {
            hi *= 2.0;
            if (hi > 12.0) throw NumericError("failed to bracket quantile above +12 sd");
        }
        double mid = 0.5 * (lo + hi);
        for (int it = 0; it < 200; ++it) {
            mid = 0.5 * (lo + hi);
            const double c = conditional_cdf_internal(fit, z, j, mid);
            if (std::fabs(c - u[j]) < 1e-8) break;
            (c < u[j] ? lo : hi) = mid;
        }
        z[j] = mid;
    }
    // Back to the original scale and input column order.
    std::vector<double> out(fit.d);
    for (int j = 0; j < fit.d; ++j) out[fit.ordering[j]] = fit.standardization.to_original(z[j], j);
    return out;
}

// --- concentration check --------------------------------------------------------

double concentration_bound(double epsilon, long N, long M,
                           const std::function<double(long)>& alpha_at, double C) {
    double var_sum = 0.0;
    for (long i = N + 1; i <= M; ++i) {
        const double a = alpha_at(i);
        var_sum += C == 1.0 ? 0.25 * a * a : C * C * a * a;
    }
    const double diff_bound = (C == 1.0 ? 1.0 : 2.0 * C) * alpha_at(N + 1);
    const double denom = 2.0 * (var_sum + diff_bound * epsilon / 3.0);
    if (denom <= 0.0) return epsilon == 0.0 ? 2.0 : 0.0;
    const double b = 2.0 * std::exp(-epsilon * epsilon / denom);
    return std::min(b, 2.0);
}

ConcentrationReport concentration_check(const FitState& fit, const ConcentrationConfig& cfg) {
    if (cfg.history_steps < fit.n) throw UsageError("history_steps must be >= fitted n");
    if (cfg.continuation < 0) throw UsageError("continuation must be >= 0");
    std::vector<double> probe = cfg.probe;
    if (probe.empty()) probe.assign(fit.d, 0.0);
    if (static_cast<int>(probe.size()) != fit.d) throw UsageError("probe dimension mismatch");

    // Track the dim-1 marginal CDF at the probe: its forward dynamics are the
    // closed univariate recursion, and it is the joint CDF at a marginal point.
    const double P_start = fit.n > 0 ? eval_cdf_conditionals(fit, probe)[0]
                                     : clamp_prob(fit.init.cdf(0, fit.internal_point(probe)[0]));

    const long N = cfg.history_steps;
    const long M = N + cfg.continuation;
    std::vector<double> deviation(cfg.trajectories);
    parallel_for(cfg.trajectories, [&](long b) {
        RngStream rng(cfg.seed, static_cast<std::uint64_t>(b));
        double P = P_start;
        for (long i = fit.n + 1; i <= N; ++i) {
            const double alpha = fit.config.alpha_at(i);
            const double rho = fit.config.rho_at(0, i);
            const double zv = norm_quantile(rng.uniform_open01());
            const double zu = norm_quantile(clamp_prob(P));
            P = clamp_prob((1.0 - alpha) * P + alpha * copula_conditional_cdf_z(zu, zv, rho));
        }
        const double P_N = P;
        for (long i = N + 1; i <= M; ++i) {
            const double alpha = fit.config.alpha_at(i);
            const double rho = fit.config.rho_at(0, i);
            const double zv = norm_quantile(rng.uniform_open01());
            const double zu = norm_quantile(clamp_prob(P));
            P = clamp_prob((1.0 - alpha) * P + alpha * copula_conditional_cdf_z(zu, zv, rho));
        }
        deviation[b] = std::fabs(P - P_N);
    });

    ConcentrationReport rep;
    rep.trajectories = cfg.trajectories;
    rep.history_steps = N;
    rep.continuation = cfg.continuation;
    for (double eps : cfg.epsilons) {
        long hits = 0;
        for (double dv : deviation)
            if (dv >= eps) ++hits;
        const double freq = static_cast<double>(hits) / static_cast<double>(cfg.trajectories);
        const double bound =
            concentration_bound(eps, N, M, [&](long i) { return fit.config.alpha_at(i); });
        rep.rows.push_back({eps, freq, bound, freq <= bound});
        rep.all_within = rep.all_within && freq <= bound;
    }
    return rep;
}

ConcentrationReport concentration_check(const RegressionFit& fit, const ConcentrationConfig& cfg) {
    if (fit.mode != RegressionMode::Conditional)
        throw UsageError("regression concentration check needs a conditional-mode fit");
    if (cfg.history_steps < fit.n) throw UsageError("history_steps must be >= fitted n");
    if (static_cast<int>(cfg.probe.size()) != fit.d + 1)
        throw UsageError("regression probe needs x coordinates followed by y");

    std::vector<double> x(cfg.probe.begin(), cfg.probe.begin() + fit.d);
    const double y = cfg.probe[fit.d];
    const auto zx = fit.internal_x(x);
    const double q_start = eval_conditional_cdf(fit, x, y);

    double C = 1.0;
    for (int j = 0; j < fit.d; ++j)
        C *= std::exp(0.5 * zx[j] * zx[j]) / std::sqrt(1.0 - fit.config.rho[j] * fit.config.rho[j]);

    const long N = cfg.history_steps;
    const long M = N + cfg.continuation;
    const long n = fit.n;
    const double rho_y = fit.config.rho_y;
    std::vector<double> deviation(cfg.trajectories);
    parallel_for(cfg.trajectories, [&](long b) {
        RngStream rng(cfg.seed, static_cast<std::uint64_t>(b));
        std::vector<std::uint32_t> urn(n);
        std::iota(urn.begin(), urn.end(), 0u);
        urn.reserve(n + (M - n));
        double q = q_start;
        double q_N = q;
        for (long i = n + 1; i <= M; ++i) {
            const double alpha = fit.config.alpha_at(i);
            const std::uint32_t atom = urn[rng.uniform_index(urn.size())];
            urn.push_back(atom);
            const double zr = norm_quantile(rng.uniform_open01());
            const double K = [&] {
                double prod = 1.0;
                for (int j = 0; j < fit.d; ++j)
                    prod *= copula_density_z(zx[j], fit.train_x(atom, j), fit.config.rho[j]);
                return prod;
            }();
            const double A = covariate_alpha(alpha, K);
            const double zq = norm_quantile(clamp_prob(q));
            q = clamp_prob((1.0 - A) * q + A * copula_conditional_cdf_z(zq, zr, rho_y));
            if (i == N) q_N = q;
        }
        deviation[b] = std::fabs(q - q_N);
    });

    ConcentrationReport rep;
    rep.trajectories = cfg.trajectories;
    rep.history_steps = N;
    rep.continuation = cfg.continuation;
    rep.constant_C = C;
    for (double eps : cfg.epsilons) {
        long hits = 0;
        for (double dv : deviation)
            if (dv >= eps) ++hits;
        const double freq = static_cast<double>(hits) / static_cast<double>(cfg.trajectories);
        const double bound =
            concentration_bound(eps, N, M, [&](long i) { return fit.config.alpha_at(i); }, C);
        rep.rows.push_back({eps, freq, bound, freq <= bound});
        rep.all_within = rep.all_within && freq <= bound;
    }
    return rep;
}

double mean_node_sd(const Ensemble& ens) {
    const long B = ens.p.rows();
    const long G = ens.p.cols();
    double acc = 0.0;
    for (long g = 0; g < G; ++g) {
        double m = 0.0;
        for (long b = 0; b < B; ++b) m += ens.p(b, g);
        m /= static_cast<double>(B);
        double v = 0.0;
        for (long b = 0; b < B; ++b) v += (ens.p(b, g) - m) * (ens.p(b, g) - m);
        acc += std::sqrt(v / static_cast<double>(B));
    }
    return acc / static_cast<double>(G);
}

} // namespace martpost
