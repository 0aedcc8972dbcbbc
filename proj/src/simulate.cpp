#include "finestrat/simulate.hpp"

#include "finestrat/adjust.hpp"
#include "finestrat/gmm.hpp"
#include "finestrat/inference.hpp"
#include "finestrat/randomize.hpp"
#include "finestrat/stats.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

namespace finestrat {

namespace {

Matrix select_columns(const Matrix& m, const std::vector<Index>& cols) {
    Matrix out(m.rows(), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
        if (cols[j] < 0 || cols[j] >= m.cols()) throw ConfigError("design column index out of range");
        out.col(static_cast<Index>(j)) = m.col(cols[j]);
    }
    return out;
}

std::vector<Index> range(Index from, Index to) {
    std::vector<Index> out;
    for (Index j = from; j < to; ++j) out.push_back(j);
    return out;
}

}  // namespace

void DgpSpec::validate() const {
    if (model < 0 || model > 4) throw ConfigError("model must be 0-4, got " + std::to_string(model));
    if (dim < 1) throw ConfigError("covariate dimension must be positive");
    if (model >= 2 && dim < 2) throw ConfigError("models 2-4 need dim >= 2");
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("treatment proportion must lie in (0,1)");
    if (n < 2) throw ConfigError("sample size must be at least 2");
    if (!(residual_var >= 0.0)) throw ConfigError("residual variance must be non-negative");
    if (!(std::abs(residual_corr) <= 1.0)) throw ConfigError("residual correlation must lie in [-1,1]");
    if (compliance && !(*compliance >= 0.0 && *compliance <= 1.0)) {
        throw ConfigError("compliance share must lie in [0,1]");
    }
}

ModelCoefficients model_coefficients(int model, int dim) {
    ModelCoefficients c;
    c.beta1 = Vector::Zero(dim);
    c.beta0 = Vector::Zero(dim);
    c.a1_diag = Vector::Zero(dim);
    if (model == 1) {
        c.beta1.setConstant(1.0 / std::sqrt(static_cast<double>(dim)));
    } else if (model >= 2) {
        const double tail = 1.0 / std::sqrt(static_cast<double>(dim - 1));
        c.beta1.setConstant(tail);
        c.beta0.setConstant(tail);
        c.beta1[0] = 4.0;
        c.beta0[0] = 0.0;
        if (model == 3) {
            c.a1_diag.setConstant(1.0 / (2.0 * std::sqrt(static_cast<double>(dim - 1))));
            c.a1_diag[0] = 2.0;
        }
    }
    return c;
}

DgpDraw generate_dgp(const DgpSpec& spec, Rng& rng) { return generate_dgp(spec, spec.n, rng); }

DgpDraw generate_dgp(const DgpSpec& spec, Index n, Rng& rng) {
    spec.validate();
    const int m = spec.dim;
    DgpDraw out;
    out.r.resize(n, m);
    const double rho = (spec.covariance == CovarianceKind::equicorrelated && m > 1) ? 0.5 / (m - 1) : 0.0;
    const double own = std::sqrt(1.0 - rho), common = std::sqrt(rho);
    const double sd = std::sqrt(spec.residual_var);
    const double c = spec.residual_corr, cc = std::sqrt(1.0 - c * c);
    const ModelCoefficients coef = model_coefficients(spec.model, m);
    out.y1.resize(n);
    out.y0.resize(n);
    Eigen::RowVectorXd row(m);
    for (Index i = 0; i < n; ++i) {
        const double f = rho > 0.0 ? rng.normal() : 0.0;
        for (int j = 0; j < m; ++j) row[j] = own * rng.normal() + common * f;
        out.r.row(i) = row;
        const double u1 = rng.normal(), u2 = rng.normal();
        const double e1 = sd * u1;
        const double e0 = sd * (c * u1 + cc * u2);
        switch (spec.model) {
        case 0:
            out.y0[i] = e0;
            out.y1[i] = spec.tau + e0;
            break;
        case 4:
            out.y1[i] = 2.0 * std::atan(row.dot(coef.beta1)) + e1;
            out.y0[i] = 2.0 * std::atan(row.dot(coef.beta0)) + e0;
            break;
        default:
            out.y1[i] = row.dot(coef.beta1) + row.cwiseAbs2().dot(coef.a1_diag) + e1;
            out.y0[i] = row.dot(coef.beta0) + e0;
            break;
        }
    }
    out.ylevel = (1.0 - spec.p) * out.y1 + spec.p * out.y0;
    if (spec.compliance) {
        Vector comp(n);
        for (Index i = 0; i < n; ++i) comp[i] = rng.uniform() < *spec.compliance ? 1.0 : 0.0;
        out.complier = comp;
    }
    return out;
}

CovariateTable covariate_table(const Matrix& r) {
    std::vector<std::string> names;
    for (Index j = 0; j < r.cols(); ++j) names.push_back("r" + std::to_string(j + 1));
    return CovariateTable(r, names, RoleIndices{});
}

std::optional<double> analytic_ate(const DgpSpec& spec) {
    switch (spec.model) {
    case 0: return spec.tau;
    case 3: return model_coefficients(3, spec.dim).a1_diag.sum();  // E[r'A r] = tr(A) since Var(r_j) = 1
    default: return 0.0;  // odd functions of a symmetric r
    }
}

DesignSpec design_complete(int dim) {
    DesignSpec d;
    d.name = "C";
    d.complete = true;
    d.w_cols = range(0, dim);
    return d;
}

DesignSpec design_stratified(int model, int dim) {
    DesignSpec d;
    d.name = "S";
    d.method = MatchMethod::greedy_nn;
    d.psi_cols = range(0, dim);
    d.psi_weights.assign(static_cast<std::size_t>(dim), 1.0);
    if (model >= 2) d.psi_weights[0] = std::sqrt(2.0);
    d.w_cols = range(0, dim);
    return d;
}

DesignSpec design_stratified_rerandomized(int dim, double accept_alpha) {
    DesignSpec d;
    d.name = "SR";
    d.method = MatchMethod::sorted_1d;
    d.psi_cols = {0};
    d.h_cols = range(1, dim);
    d.accept_alpha = accept_alpha;
    d.w_cols = range(1, dim);
    return d;
}

DesignSpec named_design(const std::string& name, int model, int dim) {
    if (name == "C") return design_complete(dim);
    if (name == "S") return design_stratified(model, dim);
    if (name == "SR") return design_stratified_rerandomized(dim);
    throw ConfigError("unknown design '" + name + "' (expected C, S or SR)");
}

DesignOutcome apply_design(const DesignSpec& design, const Matrix& r, double p, Rng& rng) {
    if (std::abs(p - static_cast<double>(design.l) / design.k) > 1e-12) {
        throw ConfigError("design l/k does not match the treatment proportion");
    }
    DesignOutcome out;
    Matrix psi;
    if (design.complete || design.psi_cols.empty()) {
        out.partition = random_groups(r.rows(), design.k, design.l, rng);
        psi = Matrix::Zero(r.rows(), 1);
    } else {
        psi = select_columns(r, design.psi_cols);
        MatchConfig cfg{design.k, design.l, design.psi_weights, design.method};
        out.partition = match_k_tuples(psi, cfg, rng);
        psi = weighted_psi(psi, design.psi_weights);
    }
    if (std::min(design.l, design.k - design.l) < 2) {
        out.partition = pair_groups_by_centroid(std::move(out.partition), psi);
    }
    if (!design.h_cols.empty() && design.accept_alpha > 0.0) {
        const MahalanobisImbalance eval(select_columns(r, design.h_cols), out.partition);
        const AcceptanceRegion region =
            mahalanobis_region(static_cast<int>(design.h_cols.size()), design.accept_alpha);
        RerandomizeOptions opts;
        opts.max_draws = design.max_draws;
        const RerandomizeResult res = rerandomize(out.partition, eval, region, rng, opts);
        out.d = res.draw.d;
        out.draws = res.draw.draw_index;
        out.exhausted = res.exhausted;
    } else {
        out.d = draw_stratified(out.partition, rng).d;
    }
    return out;
}

namespace {

// Sum over pairs of sorted-psi neighbours of (u_i - u_j)(u_i - u_j)' / 2, averaged per pair.
Matrix within_pair_covariance(const Matrix& u, const std::vector<std::vector<Index>>& groups) {
    Matrix acc = Matrix::Zero(u.cols(), u.cols());
    for (const auto& g : groups) {
        const Eigen::RowVectorXd diff = u.row(g[0]) - u.row(g[1]);
        acc.noalias() += diff.transpose() * diff;
    }
    return acc / (2.0 * static_cast<double>(groups.size()));
}

}  // namespace

PopulationQuantities population_variances(const DgpSpec& spec, const DesignSpec& design, Index big_n, Rng& rng) {
    if (big_n % 2 != 0) ++big_n;
    const DgpDraw draw = generate_dgp(spec, big_n, rng);
    const Index dh = static_cast<Index>(design.h_cols.size());
    const Index dw = static_cast<Index>(design.w_cols.size());
    Matrix u(big_n, 1 + dh + dw);
    u.col(0) = draw.ylevel;
    u.middleCols(1, dh) = select_columns(draw.r, design.h_cols);
    u.rightCols(dw) = select_columns(draw.r, design.w_cols);

    Matrix cov;
    if (design.complete || design.psi_cols.empty()) {
        cov = empirical_covariance(u);
    } else {
        const Matrix psi = weighted_psi(select_columns(draw.r, design.psi_cols), design.psi_weights);
        Rng unused(0, 0);
        if (psi.cols() == 1) {
            const MatchConfig cfg{2, 1, {}, MatchMethod::sorted_1d};
            cov = within_pair_covariance(u, match_k_tuples(psi, cfg, unused).groups);
        } else {
            const Index cap = std::min<Index>(big_n, 20000);
            const auto groups = greedy_nn_groups(psi.topRows(cap), 2);
            cov = within_pair_covariance(u.topRows(cap), groups);
        }
    }

    const double var_d = spec.p * (1.0 - spec.p);
    PopulationQuantities q;
    const Vector tau = draw.y1 - draw.y0;
    q.theta0 = analytic_ate(spec).value_or(tau.mean());
    q.V_phi = (tau.array() - tau.mean()).square().mean();
    const double cyy = cov(0, 0);
    q.V_strat = cyy / var_d;

    auto project = [&](Index offset, Index dim, Vector& coef) {
        if (dim == 0) {
            coef = Vector::Zero(0);
            return cyy;
        }
        const Matrix chh = cov.block(offset, offset, dim, dim);
        const Vector chy = cov.block(offset, 0, dim, 1);
        coef = chh.ldlt().solve(chy);
        return cyy - chy.dot(coef);
    };
    q.V_theta = project(1, dh, q.gamma0) / var_d;
    q.V_adj = project(1 + dh, dw, q.alpha0) / var_d;
    q.var_zh = cov.block(1, 1, dh, dh) / var_d;
    return q;
}

std::vector<double> oracle_limit_sampler(double V_theta, const Vector& gamma0, const Matrix& var_zh,
                                         const AcceptanceRegion& region, int draws, Rng& rng) {
    if (draws < 1) throw ConfigError("oracle sampler needs at least one draw");
    if (!(V_theta >= 0.0)) throw DomainError("oracle variance must be non-negative");
    const Index dh = gamma0.size();
    if (var_zh.rows() != dh || var_zh.cols() != dh) throw ConfigError("var_zh dimension does not match gamma0");
    Matrix L = Matrix::Zero(dh, dh);
    if (dh > 0) {
        Eigen::LLT<Matrix> chol(var_zh);
        if (chol.info() != Eigen::Success) throw NumericalError("var_zh is not positive definite");
        L = chol.matrixL();
    }
    // For the ellipsoid normalized by var_zh itself, z'var_zh^{-1}z = |u|^2 with z = L u.
    const bool unit_ellipsoid = region.shape == RegionShape::ellipsoid_mahalanobis &&
                                (region.sigma.size() == 0 || region.sigma.isApprox(var_zh, 1e-12));
    const double sd = std::sqrt(V_theta);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(draws));
    long long attempts = 0, accepted = 0;
    Vector u(dh);
    ImbalanceStat stat;
    stat.kind = ImbalanceKind::linear;
    while (static_cast<int>(out.size()) < draws) {
        double residual = 0.0;
        if (dh > 0) {
            for (;;) {
                for (Index j = 0; j < dh; ++j) u[j] = rng.normal();
                ++attempts;
                bool ok;
                if (region.shape == RegionShape::none) {
                    ok = true;
                } else if (unit_ellipsoid) {
                    ok = u.norm() <= region.eps;
                } else {
                    stat.value = L * u;
                    ok = region.accepts(stat);
                }
                if (ok) {
                    ++accepted;
                    residual = gamma0.dot(L * u);
                    break;
                }
                if (attempts >= 100000 && static_cast<double>(accepted) / attempts < 1e-4) {
                    throw DomainError("oracle sampler acceptance rate " +
                                      format_double(static_cast<double>(accepted) / attempts) + " is below 1e-4");
                }
            }
        }
        out.push_back(sd * rng.normal() + residual);
    }
    return out;
}

std::vector<ReplicateOutcome> run_replicate(const MonteCarloConfig& cfg, int replicate) {
    const RngSpec base{cfg.seed, static_cast<std::uint64_t>(replicate)};
    Rng data_rng(base.child(0));
    const DgpDraw data = generate_dgp(cfg.dgp, data_rng);
    const double theta_n = (data.y1 - data.y0).mean();
    const EstimandSpec spec = score_sate();

    std::vector<ReplicateOutcome> out(cfg.designs.size());
    for (std::size_t j = 0; j < cfg.designs.size(); ++j) {
        const DesignSpec& design = cfg.designs[j];
        ReplicateOutcome& rec = out[j];
        rec.theta_n = theta_n;
        Rng rng(base.child(1 + j));
        const DesignOutcome assigned = apply_design(design, data.r, cfg.dgp.p, rng);
        rec.draws = assigned.draws;
        rec.exhausted = assigned.exhausted;

        ExperimentFrame frame;
        frame.d = assigned.d;
        frame.p = cfg.dgp.p;
        Vector y(data.y1.size());
        for (Index i = 0; i < y.size(); ++i) y[i] = assigned.d[i] == 1 ? data.y1[i] : data.y0[i];
        frame.y = std::move(y);

        const GmmFit fit = solve_gmm(frame, spec);
        const Matrix w = select_columns(data.r, design.w_cols);
        for (int e = 0; e < 2; ++e) {
            const AdjustmentFit adj =
                fit_adjustment(fit, frame, assigned.partition, e == 0 ? Matrix(frame.n(), 0) : w);
            const GmmFit at = evaluate_at(frame, spec, adj.theta_adj);
            const VarianceComponents comp = variance_components(frame, assigned.partition, adj, at);
            const SuperpopVariance pop = superpop_variance(comp);
            const InferenceReport rep = confidence_intervals(adj, comp, pop, cfg.ci_alpha);
            const ContrastInterval& ci = rep.contrasts.front();
            rec.pop_lo[e] = ci.pop_lo;
            rec.pop_hi[e] = ci.pop_hi;
            rec.fin_lo[e] = ci.fin_lo;
            rec.fin_hi[e] = ci.fin_hi;
            rec.V_pop[e] = ci.var_pop;
            if (e == 0) {
                rec.theta_hat = adj.theta_adj[0];
            } else {
                rec.theta_adj = adj.theta_adj[0];
            }
        }
        rec.ok = true;
    }
    return out;
}

MonteCarloResult run_monte_carlo(const MonteCarloConfig& cfg) {
    cfg.dgp.validate();
    if (cfg.replicates < 1) throw ConfigError("replicates must be positive");
    if (cfg.designs.empty()) throw ConfigError("no designs to simulate");
    MonteCarloResult result;
    result.config = cfg;
    if (cfg.theta0) {
        result.theta0 = *cfg.theta0;
    } else if (auto ate = analytic_ate(cfg.dgp)) {
        result.theta0 = *ate;
    } else {
        throw ConfigError("theta0 must be supplied for this model");
    }
    const std::size_t nd = cfg.designs.size();
    result.outcomes.assign(nd, std::vector<ReplicateOutcome>(static_cast<std::size_t>(cfg.replicates)));

    std::vector<std::string> messages(static_cast<std::size_t>(cfg.replicates));
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int r = next.fetch_add(1);
            if (r >= cfg.replicates) return;
            try {
                auto recs = run_replicate(cfg, r);
                for (std::size_t j = 0; j < nd; ++j) result.outcomes[j][static_cast<std::size_t>(r)] = recs[j];
            } catch (const std::exception& e) {
                messages[static_cast<std::size_t>(r)] = "replicate " + std::to_string(r) + ": " + e.what();
            }
        }
    };
    const int threads = std::max(1, cfg.threads);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& m : messages) {
        if (!m.empty()) {
            ++result.failures;
            result.failure_messages.push_back(std::move(m));
        }
    }
    if (result.failures > cfg.replicates / 100) {
        throw NumericalError(std::to_string(result.failures) + " of " + std::to_string(cfg.replicates) +
                             " replicates failed; first: " + result.failure_messages.front());
    }

    const double theta0 = result.theta0;
    struct Acc {
        double se_sum = 0, se_sq = 0, cover_pop = 0, cover_fin = 0, width_pop = 0, width_fin = 0, draws = 0;
        Index count = 0;
    };
    std::vector<std::array<Acc, 2>> acc(nd);
    for (std::size_t j = 0; j < nd; ++j) {
        for (const auto& rec : result.outcomes[j]) {
            if (!rec.ok) continue;
            for (int e = 0; e < 2; ++e) {
                Acc& a = acc[j][static_cast<std::size_t>(e)];
                const double est = e == 0 ? rec.theta_hat : rec.theta_adj;
                const double sq = (est - theta0) * (est - theta0);
                a.se_sum += sq;
                a.se_sq += sq * sq;
                a.cover_pop += (rec.pop_lo[e] <= theta0 && theta0 <= rec.pop_hi[e]) ? 1 : 0;
                a.cover_fin += (rec.fin_lo[e] <= rec.theta_n && rec.theta_n <= rec.fin_hi[e]) ? 1 : 0;
                a.width_pop += rec.pop_hi[e] - rec.pop_lo[e];
                a.width_fin += rec.fin_hi[e] - rec.fin_lo[e];
                a.draws += static_cast<double>(rec.draws);
                ++a.count;
            }
        }
    }
    double mse_base = 0.0, width_base = 0.0;
    for (std::size_t j = 0; j < nd; ++j) {
        if (cfg.designs[j].name != cfg.baseline) continue;
        mse_base = acc[j][0].se_sum / static_cast<double>(acc[j][0].count);
        width_base = acc[j][1].width_pop / static_cast<double>(acc[j][1].count);
    }
    for (std::size_t j = 0; j < nd; ++j) {
        for (int e = 0; e < 2; ++e) {
            const Acc& a = acc[j][static_cast<std::size_t>(e)];
            const double c = static_cast<double>(a.count);
            EstimatorSummary s;
            s.design = cfg.designs[j].name;
            s.estimator = e == 0 ? "unadjusted" : "adjusted";
            s.replicates = a.count;
            s.mse = a.se_sum / c;
            s.mse_se = std::sqrt(std::max(0.0, a.se_sq / c - s.mse * s.mse) / c);
            s.mse_ratio = mse_base > 0.0 ? s.mse / mse_base : s.mse;
            s.cover_pop = a.cover_pop / c;
            s.cover_fin = a.cover_fin / c;
            s.width_pop = a.width_pop / c / (width_base > 0.0 ? width_base : 1.0);
            s.width_fin = a.width_fin / c / (width_base > 0.0 ? width_base : 1.0);
            s.mean_draws = a.draws / c;
            result.rows.push_back(s);
        }
    }
    return result;
}

void write_results_csv(std::ostream& out, const MonteCarloResult& result) {
    out << "model,dim,n,design,estimator,mse_ratio,cover_pop,cover_fin,width_pop,width_fin,mean_draws\n";
    const auto& dgp = result.config.dgp;
    for (const auto& row : result.rows) {
        out << dgp.model << ',' << dgp.dim << ',' << dgp.n << ',' << row.design << ',' << row.estimator << ','
            << format_double(row.mse_ratio) << ',' << format_double(row.cover_pop) << ','
            << format_double(row.cover_fin) << ',' << format_double(row.width_pop) << ','
            << format_double(row.width_fin) << ',' << format_double(row.mean_draws) << '\n';
    }
}

}  // namespace finestrat
