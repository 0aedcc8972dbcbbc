#include "finestrat/rerandomize.hpp"

#include "finestrat/stats.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace finestrat {

Matrix within_tuple_demean(const Matrix& v, const GroupPartition& partition) {
    Matrix out = v;
    Eigen::RowVectorXd mean(v.cols());
    for (const auto& g : partition.groups) {
        mean.setZero();
        for (Index i : g) mean += v.row(i);
        mean /= static_cast<double>(g.size());
        for (Index i : g) out.row(i) -= mean;
    }
    return out;
}

Vector arm_mean_difference(const Matrix& v, const Assignment& d) {
    Vector s1 = Vector::Zero(v.cols()), s0 = Vector::Zero(v.cols());
    Index n1 = 0;
    for (Index i = 0; i < v.rows(); ++i) {
        if (d[i] == 1) {
            s1 += v.row(i).transpose();
            ++n1;
        } else {
            s0 += v.row(i).transpose();
        }
    }
    const Index n0 = v.rows() - n1;
    if (n1 == 0 || n0 == 0) throw DomainError("both arms must be non-empty");
    return s1 / static_cast<double>(n1) - s0 / static_cast<double>(n0);
}

Matrix mahalanobis_normalization(const Matrix& x, const GroupPartition& partition) {
    const Matrix xc = within_tuple_demean(x, partition);
    const double k = partition.k;
    const double p = partition.p();
    return (xc.transpose() * xc) / static_cast<double>(x.rows()) * (k / (k - 1.0)) / (p * (1.0 - p));
}

namespace {

Eigen::LLT<Matrix> checked_cholesky(const Matrix& sigma) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma, Eigen::EigenvaluesOnly);
    const double hi = eig.eigenvalues().maxCoeff();
    const double lo = eig.eigenvalues().minCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (!(hi > 0.0) || !(cond < 1e12)) {
        throw NumericalError("Mahalanobis normalization is singular (condition number " + format_double(cond) +
                             "); remove duplicated or stratification-measurable columns from h");
    }
    return Eigen::LLT<Matrix>(sigma);
}

double quadratic_form(const Eigen::LLT<Matrix>& chol, const Vector& v) {
    return v.dot(chol.solve(v));
}

}  // namespace

ImbalanceStat mahalanobis_stat(const Matrix& x, const Assignment& d, const GroupPartition& partition) {
    return MahalanobisImbalance(x, partition).evaluate(d);
}

ImbalanceStat mahalanobis_stat(const ExperimentFrame& frame, const GroupPartition& partition,
                               const std::vector<Index>& x_cols) {
    if (!frame.covariates) throw ConfigError("frame has no covariates");
    return mahalanobis_stat(frame.covariates->columns(x_cols), frame.d, partition);
}

double chi2_threshold(int r, double alpha) {
    if (r < 1) throw ConfigError("chi-squared threshold needs at least one rerandomization covariate");
    if (!(alpha > 0.0 && alpha <= 1.0 - 1e-6)) {
        throw DomainError("acceptance probability alpha=" + format_double(alpha) + " must lie in (0, 1-1e-6]");
    }
    return chi2_quantile(alpha, r);
}

double dual_exponent(double p_exponent) {
    if (!(p_exponent >= 1.0)) throw DomainError("belief-set exponent p must be in [1, inf]");
    if (std::isinf(p_exponent)) return 1.0;
    if (p_exponent == 1.0) return std::numeric_limits<double>::infinity();
    return p_exponent / (p_exponent - 1.0);
}

double polar_penalty(const Vector& x, const Vector& gamma_bar, const Matrix& U, double p_exponent) {
    if (gamma_bar.size() != x.size() || U.rows() != x.size()) {
        throw ConfigError("belief set dimension does not match the statistic dimension");
    }
    const double q = dual_exponent(p_exponent);
    const Vector ux = U.transpose() * x;
    double dual;
    if (std::isinf(q)) {
        dual = ux.cwiseAbs().maxCoeff();
    } else if (q == 1.0) {
        dual = ux.cwiseAbs().sum();
    } else if (q == 2.0) {
        dual = ux.norm();
    } else {
        dual = std::pow(ux.cwiseAbs().array().pow(q).sum(), 1.0 / q);
    }
    return std::abs(x.dot(gamma_bar)) + dual;
}

RegionShape parse_region_shape(const std::string& name) {
    if (name == "none") return RegionShape::none;
    if (name == "ball") return RegionShape::ball;
    if (name == "ellipsoid-mahalanobis") return RegionShape::ellipsoid_mahalanobis;
    if (name == "polar") return RegionShape::polar;
    if (name == "rectangle-polar") return RegionShape::rectangle_polar;
    if (name == "pilot-wald") return RegionShape::pilot_wald;
    if (name == "propensity-threshold") return RegionShape::propensity_threshold;
    if (name == "gmm-region") return RegionShape::gmm_region;
    throw ConfigError("unknown region shape '" + name + "'");
}

std::string to_string(RegionShape shape) {
    switch (shape) {
    case RegionShape::none: return "none";
    case RegionShape::ball: return "ball";
    case RegionShape::ellipsoid_mahalanobis: return "ellipsoid-mahalanobis";
    case RegionShape::polar: return "polar";
    case RegionShape::rectangle_polar: return "rectangle-polar";
    case RegionShape::pilot_wald: return "pilot-wald";
    case RegionShape::propensity_threshold: return "propensity-threshold";
    case RegionShape::gmm_region: return "gmm-region";
    }
    return "none";
}

double AcceptanceRegion::penalty(const ImbalanceStat& stat) const {
    auto ellipsoid = [&]() {
        if (sigma.size() > 0) {
            if (sigma.rows() != stat.value.size()) throw ConfigError("region matrix dimension mismatch");
            return std::sqrt(std::max(0.0, stat.value.dot(sigma.ldlt().solve(stat.value))));
        }
        if (stat.kind == ImbalanceKind::mahalanobis) return std::sqrt(std::max(0.0, stat.scalar));
        return stat.value.norm();
    };
    switch (shape) {
    case RegionShape::none: return 0.0;
    case RegionShape::ball: return stat.value.norm();
    case RegionShape::ellipsoid_mahalanobis:
    case RegionShape::gmm_region: return ellipsoid();
    case RegionShape::polar:
    case RegionShape::rectangle_polar:
    case RegionShape::pilot_wald: return polar_penalty(stat.value, gamma_bar, U, p_exponent);
    case RegionShape::propensity_threshold: return std::sqrt(std::max(0.0, stat.scalar));
    }
    return 0.0;
}

AcceptanceRegion unrestricted_region() { return AcceptanceRegion{}; }

AcceptanceRegion ball_region(double eps) {
    if (!(eps > 0.0)) throw DomainError("region threshold eps must be positive");
    AcceptanceRegion r;
    r.shape = RegionShape::ball;
    r.eps = eps;
    return r;
}

AcceptanceRegion mahalanobis_region(int r, double alpha) {
    AcceptanceRegion out;
    out.shape = RegionShape::ellipsoid_mahalanobis;
    out.eps = std::sqrt(chi2_threshold(r, alpha));
    return out;
}

AcceptanceRegion polar_region(Vector gamma_bar, Matrix U, double p_exponent, double eps) {
    if (!(eps > 0.0)) throw DomainError("region threshold eps must be positive");
    if (U.rows() != U.cols() || U.rows() != gamma_bar.size()) {
        throw ConfigError("belief set needs a square U matching gamma_bar");
    }
    dual_exponent(p_exponent);
    Eigen::FullPivLU<Matrix> lu(U);
    if (!lu.isInvertible()) throw NumericalError("belief-set matrix U is singular");
    AcceptanceRegion out;
    out.shape = RegionShape::polar;
    out.eps = eps;
    out.gamma_bar = std::move(gamma_bar);
    out.U = std::move(U);
    out.p_exponent = p_exponent;
    return out;
}

AcceptanceRegion rectangle_region(const Vector& a, const Vector& b, double eps) {
    if (a.size() != b.size()) throw ConfigError("rectangle bounds have different lengths");
    if (!((b - a).array() > 0.0).all()) throw DomainError("rectangle needs a_j < b_j in every coordinate");
    AcceptanceRegion out = polar_region((a + b) / 2.0, Matrix(((b - a) / 2.0).asDiagonal()),
                                        std::numeric_limits<double>::infinity(), eps);
    out.shape = RegionShape::rectangle_polar;
    return out;
}

AcceptanceRegion pilot_wald_region(const Vector& gamma_pilot, const Matrix& sigma_pilot, double m,
                                   double alpha, double eps) {
    if (!(eps > 0.0)) throw DomainError("region threshold eps must be positive");
    if (!(m >= 1.0)) throw DomainError("pilot size m must be at least 1");
    if (sigma_pilot.rows() != gamma_pilot.size() || sigma_pilot.cols() != gamma_pilot.size()) {
        throw ConfigError("pilot covariance dimension does not match the pilot estimate");
    }
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("pilot confidence level alpha must lie in (0,1)");
    const Matrix sym = 0.5 * (sigma_pilot + sigma_pilot.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -1e-10 * scale) {
        throw DomainError("pilot covariance is not positive semidefinite");
    }
    const double c_alpha = chi2_quantile(1.0 - alpha, static_cast<double>(gamma_pilot.size()));
    AcceptanceRegion out;
    out.shape = RegionShape::pilot_wald;
    out.eps = eps;
    out.gamma_bar = gamma_pilot;
    out.U = std::sqrt(c_alpha / m) * psd_sqrt(sym);
    out.p_exponent = 2.0;
    return out;
}

AcceptanceRegion propensity_region(double eps) {
    if (!(eps > 0.0)) throw DomainError("region threshold eps must be positive");
    AcceptanceRegion out;
    out.shape = RegionShape::propensity_threshold;
    out.eps = eps;
    return out;
}

LinearImbalance::LinearImbalance(const Matrix& h) : h_t_(h.transpose()) {
    if (h.cols() == 0) throw ConfigError("rerandomization needs at least one h column");
}

Vector LinearImbalance::raw(const Assignment& d) const {
    const Index n = h_t_.cols();
    Vector s1 = Vector::Zero(h_t_.rows()), s0 = Vector::Zero(h_t_.rows());
    Index n1 = 0;
    for (Index i = 0; i < n; ++i) {
        if (d[i] == 1) {
            s1 += h_t_.col(i);
            ++n1;
        } else {
            s0 += h_t_.col(i);
        }
    }
    if (n1 == 0 || n1 == n) throw DomainError("both arms must be non-empty");
    return std::sqrt(static_cast<double>(n)) *
           (s1 / static_cast<double>(n1) - s0 / static_cast<double>(n - n1));
}

ImbalanceStat LinearImbalance::evaluate(const Assignment& d) const {
    ImbalanceStat s;
    s.kind = ImbalanceKind::linear;
    s.raw = raw(d);
    s.value = s.raw;
    s.scalar = s.value.squaredNorm();
    return s;
}

MahalanobisImbalance::MahalanobisImbalance(const Matrix& x, const GroupPartition& partition)
    : LinearImbalance(x), sigma_(mahalanobis_normalization(x, partition)), chol_(checked_cholesky(sigma_)) {}

ImbalanceStat MahalanobisImbalance::evaluate(const Assignment& d) const {
    ImbalanceStat s;
    s.kind = ImbalanceKind::mahalanobis;
    s.raw = raw(d);
    s.value = s.raw;
    s.scalar = quadratic_form(chol_, s.raw);
    return s;
}

namespace {

double log1pexp(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

double sigmoid(double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

}  // namespace

LogisticFit fit_logistic(const Matrix& x, const Assignment& d, double tol, int max_iterations) {
    const Index n = x.rows(), dx = x.cols();
    if (dx == 0) throw ConfigError("propensity model needs at least one regressor");
    const Index treated = d.sum();
    if (treated == 0 || treated == n) {
        throw ConvergenceError("perfect separation: every unit is in one arm", {});
    }
    // Standardize non-constant columns; centre them only when a constant column can absorb the shift.
    Vector mean = x.colwise().mean().transpose();
    Vector sd(dx);
    Index constant_col = -1;
    for (Index j = 0; j < dx; ++j) {
        sd[j] = std::sqrt((x.col(j).array() - mean[j]).square().mean());
        if (sd[j] <= 1e-14 * std::max(1.0, std::abs(mean[j]))) {
            if (mean[j] == 0.0) throw NumericalError("propensity regressor column is identically zero");
            sd[j] = 0.0;
            if (constant_col < 0) constant_col = j;
        }
    }
    Matrix z = x;
    for (Index j = 0; j < dx; ++j) {
        if (sd[j] == 0.0) continue;
        if (constant_col >= 0) z.col(j).array() -= mean[j];
        z.col(j) /= sd[j];
    }
    const Vector dv = d.cast<double>();

    auto loglik = [&](const Vector& eta) {
        double ll = 0.0;
        for (Index i = 0; i < n; ++i) ll += dv[i] * eta[i] - log1pexp(eta[i]);
        return ll;
    };

    LogisticFit fit;
    Vector beta = Vector::Zero(dx);
    Vector eta = z * beta;
    double ll = loglik(eta);
    fit.trace.push_back(ll);
    Vector mu(n);
    bool converged = false;
    for (int it = 1; it <= max_iterations; ++it) {
        for (Index i = 0; i < n; ++i) mu[i] = sigmoid(eta[i]);
        if ((mu - dv).cwiseAbs().maxCoeff() < 1e-8) {
            throw ConvergenceError("perfect separation: fitted propensities reproduce the assignment", fit.trace);
        }
        const Vector grad = z.transpose() * (dv - mu);
        if (grad.cwiseAbs().maxCoeff() <= tol * static_cast<double>(n)) {
            converged = true;
            fit.iterations = it - 1;
            break;
        }
        const Vector wts = mu.array() * (1.0 - mu.array());
        const Matrix hess = z.transpose() * wts.asDiagonal() * z;
        Eigen::LDLT<Matrix> ldlt(hess);
        if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
            throw ConvergenceError("singular information matrix in propensity fit", fit.trace);
        }
        const Vector step = ldlt.solve(grad);
        double scale = 1.0;
        bool improved = false;
        for (int h = 0; h < 40; ++h, scale *= 0.5) {
            const Vector cand = beta + scale * step;
            const Vector cand_eta = z * cand;
            const double cand_ll = loglik(cand_eta);
            if (cand_ll >= ll) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                improved = true;
                break;
            }
        }
        fit.trace.push_back(ll);
        fit.iterations = it;
        if (!improved || (scale * step).cwiseAbs().maxCoeff() <= tol) {
            for (Index i = 0; i < n; ++i) mu[i] = sigmoid(eta[i]);
            converged = true;
            break;
        }
    }
    if (!converged) {
        throw ConvergenceError("propensity fit did not converge in " + std::to_string(max_iterations) +
                                   " iterations (possible separation)",
                               fit.trace);
    }
    for (Index i = 0; i < n; ++i) mu[i] = sigmoid(eta[i]);
    if ((mu - dv).cwiseAbs().maxCoeff() < 1e-8) {
        throw ConvergenceError("perfect separation: fitted propensities reproduce the assignment", fit.trace);
    }
    // Map coefficients back to the original column scale.
    fit.beta = beta;
    double offset = 0.0;
    for (Index j = 0; j < dx; ++j) {
        if (sd[j] == 0.0) continue;
        fit.beta[j] = beta[j] / sd[j];
        if (constant_col >= 0) offset -= fit.beta[j] * mean[j];
    }
    if (constant_col >= 0) fit.beta[constant_col] += offset / mean[constant_col];
    fit.fitted = mu;
    return fit;
}

ImbalanceStat propensity_stat(const Matrix& x, const Assignment& d, double p) {
    const LogisticFit fit = fit_logistic(x, d);
    ImbalanceStat s;
    s.kind = ImbalanceKind::propensity;
    s.scalar = (fit.fitted.array() - p).square().sum();
    s.value = Vector::Constant(1, s.scalar);
    return s;
}

ImbalanceStat propensity_stat(const ExperimentFrame& frame, const std::vector<Index>& x_cols) {
    if (!frame.covariates) throw ConfigError("frame has no covariates");
    return propensity_stat(frame.covariates->columns(x_cols), frame.d, frame.p);
}

PropensityImbalance::PropensityImbalance(Matrix x, double p) : x_(std::move(x)), p_(p) {
    if (x_.cols() == 0) throw ConfigError("propensity rerandomization needs at least one x column");
}

ImbalanceStat PropensityImbalance::evaluate(const Assignment& d) const { return propensity_stat(x_, d, p_); }

MomentModel location_moments(Index dim_x) {
    MomentModel model;
    model.dim_beta = dim_x;
    model.name = "location";
    model.m = [](const Eigen::Ref<const Vector>& x, const Vector& beta) -> Vector { return x - beta; };
    return model;
}

MomentModel gaussian_location_scale_moments(Index dim_x) {
    MomentModel model;
    model.dim_beta = 2 * dim_x;
    model.name = "gaussian-location-scale";
    model.m = [dim_x](const Eigen::Ref<const Vector>& x, const Vector& beta) -> Vector {
        Vector out(2 * dim_x);
        for (Index j = 0; j < dim_x; ++j) {
            const double c = x[j] - beta[j];
            out[j] = c;
            out[dim_x + j] = c * c - beta[dim_x + j];
        }
        return out;
    };
    return model;
}

Vector solve_moment_model(const Matrix& x_t, const MomentModel& model, const std::vector<char>* mask,
                          const Vector& beta0) {
    auto f = [&](const Vector& beta) {
        Vector total = Vector::Zero(model.dim_beta);
        Index count = 0;
        for (Index i = 0; i < x_t.cols(); ++i) {
            if (mask && !(*mask)[static_cast<std::size_t>(i)]) continue;
            total += model.m(x_t.col(i), beta);
            ++count;
        }
        if (count == 0) throw DomainError("moment model needs at least one unit");
        return Vector(total / static_cast<double>(count));
    };
    return solve_moment_equations(f, {}, beta0).theta;
}

GmmImbalance::GmmImbalance(const Matrix& x, MomentModel model) : x_t_(x.transpose()), model_(std::move(model)) {
    if (x.cols() == 0) throw ConfigError("GMM rerandomization needs at least one covariate");
    if (!model_.m || model_.dim_beta <= 0) throw ConfigError("moment model is not defined");
    beta_pooled_ = solve_moment_model(x_t_, model_, nullptr, Vector::Zero(model_.dim_beta));
}

ImbalanceStat GmmImbalance::evaluate(const Assignment& d) const {
    std::vector<char> treated(static_cast<std::size_t>(d.size())), control(static_cast<std::size_t>(d.size()));
    for (Index i = 0; i < d.size(); ++i) {
        treated[static_cast<std::size_t>(i)] = d[i] == 1;
        control[static_cast<std::size_t>(i)] = d[i] != 1;
    }
    const Vector b1 = solve_moment_model(x_t_, model_, &treated, beta_pooled_);
    const Vector b0 = solve_moment_model(x_t_, model_, &control, beta_pooled_);
    ImbalanceStat s;
    s.kind = ImbalanceKind::gmm;
    s.value = std::sqrt(static_cast<double>(d.size())) * (b1 - b0);
    s.scalar = s.value.squaredNorm();
    return s;
}

Matrix GmmImbalance::surrogate_covariates() const {
    Matrix out(x_t_.cols(), model_.dim_beta);
    for (Index i = 0; i < x_t_.cols(); ++i) out.row(i) = model_.m(x_t_.col(i), beta_pooled_).transpose();
    return out;
}

Matrix GmmImbalance::surrogate_jacobian() const {
    auto f = [&](const Vector& beta) {
        Vector total = Vector::Zero(model_.dim_beta);
        for (Index i = 0; i < x_t_.cols(); ++i) total += model_.m(x_t_.col(i), beta);
        return Vector(total / static_cast<double>(x_t_.cols()));
    };
    return finite_difference_jacobian(f, beta_pooled_);
}

ImbalanceStat gmm_imbalance(const Matrix& x, const MomentModel& model, const Assignment& d) {
    return GmmImbalance(x, model).evaluate(d);
}

RerandomizeResult rerandomize(const GroupPartition& partition, const ImbalanceEvaluator& evaluator,
                              const AcceptanceRegion& region, Rng& rng, const RerandomizeOptions& opts) {
    if (opts.max_draws < 1) throw ConfigError("max_draws must be at least 1");
    RerandomizeResult best;
    best.penalty = std::numeric_limits<double>::infinity();
    Assignment d = Assignment::Zero(partition.n());
    for (long draw = 1; draw <= opts.max_draws; ++draw) {
        draw_stratified_into(partition, rng, d);
        ImbalanceStat stat = evaluator.evaluate(d);
        const double pen = region.penalty(stat);
        const bool accepted = pen <= region.eps;
        if (opts.record_trace) best.trace.push_back(TraceRow{draw, pen, accepted});
        if (accepted || pen < best.penalty) {
            best.draw.d = d;
            best.draw.draw_index = draw;
            best.stat = std::move(stat);
            best.penalty = pen;
        }
        if (accepted) {
            best.exhausted = false;
            return best;
        }
    }
    best.exhausted = true;
    return best;
}

double calibrate_epsilon(const GroupPartition& partition, const ImbalanceEvaluator& evaluator,
                         const AcceptanceRegion& region, double alpha, int draws, Rng& rng) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("calibration alpha must lie in (0,1)");
    if (draws < 1) throw ConfigError("calibration needs at least one draw");
    std::vector<double> penalties;
    penalties.reserve(static_cast<std::size_t>(draws));
    Assignment d = Assignment::Zero(partition.n());
    for (int r = 0; r < draws; ++r) {
        draw_stratified_into(partition, rng, d);
        penalties.push_back(region.penalty(evaluator.evaluate(d)));
    }
    return empirical_quantile(std::move(penalties), alpha);
}

void write_trace(std::ostream& out, const std::vector<TraceRow>& trace) {
    out << "draw_index,penalty,accepted\n";
    for (const auto& row : trace) {
        out << row.draw_index << ',' << format_double(row.penalty) << ',' << (row.accepted ? 1 : 0) << '\n';
    }
}

}  // namespace finestrat
