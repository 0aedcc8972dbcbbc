#include "finestrat/gmm.hpp"

#include <algorithm>
#include <cmath>

namespace finestrat {

namespace {

double sup_norm(const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

double logistic(double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

Vector wald_ratio(const std::vector<UnitView>& units) {
    double num = 0.0, den = 0.0;
    for (const auto& u : units) {
        num += u.h * u.y;
        den += u.h * u.d_endog;
    }
    if (den == 0.0) throw NumericalError("first stage E_n[H D] is zero; LATE is not identified");
    return Vector::Constant(1, num / den);
}

}  // namespace

std::string to_string(EstimandName name) {
    switch (name) {
    case EstimandName::sate: return "sate";
    case EstimandName::cate_blp: return "cate-blp";
    case EstimandName::late: return "late";
    case EstimandName::clate: return "clate";
    case EstimandName::custom: return "custom";
    }
    return "custom";
}

EstimandSpec score_sate() {
    EstimandSpec spec;
    spec.name = EstimandName::sate;
    spec.score = [](const UnitView& u, const Vector& theta) {
        return Vector::Constant(1, u.h * u.y - theta[0]);
    };
    spec.jacobian = [](const UnitView&, const Vector&) { return Matrix::Constant(1, 1, -1.0); };
    return spec;
}

EstimandSpec score_cate_blp(std::vector<Index> x_cols) {
    EstimandSpec spec;
    spec.name = EstimandName::cate_blp;
    spec.x_cols = std::move(x_cols);
    spec.uses_x = true;
    spec.dim_theta = spec.dim_g = -1;  // resolved from the regressors at solve time
    spec.score = [](const UnitView& u, const Vector& theta) -> Vector {
        return (u.h * u.y - u.x.dot(theta)) * u.x;
    };
    spec.jacobian = [](const UnitView& u, const Vector&) -> Matrix { return -u.x * u.x.transpose(); };
    return spec;
}

EstimandSpec score_late() {
    EstimandSpec spec;
    spec.name = EstimandName::late;
    spec.score = [](const UnitView& u, const Vector& theta) {
        return Vector::Constant(1, u.h * u.y - u.h * u.d_endog * theta[0]);
    };
    spec.jacobian = [](const UnitView& u, const Vector&) {
        return Matrix::Constant(1, 1, -u.h * u.d_endog);
    };
    spec.warm_start = wald_ratio;
    return spec;
}

EstimandSpec score_clate(std::vector<Index> x_cols, Link link) {
    EstimandSpec spec;
    spec.name = EstimandName::clate;
    spec.x_cols = std::move(x_cols);
    spec.uses_x = true;
    spec.dim_theta = spec.dim_g = -1;
    if (link == Link::linear || link == Link::identity) {
        spec.score = [](const UnitView& u, const Vector& theta) -> Vector {
            return (u.h * u.y - u.h * u.d_endog * u.x.dot(theta)) * u.x;
        };
        spec.jacobian = [](const UnitView& u, const Vector&) -> Matrix {
            return -u.h * u.d_endog * (u.x * u.x.transpose());
        };
        spec.warm_start = [](const std::vector<UnitView>& units) -> Vector {
            const Index dx = units.empty() ? 0 : units.front().x.size();
            Matrix a = Matrix::Zero(dx, dx);
            Vector b = Vector::Zero(dx);
            for (const auto& u : units) {
                a += u.h * u.d_endog * (u.x * u.x.transpose());
                b += u.h * u.y * u.x;
            }
            Eigen::FullPivLU<Matrix> lu(a);
            if (!lu.isInvertible()) return Vector::Zero(dx);
            return lu.solve(b);
        };
    } else {
        spec.score = [](const UnitView& u, const Vector& theta) -> Vector {
            const double f = logistic(u.x.dot(theta));
            return (u.h * u.y - u.h * u.d_endog * f) * f * (1.0 - f) * u.x;
        };
        spec.jacobian = [](const UnitView& u, const Vector& theta) -> Matrix {
            const double f = logistic(u.x.dot(theta));
            const double df = f * (1.0 - f);
            const double resid = u.h * u.y - u.h * u.d_endog * f;
            return (-u.h * u.d_endog * df * df + resid * df * (1.0 - 2.0 * f)) * (u.x * u.x.transpose());
        };
    }
    return spec;
}

Matrix finite_difference_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& theta) {
    const Vector f0 = f(theta);
    Matrix jac(f0.size(), theta.size());
    Vector tp = theta, tm = theta;
    for (Index j = 0; j < theta.size(); ++j) {
        const double step = 1e-6 * std::max(1.0, std::abs(theta[j]));
        tp[j] = theta[j] + step;
        tm[j] = theta[j] - step;
        jac.col(j) = (f(tp) - f(tm)) / (tp[j] - tm[j]);
        tp[j] = tm[j] = theta[j];
    }
    return jac;
}

RootResult solve_moment_equations(const std::function<Vector(const Vector&)>& f,
                                  const std::function<Matrix(const Vector&)>& jacobian,
                                  Vector theta0, const SolverOptions& opts) {
    RootResult out;
    out.theta = std::move(theta0);
    Vector value = f(out.theta);
    double norm = sup_norm(value);
    if (!std::isfinite(norm)) throw NumericalError("moment function is not finite at the starting value");
    const double tol = opts.tol * std::max(1.0, norm);
    out.trace.push_back(norm);
    auto jac_at = [&](const Vector& t) {
        return jacobian ? jacobian(t) : finite_difference_jacobian(f, t);
    };
    while (norm > tol) {
        if (out.iterations >= opts.max_iterations) {
            throw ConvergenceError("moment solver did not converge in " +
                                       std::to_string(opts.max_iterations) + " iterations",
                                   out.trace);
        }
        ++out.iterations;
        const Matrix jac = jac_at(out.theta);
        Eigen::FullPivLU<Matrix> lu(jac);
        if (!lu.isInvertible()) throw ConvergenceError("singular moment Jacobian", out.trace);
        const Vector step = lu.solve(value);
        double scale = 1.0;
        bool improved = false;
        for (int h = 0; h <= opts.max_halvings; ++h, scale *= 0.5) {
            const Vector cand = out.theta - scale * step;
            const Vector cand_value = f(cand);
            const double cand_norm = sup_norm(cand_value);
            if (std::isfinite(cand_norm) && cand_norm < norm) {
                out.theta = cand;
                value = cand_value;
                norm = cand_norm;
                improved = true;
                break;
            }
        }
        out.trace.push_back(norm);
        if (!improved) {
            if (norm <= 1e3 * tol) break;  // stalled at rounding level
            throw ConvergenceError("moment solver stalled: no step-halving reduced the moment norm",
                                   out.trace);
        }
    }
    out.jacobian = jac_at(out.theta);
    return out;
}

Matrix regressors_transposed(const ExperimentFrame& frame, const EstimandSpec& spec) {
    if (!spec.uses_x) return Matrix(0, frame.n());
    if (!frame.covariates) throw ConfigError("estimand needs regressors but the frame has no covariates");
    const auto& table = *frame.covariates;
    const auto& cols = spec.x_cols.empty() ? table.roles().x : spec.x_cols;
    if (cols.empty()) throw ConfigError("estimand '" + to_string(spec.name) + "' needs x columns");
    return table.columns(cols).transpose();
}

std::vector<UnitView> unit_views(const ExperimentFrame& frame, const Matrix& x_t) {
    const Vector h = horvitz_thompson_weights(frame);
    std::vector<UnitView> units;
    units.reserve(static_cast<std::size_t>(frame.n()));
    for (Index i = 0; i < frame.n(); ++i) {
        units.push_back(UnitView{frame.d[i], h[i], frame.y ? (*frame.y)[i] : 0.0,
                                 frame.d_endog ? (*frame.d_endog)[i] : static_cast<double>(frame.d[i]),
                                 x_t.col(i)});
    }
    return units;
}

Vector mean_score(const std::vector<UnitView>& units, const EstimandSpec& spec, const Vector& theta) {
    Vector total = Vector::Zero(spec.dim_g);
    for (const auto& u : units) total += spec.score(u, theta);
    return total / static_cast<double>(units.size());
}

Matrix mean_jacobian(const std::vector<UnitView>& units, const EstimandSpec& spec, const Vector& theta) {
    if (!spec.jacobian) {
        return finite_difference_jacobian([&](const Vector& t) { return mean_score(units, spec, t); }, theta);
    }
    Matrix total = Matrix::Zero(spec.dim_g, spec.dim_theta);
    for (const auto& u : units) total += (*spec.jacobian)(u, theta);
    return total / static_cast<double>(units.size());
}

namespace {

EstimandSpec resolve_dims(EstimandSpec spec, const Matrix& x_t) {
    if (spec.dim_theta < 0) spec.dim_theta = x_t.rows();
    if (spec.dim_g < 0) spec.dim_g = x_t.rows();
    if (spec.dim_g > spec.dim_theta) {
        throw ConfigError("over-identified GMM (dim g > dim theta) is not implemented");
    }
    if (spec.dim_g != spec.dim_theta) throw ConfigError("score is under-identified (dim g < dim theta)");
    if (!spec.score) throw ConfigError("estimand has no score function");
    return spec;
}

GmmFit finish(const std::vector<UnitView>& units, const EstimandSpec& spec, const Vector& theta) {
    GmmFit fit;
    fit.theta = theta;
    fit.scores.resize(static_cast<Index>(units.size()), spec.dim_g);
    for (std::size_t i = 0; i < units.size(); ++i) {
        fit.scores.row(static_cast<Index>(i)) = spec.score(units[i], theta).transpose();
    }
    if (!fit.scores.allFinite()) throw NumericalError("score is not finite at the solution");
    fit.G = mean_jacobian(units, spec, theta);
    Eigen::FullPivLU<Matrix> lu(fit.G);
    if (!lu.isInvertible()) throw NumericalError("score Jacobian is singular at the solution");
    fit.Pi = -lu.inverse();
    return fit;
}

}  // namespace

GmmFit solve_gmm(const ExperimentFrame& frame, const EstimandSpec& spec_in, std::optional<Vector> theta_init,
                 const SolverOptions& opts) {
    if (spec_in.needs_outcome && !frame.y) throw ConfigError("estimation requires outcomes y");
    const Matrix x_t = regressors_transposed(frame, spec_in);
    const EstimandSpec spec = resolve_dims(spec_in, x_t);
    const auto units = unit_views(frame, x_t);

    Vector theta0 = Vector::Zero(spec.dim_theta);
    if (theta_init) {
        theta0 = *theta_init;
    } else if (spec.warm_start) {
        theta0 = spec.warm_start(units);
    }
    if (theta0.size() != spec.dim_theta) throw ConfigError("initial value has the wrong dimension");

    auto f = [&](const Vector& t) { return mean_score(units, spec, t); };
    std::function<Matrix(const Vector&)> jac;
    if (spec.jacobian) jac = [&](const Vector& t) { return mean_jacobian(units, spec, t); };
    const RootResult root = solve_moment_equations(f, jac, theta0, opts);

    GmmFit fit = finish(units, spec, root.theta);
    fit.converged = true;
    fit.iterations = root.iterations;
    fit.trace = root.trace;
    return fit;
}

GmmFit evaluate_at(const ExperimentFrame& frame, const EstimandSpec& spec_in, const Vector& theta) {
    const Matrix x_t = regressors_transposed(frame, spec_in);
    const EstimandSpec spec = resolve_dims(spec_in, x_t);
    GmmFit fit = finish(unit_views(frame, x_t), spec, theta);
    fit.converged = true;
    return fit;
}

Matrix assignment_component(const GmmFit& fit) { return fit.scores * fit.Pi.transpose(); }

}  // namespace finestrat
