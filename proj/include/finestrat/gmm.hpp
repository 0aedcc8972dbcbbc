#ifndef FINESTRAT_GMM_HPP
#define FINESTRAT_GMM_HPP

#include "finestrat/core.hpp"
#include "finestrat/types.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace finestrat {

/** Everything a score may read about unit i. */
struct UnitView {
    int d = 0;              // assignment (instrument in LATE settings)
    double h = 0.0;         // Horvitz-Thompson weight (d - p) / (p - p^2)
    double y = 0.0;
    double d_endog = 0.0;   // treatment taken; equals d when absent
    Eigen::Ref<const Vector> x;
};

using ScoreFn = std::function<Vector(const UnitView&, const Vector& theta)>;
using ScoreJacobianFn = std::function<Matrix(const UnitView&, const Vector& theta)>;

enum class EstimandName { sate, cate_blp, late, clate, custom };
enum class Link { identity, linear, logit };

std::string to_string(EstimandName name);

/**
 * An exactly identified moment condition E[g(D, R, S, theta)] = 0.
 *
 * `x_cols` selects the heterogeneity regressors from the covariate table;
 * empty means the table's x role. When `jacobian` is absent the solver uses
 * central finite differences.
 */
struct EstimandSpec {
    EstimandName name = EstimandName::custom;
    Index dim_theta = 1;
    Index dim_g = 1;
    ScoreFn score;
    std::optional<ScoreJacobianFn> jacobian;
    std::vector<Index> x_cols;
    bool uses_x = false;
    bool needs_outcome = true;
    std::function<Vector(const std::vector<UnitView>&)> warm_start;
};

EstimandSpec score_sate();
EstimandSpec score_cate_blp(std::vector<Index> x_cols = {});
/** Wald-ratio LATE: f(X, theta) = theta. */
EstimandSpec score_late();
/** Conditional LATE with f(X, theta) = link(X'theta); link is linear or logit. */
EstimandSpec score_clate(std::vector<Index> x_cols = {}, Link link = Link::linear);

struct GmmFit {
    Vector theta;
    Matrix Pi;      // -G^{-1}
    Matrix G;       // E_n[dg/dtheta] at theta
    Matrix scores;  // n x d_g, g_i(theta)
    bool converged = false;
    int iterations = 0;
    std::vector<double> trace;  // sup-norm of the mean moment per iteration
};

struct SolverOptions {
    double tol = 1e-10;
    int max_iterations = 200;
    int max_halvings = 40;
};

struct RootResult {
    Vector theta;
    Matrix jacobian;
    int iterations = 0;
    std::vector<double> trace;
};

/**
 * Newton root finding for f(theta) = 0 with step-halving on the sup norm.
 * Tolerance is relative to max(1, |f(theta0)|_inf). Throws ConvergenceError.
 */
RootResult solve_moment_equations(const std::function<Vector(const Vector&)>& f,
                                  const std::function<Matrix(const Vector&)>& jacobian,
                                  Vector theta0, const SolverOptions& opts = {});

/** Central differences with step 1e-6 * max(1, |theta_j|). */
Matrix finite_difference_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& theta);

/** Per-unit views of a frame; x rows come from `x_t` (d_x x n, one column per unit). */
std::vector<UnitView> unit_views(const ExperimentFrame& frame, const Matrix& x_t);

/** Transposed regressor matrix used by the spec (empty when unused). */
Matrix regressors_transposed(const ExperimentFrame& frame, const EstimandSpec& spec);

/** Mean score E_n[g_i(theta)] and its Jacobian. */
Vector mean_score(const std::vector<UnitView>& units, const EstimandSpec& spec, const Vector& theta);
Matrix mean_jacobian(const std::vector<UnitView>& units, const EstimandSpec& spec, const Vector& theta);

GmmFit solve_gmm(const ExperimentFrame& frame, const EstimandSpec& spec,
                 std::optional<Vector> theta_init = std::nullopt, const SolverOptions& opts = {});

/** Rows are Pi g_i(theta_hat), the observable influence contributions. */
Matrix assignment_component(const GmmFit& fit);

/** Scores and Jacobian re-evaluated at a new theta, Pi refreshed. */
GmmFit evaluate_at(const ExperimentFrame& frame, const EstimandSpec& spec, const Vector& theta);

}  // namespace finestrat

#endif  // FINESTRAT_GMM_HPP
