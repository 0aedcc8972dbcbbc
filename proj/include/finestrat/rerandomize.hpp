#ifndef FINESTRAT_RERANDOMIZE_HPP
#define FINESTRAT_RERANDOMIZE_HPP

#include "finestrat/core.hpp"
#include "finestrat/gmm.hpp"
#include "finestrat/randomize.hpp"
#include "finestrat/stratify.hpp"
#include "finestrat/types.hpp"

#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace finestrat {

/** v_i minus the mean of v over the group containing i. */
Matrix within_tuple_demean(const Matrix& v, const GroupPartition& partition);

/** Arm means difference h1bar - h0bar. */
Vector arm_mean_difference(const Matrix& v, const Assignment& d);

enum class ImbalanceKind { linear, mahalanobis, propensity, gmm };

struct ImbalanceStat {
    ImbalanceKind kind = ImbalanceKind::linear;
    Vector value;          // T_n, or the scalar statistic as a 1-vector
    double scalar = 0.0;   // M for quadratic statistics
    Vector raw;            // sqrt(n)(h1bar - h0bar) when defined
};

/** Var(D)^{-1} (k/(k-1)) E_n[x_check x_check']. */
Matrix mahalanobis_normalization(const Matrix& x, const GroupPartition& partition);

/** n (x1bar - x0bar)' Sigma_n^{-1} (x1bar - x0bar). Throws NumericalError when Sigma_n is singular. */
ImbalanceStat mahalanobis_stat(const Matrix& x, const Assignment& d, const GroupPartition& partition);
ImbalanceStat mahalanobis_stat(const ExperimentFrame& frame, const GroupPartition& partition,
                               const std::vector<Index>& x_cols);

/** alpha-quantile of chi-squared with r degrees of freedom, alpha in (0, 1 - 1e-6]. */
double chi2_threshold(int r, double alpha);

/** |x'gamma_bar| + |U'x|_q with 1/p + 1/q = 1; p may be infinity. */
double polar_penalty(const Vector& x, const Vector& gamma_bar, const Matrix& U, double p_exponent);

/** Conjugate exponent q of p in [1, inf]. */
double dual_exponent(double p_exponent);

enum class RegionShape {
    none,
    ball,
    ellipsoid_mahalanobis,
    polar,
    rectangle_polar,
    pilot_wald,
    propensity_threshold,
    gmm_region
};

RegionShape parse_region_shape(const std::string& name);
std::string to_string(RegionShape shape);

/**
 * Symmetric acceptance region {x : penalty(x) <= eps}. Every penalty is
 * positively homogeneous of degree one; quadratic shapes use the square root
 * of the quadratic form, so eps for a chi-squared calibrated ellipsoid is the
 * square root of the quantile.
 */
struct AcceptanceRegion {
    RegionShape shape = RegionShape::none;
    double eps = std::numeric_limits<double>::infinity();
    Vector gamma_bar;     // polar shapes
    Matrix U;             // polar shapes
    double p_exponent = 2.0;
    Matrix sigma;         // ellipsoid normalization; empty uses the statistic's own

    double penalty(const ImbalanceStat& stat) const;
    bool accepts(const ImbalanceStat& stat) const { return penalty(stat) <= eps; }
};

AcceptanceRegion unrestricted_region();
AcceptanceRegion ball_region(double eps);
/** Mahalanobis ellipsoid with eps^2 the alpha-quantile of chi2_r. */
AcceptanceRegion mahalanobis_region(int r, double alpha);
/** Belief set gamma_bar + U B_p(0,1); throws NumericalError when U is singular. */
AcceptanceRegion polar_region(Vector gamma_bar, Matrix U, double p_exponent, double eps);
/** Belief set prod_j [a_j, b_j]. */
AcceptanceRegion rectangle_region(const Vector& a, const Vector& b, double eps);
/** gamma_bar = pilot estimate, U = (c_alpha / m)^{1/2} Sigma^{1/2}, q = 2; c_alpha is the chi2 (1 - alpha) quantile. */
AcceptanceRegion pilot_wald_region(const Vector& gamma_pilot, const Matrix& sigma_pilot, double m,
                                   double alpha, double eps);
AcceptanceRegion propensity_region(double eps);

/** Computes the imbalance statistic of an assignment. Immutable and shareable. */
class ImbalanceEvaluator {
public:
    virtual ~ImbalanceEvaluator() = default;
    virtual ImbalanceStat evaluate(const Assignment& d) const = 0;
};

/** T_n = sqrt(n)(h1bar - h0bar). */
class LinearImbalance : public ImbalanceEvaluator {
public:
    explicit LinearImbalance(const Matrix& h);
    ImbalanceStat evaluate(const Assignment& d) const override;
    Index dim() const { return h_t_.rows(); }

protected:
    Vector raw(const Assignment& d) const;
    Matrix h_t_;
};

/** Linear statistic plus the Mahalanobis form with Sigma_n fixed from the partition. */
class MahalanobisImbalance : public LinearImbalance {
public:
    MahalanobisImbalance(const Matrix& x, const GroupPartition& partition);
    ImbalanceStat evaluate(const Assignment& d) const override;
    const Matrix& sigma() const { return sigma_; }

private:
    Matrix sigma_;
    Eigen::LLT<Matrix> chol_;
};

struct LogisticFit {
    Vector beta;
    Vector fitted;
    int iterations = 0;
    std::vector<double> trace;  // log-likelihood per iteration
};

/**
 * Logistic MLE by Newton with step-halving on standardized columns.
 * Throws ConvergenceError on separation or non-convergence.
 */
LogisticFit fit_logistic(const Matrix& x, const Assignment& d, double tol = 1e-10, int max_iterations = 100);

/** n E_n[(p - L(X'beta_hat))^2]; `x` should include an intercept column. */
ImbalanceStat propensity_stat(const Matrix& x, const Assignment& d, double p);
ImbalanceStat propensity_stat(const ExperimentFrame& frame, const std::vector<Index>& x_cols);

class PropensityImbalance : public ImbalanceEvaluator {
public:
    PropensityImbalance(Matrix x, double p);
    ImbalanceStat evaluate(const Assignment& d) const override;

private:
    Matrix x_;
    double p_;
};

/** Moment function m(x, beta) for the GMM imbalance criterion. */
struct MomentModel {
    std::function<Vector(const Eigen::Ref<const Vector>& x, const Vector& beta)> m;
    Index dim_beta = 0;
    std::string name = "custom";
};

/** m(x, beta) = x - beta. */
MomentModel location_moments(Index dim_x);
/** Per coordinate (x - mu, (x - mu)^2 - s2); beta = (mu_1..mu_d, s2_1..s2_d). */
MomentModel gaussian_location_scale_moments(Index dim_x);

/** Solves E_n[1{mask_i} m(X_i, beta)] = 0; a null mask uses every unit. `x_t` is d_x x n. */
Vector solve_moment_model(const Matrix& x_t, const MomentModel& model, const std::vector<char>* mask,
                          const Vector& beta0);

/** T^m = sqrt(n)(beta1_hat - beta0_hat). */
class GmmImbalance : public ImbalanceEvaluator {
public:
    GmmImbalance(const Matrix& x, MomentModel model);
    ImbalanceStat evaluate(const Assignment& d) const override;

    const Vector& beta_pooled() const { return beta_pooled_; }
    /** h_hat_i = m(X_i, beta_pooled), the feasible linear surrogate. */
    Matrix surrogate_covariates() const;
    /** G_m = E_n[dm/dbeta] at the pooled estimate. */
    Matrix surrogate_jacobian() const;

private:
    Matrix x_t_;
    MomentModel model_;
    Vector beta_pooled_;
};

ImbalanceStat gmm_imbalance(const Matrix& x, const MomentModel& model, const Assignment& d);

struct TraceRow {
    long draw_index = 0;
    double penalty = 0.0;
    bool accepted = false;
};

struct RerandomizeOptions {
    long max_draws = 1000000;
    bool record_trace = false;
};

struct RerandomizeResult {
    AssignmentDraw draw;
    ImbalanceStat stat;
    double penalty = 0.0;
    bool exhausted = false;  // max_draws reached; draw is the best seen
    std::vector<TraceRow> trace;
};

/**
 * Draw stratified assignments until the statistic falls in the region. On
 * exhaustion returns the minimum-penalty draw with `exhausted` set.
 */
RerandomizeResult rerandomize(const GroupPartition& partition, const ImbalanceEvaluator& evaluator,
                              const AcceptanceRegion& region, Rng& rng, const RerandomizeOptions& opts = {});

/** eps set to the empirical alpha-quantile of the penalty over R stratified draws. */
double calibrate_epsilon(const GroupPartition& partition, const ImbalanceEvaluator& evaluator,
                         const AcceptanceRegion& region, double alpha, int draws, Rng& rng);

/** CSV with header draw_index,penalty,accepted. */
void write_trace(std::ostream& out, const std::vector<TraceRow>& trace);

}  // namespace finestrat

#endif  // FINESTRAT_RERANDOMIZE_HPP
