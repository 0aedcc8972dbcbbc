#ifndef FINESTRAT_ADJUST_HPP
#define FINESTRAT_ADJUST_HPP

#include "finestrat/core.hpp"
#include "finestrat/gmm.hpp"
#include "finestrat/stratify.hpp"
#include "finestrat/types.hpp"

#include <vector>

namespace finestrat {

struct AdjustmentFit {
    Matrix alpha;   // d_w x d_theta, beta1 - beta0
    Matrix beta1;
    Matrix beta0;
    Matrix gram;    // E_n[w_check w_check']
    double condition_number = 0.0;
    Vector theta_hat;
    Vector theta_adj;
    Matrix w;       // adjustment covariates used, n x d_w
    int iterations = 1;
};

/**
 * Solves gram * B = rhs by Cholesky. On failure runs a column-pivoted QR on
 * `w_check` and throws NumericalError naming the near-collinear columns.
 */
Matrix solve_gram(const Matrix& gram, const Matrix& rhs, const Matrix& w_check,
                  const std::vector<std::string>& names, double* condition_number = nullptr);

/** Covariance of the rows of a and b over units with d_i == arm, 1/n_d normalization. */
Matrix arm_covariance(const Matrix& a, const Matrix& b, const Assignment& d, int arm);

/**
 * beta_d = Var(D) E_n[w_check w_check']^{-1} Cov_n(w_check, Pi g_hat | D = d), alpha = beta1 - beta0,
 * theta_adj = theta_hat - E_n[H alpha' w]. An empty w returns theta_adj = theta_hat.
 */
AdjustmentFit fit_adjustment(const GmmFit& fit, const ExperimentFrame& frame, const GroupPartition& partition,
                             const Matrix& w, const std::vector<std::string>& w_names = {});

/** Solves the unadjusted problem, then adjusts; further iterations re-evaluate scores at theta_adj. */
AdjustmentFit two_step_adjust(const ExperimentFrame& frame, const GroupPartition& partition,
                              const EstimandSpec& spec, const Matrix& w, int iterations = 1,
                              const std::vector<std::string>& w_names = {});

/**
 * Closed-form CATE-BLP adjustment
 * alpha = E_n[w_check w_check']^{-1} [(1-p) Cov_n(w_check, Y X | 1) + p Cov_n(w_check, Y X | 0)] E_n[X X']^{-1},
 * with beta1 = (1-p)(...) and beta0 = -p(...) so that alpha = beta1 - beta0.
 */
AdjustmentFit one_step_cate_adjust(const ExperimentFrame& frame, const GroupPartition& partition,
                                   const Matrix& x, const Matrix& w);

struct DoubleRobustness {
    double imbalance_term = 0.0;  // sqrt(n)(gamma0 - gamma_hat)'(h1bar - h0bar)
    double residual_term = 0.0;   // sqrt(n) E_n[H (ybar - gamma0'h)]
    double total = 0.0;           // sqrt(n)(theta_adj - SATE) when ybar is the outcome level
};

/**
 * Splits the SATE estimation error of an adjustment with w = h. `ylevel` is
 * (1-p)Y(1) + pY(0) per unit, available in simulation.
 */
DoubleRobustness double_robustness_decomposition(const ExperimentFrame& frame, const AdjustmentFit& adj,
                                                 const Vector& gamma0, const Vector& ylevel);

}  // namespace finestrat

#endif  // FINESTRAT_ADJUST_HPP
