#ifndef FINESTRAT_INFERENCE_HPP
#define FINESTRAT_INFERENCE_HPP

#include "finestrat/adjust.hpp"
#include "finestrat/core.hpp"
#include "finestrat/gmm.hpp"
#include "finestrat/stratify.hpp"
#include "finestrat/types.hpp"

#include <string>
#include <vector>

namespace finestrat {

struct VarianceComponents {
    Matrix v1, v0, v10;
    Matrix u1, u0;
    bool used_collapsed = false;
    Matrix psi_a;   // n x d_theta: Var(D) Pi g_i - D_i beta1'w_i - (1-D_i) beta0'w_i
    Matrix s_hat;   // n x d_theta: Pi g_i - H_i alpha'w_i
    double p = 0.5;
    Index n = 0;

    double var_d() const { return p * (1.0 - p); }
};

/**
 * Within-arm and cross-arm group components. `fit` should hold the scores at
 * theta_adj. Groups with fewer than two units in an arm are replaced by the
 * collapsed groups s ∪ rho(s) for v1 and v0; v10 always uses the original groups.
 */
VarianceComponents variance_components(const ExperimentFrame& frame, const GroupPartition& partition,
                                       const AdjustmentFit& adj, const GmmFit& fit);

/** Var(D)^{-1}([c'u1c]^{1/2} + [c'u0c]^{1/2})^2. */
double finite_pop_bound(const VarianceComponents& comp, const Vector& c);

struct SuperpopVariance {
    Matrix V;
    bool clipped = false;        // negative eigenvalues above 1e-6 trace were removed
    double clipped_mass = 0.0;   // sum of removed negative eigenvalues (absolute)
};

/**
 * Var_n(s_hat) - Var(D)^{-1}(v1 + v0 - v10 - v10'), symmetrized and projected
 * to the PSD cone. `score_scale` uses Var_n(psi_a) - Var(D)(...) instead.
 */
SuperpopVariance superpop_variance(const VarianceComponents& comp, bool score_scale = false);

struct ContrastInterval {
    Vector c;
    double estimate = 0.0;
    double var_fin = 0.0;
    double var_pop = 0.0;
    double fin_lo = 0.0, fin_hi = 0.0;
    double pop_lo = 0.0, pop_hi = 0.0;
};

struct InferenceReport {
    Vector theta_hat;
    Vector theta_adj;
    double alpha = 0.05;
    double z = 0.0;
    std::vector<ContrastInterval> contrasts;
    VarianceComponents components;
    Matrix V_pop;
    std::vector<std::string> flags;
};

/**
 * Intervals c'theta_adj +- z_{1-alpha/2} sqrt(V)/sqrt(n) for each contrast;
 * no contrasts means the coordinate vectors.
 */
InferenceReport confidence_intervals(const AdjustmentFit& adj, const VarianceComponents& comp,
                                     const SuperpopVariance& pop, double alpha,
                                     std::vector<Vector> contrasts = {});

/** Full pipeline: GMM, adjustment (w may be empty), variance components and intervals. */
InferenceReport estimate_and_infer(const ExperimentFrame& frame, const GroupPartition& partition,
                                   const EstimandSpec& spec, const Matrix& w, double alpha = 0.05,
                                   int adjust_iterations = 1, std::vector<Vector> contrasts = {},
                                   const std::vector<std::string>& w_names = {});

}  // namespace finestrat

#endif  // FINESTRAT_INFERENCE_HPP
