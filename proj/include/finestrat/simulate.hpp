#ifndef FINESTRAT_SIMULATE_HPP
#define FINESTRAT_SIMULATE_HPP

#include "finestrat/core.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/rng.hpp"
#include "finestrat/stratify.hpp"
#include "finestrat/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace finestrat {

enum class CovarianceKind { identity, equicorrelated };

/**
 * Outcome models Y(d) = c_d + r'beta_d + r'A_d r + e_d (models 1-3) and
 * Y(d) = 2 arctan(r'beta_d) + e_d (model 4). Model 0 is a constant-effect
 * check: Y(1) = tau + e, Y(0) = e with e shared across arms.
 */
struct DgpSpec {
    int model = 2;
    int dim = 5;
    Index n = 300;
    double p = 0.5;
    CovarianceKind covariance = CovarianceKind::identity;
    double residual_var = 4.0;
    double residual_corr = 0.8;
    double tau = 1.0;                     // model 0 only
    std::optional<double> compliance;     // share of compliers; the rest never take treatment

    void validate() const;
};

struct DgpDraw {
    Matrix r;           // n x dim
    Vector y1, y0;
    Vector ylevel;      // (1-p)Y(1) + pY(0)
    std::optional<Vector> complier;  // 1 for compliers when compliance is set
};

DgpDraw generate_dgp(const DgpSpec& spec, Rng& rng);
/** Same draw with an explicit sample size. */
DgpDraw generate_dgp(const DgpSpec& spec, Index n, Rng& rng);

/** Table with columns r1..r_dim, every role empty. */
CovariateTable covariate_table(const Matrix& r);

/** ATE where it is known in closed form (models 0-4 with identity covariance). */
std::optional<double> analytic_ate(const DgpSpec& spec);

/** Linear and quadratic coefficients of the model (exposed for tests). */
struct ModelCoefficients {
    Vector beta1, beta0;
    Vector a1_diag;  // A_1 diagonal, A_0 = 0
};
ModelCoefficients model_coefficients(int model, int dim);

/** One design of the comparison: how to match, what to rerandomize on and what to adjust for. */
struct DesignSpec {
    std::string name;
    bool complete = false;            // a single coarse cell: random groups
    MatchMethod method = MatchMethod::greedy_nn;
    std::vector<Index> psi_cols;      // columns of r
    std::vector<double> psi_weights;
    std::vector<Index> h_cols;
    double accept_alpha = 0.0;        // 0 disables rerandomization
    std::vector<Index> w_cols;
    long max_draws = 1000000;
    int k = 2;
    int l = 1;
};

/** Complete randomization, adjusting for every covariate. */
DesignSpec design_complete(int dim);
/** Full stratification on r, with r_1 up-weighted by sqrt(2) for models 2-4. */
DesignSpec design_stratified(int model, int dim);
/** Pairs on r_1, Mahalanobis rerandomization on r_2:m, adjust for r_2:m. */
DesignSpec design_stratified_rerandomized(int dim, double accept_alpha = 1.0 / 500.0);
DesignSpec named_design(const std::string& name, int model, int dim);

struct DesignOutcome {
    GroupPartition partition;
    Assignment d;
    long draws = 1;
    bool exhausted = false;
};

/** Builds the partition (paired by centroid) and draws the assignment. */
DesignOutcome apply_design(const DesignSpec& design, const Matrix& r, double p, Rng& rng);

struct PopulationQuantities {
    double theta0 = 0.0;
    double V_phi = 0.0;       // Var(Y(1) - Y(0))
    double V_strat = 0.0;     // Var(D)^{-1} E[Var(ybar | psi)], unadjusted pure stratification
    double V_theta = 0.0;     // Var(D)^{-1} E[Var(ybar - gamma0'h | psi)]
    double V_adj = 0.0;       // Var(D)^{-1} E[Var(ybar - alpha0'w | psi)]
    Vector gamma0;            // projection of ybar on h given psi
    Vector alpha0;            // projection of ybar on w given psi
    Matrix var_zh;            // Var(D)^{-1} E[Var(h | psi)]
    double V_pop() const { return V_phi + V_adj; }
};

/**
 * Plug-in SATE quantities on a synthetic sample of size `big_n`. E[Var(. | psi)]
 * is the within-pair variance after sorted matching when psi is one column,
 * the marginal variance when psi is empty, and greedy matching otherwise.
 */
PopulationQuantities population_variances(const DgpSpec& spec, const DesignSpec& design, Index big_n, Rng& rng);

/**
 * Draws N(0, V_theta) + gamma0'z_h with z_h ~ N(0, var_zh) conditioned on
 * z_h in the region, by rejection. Throws DomainError when the measured
 * acceptance rate falls below 1e-4.
 */
std::vector<double> oracle_limit_sampler(double V_theta, const Vector& gamma0, const Matrix& var_zh,
                                         const AcceptanceRegion& region, int draws, Rng& rng);

struct ReplicateOutcome {
    bool ok = false;
    double theta_n = 0.0;
    double theta_hat = 0.0;
    double theta_adj = 0.0;
    long draws = 0;
    bool exhausted = false;
    // index 0: unadjusted, 1: adjusted
    double pop_lo[2] = {0, 0}, pop_hi[2] = {0, 0};
    double fin_lo[2] = {0, 0}, fin_hi[2] = {0, 0};
    double V_pop[2] = {0, 0};
};

struct EstimatorSummary {
    std::string design;
    std::string estimator;  // "unadjusted" or "adjusted"
    Index replicates = 0;
    double mse = 0.0;
    double mse_se = 0.0;
    double mse_ratio = 0.0;
    double cover_pop = 0.0;
    double cover_fin = 0.0;
    double width_pop = 0.0;   // normalized: adjusted C pop width = 1 when design C is present
    double width_fin = 0.0;
    double mean_draws = 0.0;
};

struct MonteCarloConfig {
    DgpSpec dgp;
    std::vector<DesignSpec> designs;
    int replicates = 2000;
    std::uint64_t seed = 20240101;
    int threads = 1;
    double ci_alpha = 0.05;
    std::optional<double> theta0;   // defaults to analytic_ate
    std::string baseline = "C";
};

struct MonteCarloResult {
    MonteCarloConfig config;
    double theta0 = 0.0;
    int failures = 0;
    std::vector<std::string> failure_messages;
    std::vector<std::vector<ReplicateOutcome>> outcomes;  // [design][replicate]
    std::vector<EstimatorSummary> rows;
};

/** Runs one replicate of every design on a common draw of the data. */
std::vector<ReplicateOutcome> run_replicate(const MonteCarloConfig& cfg, int replicate);

/** Throws NumericalError when more than 1% of replicates fail. */
MonteCarloResult run_monte_carlo(const MonteCarloConfig& cfg);

/** Columns: model,dim,n,design,estimator,mse_ratio,cover_pop,cover_fin,width_pop,width_fin,mean_draws. */
void write_results_csv(std::ostream& out, const MonteCarloResult& result);

}  // namespace finestrat

#endif  // FINESTRAT_SIMULATE_HPP
