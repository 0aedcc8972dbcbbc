#include "finestrat/inference.hpp"

#include "finestrat/stats.hpp"

#include <algorithm>
#include <cmath>

namespace finestrat {

namespace {

struct ArmSums {
    Matrix v1, v0;
};

// n^{-1} sum_s (1/(a_s - 1)) sum_{i != j in arm} psi_i psi_j' / p_arm, for each arm.
ArmSums within_arm(const std::vector<std::vector<Index>>& groups, const Matrix& psi, const Assignment& d,
                   double p) {
    const Index dt = psi.cols();
    ArmSums out{Matrix::Zero(dt, dt), Matrix::Zero(dt, dt)};
    Vector s1(dt), s0(dt);
    Matrix q1(dt, dt), q0(dt, dt);
    for (const auto& g : groups) {
        s1.setZero();
        s0.setZero();
        q1.setZero();
        q0.setZero();
        Index a = 0;
        for (Index i : g) {
            const auto row = psi.row(i).transpose();
            if (d[i] == 1) {
                s1 += row;
                q1.noalias() += row * row.transpose();
                ++a;
            } else {
                s0 += row;
                q0.noalias() += row * row.transpose();
            }
        }
        const Index b = static_cast<Index>(g.size()) - a;
        if (a < 2 || b < 2) {
            throw ConfigError("group with " + std::to_string(a) + " treated of " + std::to_string(g.size()) +
                              " units has fewer than two per arm; pair groups with pair_groups_by_centroid");
        }
        out.v1 += (s1 * s1.transpose() - q1) / static_cast<double>(a - 1);
        out.v0 += (s0 * s0.transpose() - q0) / static_cast<double>(b - 1);
    }
    const double n = static_cast<double>(d.size());
    out.v1 /= n * p;
    out.v0 /= n * (1.0 - p);
    return out;
}

Matrix sym(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

VarianceComponents variance_components(const ExperimentFrame& frame, const GroupPartition& partition,
                                       const AdjustmentFit& adj, const GmmFit& fit) {
    const Index n = frame.n();
    const double p = frame.p;
    const Matrix pig = assignment_component(fit);
    const Index dt = pig.cols();
    const Vector h = horvitz_thompson_weights(frame);

    VarianceComponents comp;
    comp.p = p;
    comp.n = n;
    comp.psi_a = frame.var_d() * pig;
    comp.s_hat = pig;
    if (adj.w.cols() > 0) {
        const Matrix w1 = adj.w * adj.beta1;
        const Matrix w0 = adj.w * adj.beta0;
        const Matrix wa = adj.w * adj.alpha;
        for (Index i = 0; i < n; ++i) {
            comp.psi_a.row(i) -= frame.d[i] == 1 ? w1.row(i) : w0.row(i);
            comp.s_hat.row(i) -= h[i] * wa.row(i);
        }
    }

    int min_arm = partition.k;
    for (const auto& g : partition.groups) {
        int a = 0;
        for (Index i : g) a += frame.d[i];
        min_arm = std::min({min_arm, a, static_cast<int>(g.size()) - a});
    }
    comp.used_collapsed = min_arm < 2;
    const ArmSums arms = within_arm(comp.used_collapsed ? collapsed_groups(partition) : partition.groups,
                                    comp.psi_a, frame.d, p);
    comp.v1 = arms.v1;
    comp.v0 = arms.v0;

    comp.v10 = Matrix::Zero(dt, dt);
    Vector s1(dt), s0(dt);
    for (const auto& g : partition.groups) {
        s1.setZero();
        s0.setZero();
        int a = 0;
        for (Index i : g) {
            if (frame.d[i] == 1) {
                s1 += comp.psi_a.row(i).transpose();
                ++a;
            } else {
                s0 += comp.psi_a.row(i).transpose();
            }
        }
        const int k = static_cast<int>(g.size());
        if (a == 0 || a == k) throw ConfigError("group without both arms in cross-arm variance component");
        comp.v10 += static_cast<double>(k) / (static_cast<double>(a) * (k - a)) * s1 * s0.transpose();
    }
    comp.v10 /= static_cast<double>(n);

    Matrix m1 = Matrix::Zero(dt, dt), m0 = Matrix::Zero(dt, dt);
    for (Index i = 0; i < n; ++i) {
        const auto row = comp.psi_a.row(i).transpose();
        if (frame.d[i] == 1) {
            m1.noalias() += row * row.transpose();
        } else {
            m0.noalias() += row * row.transpose();
        }
    }
    comp.u1 = sym(m1 / (static_cast<double>(n) * p) - comp.v1);
    comp.u0 = sym(m0 / (static_cast<double>(n) * (1.0 - p)) - comp.v0);
    return comp;
}

double finite_pop_bound(const VarianceComponents& comp, const Vector& c) {
    auto clipped = [&](const Matrix& u) {
        const double q = c.dot(u * c);
        const double scale = std::max(1.0, c.squaredNorm() * u.cwiseAbs().maxCoeff());
        if (q < -1e-6 * scale) {
            throw NumericalError("within-arm variance estimate c'u c = " + format_double(q) + " is materially negative");
        }
        return std::max(0.0, q);
    };
    const double r = std::sqrt(clipped(comp.u1)) + std::sqrt(clipped(comp.u0));
    return r * r / comp.var_d();
}

SuperpopVariance superpop_variance(const VarianceComponents& comp, bool score_scale) {
    const Matrix cross = comp.v1 + comp.v0 - comp.v10 - comp.v10.transpose();
    Matrix raw = score_scale ? Matrix(empirical_covariance(comp.psi_a) - comp.var_d() * cross)
                                   : Matrix(empirical_covariance(comp.s_hat) - cross / comp.var_d());
    raw = sym(raw);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(raw);
    Vector lambda = eig.eigenvalues();
    SuperpopVariance out;
    double negative = 0.0, positive = 0.0;
    for (Index j = 0; j < lambda.size(); ++j) {
        if (lambda[j] < 0.0) {
            negative -= lambda[j];
            lambda[j] = 0.0;
        } else {
            positive += lambda[j];
        }
    }
    out.clipped_mass = negative;
    out.clipped = negative > 1e-6 * std::max(positive, 1e-300);
    out.V = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
    return out;
}

InferenceReport confidence_intervals(const AdjustmentFit& adj, const VarianceComponents& comp,
                                     const SuperpopVariance& pop, double alpha, std::vector<Vector> contrasts) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("interval level alpha must lie in (0,1)");
    const Index dt = adj.theta_adj.size();
    if (contrasts.empty()) {
        for (Index j = 0; j < dt; ++j) contrasts.push_back(Vector::Unit(dt, j));
    }
    InferenceReport rep;
    rep.theta_hat = adj.theta_hat;
    rep.theta_adj = adj.theta_adj;
    rep.alpha = alpha;
    rep.z = normal_quantile(1.0 - alpha / 2.0);
    rep.components = comp;
    rep.V_pop = pop.V;
    if (comp.used_collapsed) rep.flags.emplace_back("collapsed-strata");
    if (pop.clipped) rep.flags.emplace_back("superpopulation-variance-clipped");
    const double root_n = std::sqrt(static_cast<double>(comp.n));
    for (auto& c : contrasts) {
        if (c.size() != dt) throw ConfigError("contrast dimension does not match theta");
        ContrastInterval ci;
        ci.estimate = c.dot(adj.theta_adj);
        ci.var_fin = finite_pop_bound(comp, c);
        ci.var_pop = std::max(0.0, c.dot(pop.V * c));
        const double hf = rep.z * std::sqrt(ci.var_fin) / root_n;
        const double hp = rep.z * std::sqrt(ci.var_pop) / root_n;
        ci.fin_lo = ci.estimate - hf;
        ci.fin_hi = ci.estimate + hf;
        ci.pop_lo = ci.estimate - hp;
        ci.pop_hi = ci.estimate + hp;
        ci.c = std::move(c);
        rep.contrasts.push_back(std::move(ci));
    }
    return rep;
}

InferenceReport estimate_and_infer(const ExperimentFrame& frame, const GroupPartition& partition,
                                   const EstimandSpec& spec, const Matrix& w, double alpha, int adjust_iterations,
                                   std::vector<Vector> contrasts, const std::vector<std::string>& w_names) {
    const AdjustmentFit adj = two_step_adjust(frame, partition, spec, w, adjust_iterations, w_names);
    const GmmFit at = evaluate_at(frame, spec, adj.theta_adj);
    const VarianceComponents comp = variance_components(frame, partition, adj, at);
    return confidence_intervals(adj, comp, superpop_variance(comp), alpha, std::move(contrasts));
}

}  // namespace finestrat
