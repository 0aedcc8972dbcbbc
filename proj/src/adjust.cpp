#include "finestrat/adjust.hpp"

#include "finestrat/rerandomize.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace finestrat {

Matrix solve_gram(const Matrix& gram, const Matrix& rhs, const Matrix& w_check,
                  const std::vector<std::string>& names, double* condition_number) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    const double hi = eig.eigenvalues().maxCoeff();
    const double lo = eig.eigenvalues().minCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (condition_number) *condition_number = cond;
    Eigen::LLT<Matrix> chol(gram);
    if (chol.info() == Eigen::Success && hi > 0.0 && cond < 1e12) return chol.solve(rhs);

    Eigen::ColPivHouseholderQR<Matrix> qr(w_check);
    qr.setThreshold(1e-9);
    const Index rank = qr.rank();
    std::ostringstream msg;
    msg << "adjustment design matrix is singular (condition number " << format_double(cond) << ", rank " << rank
        << " of " << gram.cols() << ")";
    std::vector<std::string> dropped;
    for (Index j = rank; j < gram.cols(); ++j) {
        const Index col = qr.colsPermutation().indices()[j];
        dropped.push_back(static_cast<std::size_t>(col) < names.size() ? names[col] : "w[" + std::to_string(col) + "]");
    }
    if (!dropped.empty()) {
        msg << "; near-collinear after within-group demeaning:";
        for (const auto& n : dropped) msg << ' ' << n;
        msg << " (remove stratification-measurable or duplicated columns from w)";
    }
    throw NumericalError(msg.str());
}

Matrix arm_covariance(const Matrix& a, const Matrix& b, const Assignment& d, int arm) {
    Eigen::RowVectorXd ma = Eigen::RowVectorXd::Zero(a.cols()), mb = Eigen::RowVectorXd::Zero(b.cols());
    Index count = 0;
    for (Index i = 0; i < a.rows(); ++i) {
        if (d[i] != arm) continue;
        ma += a.row(i);
        mb += b.row(i);
        ++count;
    }
    if (count == 0) throw DomainError("arm " + std::to_string(arm) + " is empty");
    ma /= static_cast<double>(count);
    mb /= static_cast<double>(count);
    Matrix cov = Matrix::Zero(a.cols(), b.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        if (d[i] != arm) continue;
        cov.noalias() += (a.row(i) - ma).transpose() * (b.row(i) - mb);
    }
    return cov / static_cast<double>(count);
}

namespace {

// E_n[H w], evaluated on demeaned w so it is exactly invariant to column shifts.
Vector ht_mean(const Matrix& w_check, const Vector& h) {
    return (w_check.transpose() * h) / static_cast<double>(w_check.rows());
}

AdjustmentFit empty_adjustment(const Vector& theta, Index n) {
    AdjustmentFit adj;
    adj.theta_hat = theta;
    adj.theta_adj = theta;
    adj.alpha = adj.beta1 = adj.beta0 = Matrix::Zero(0, theta.size());
    adj.gram = Matrix::Zero(0, 0);
    adj.w = Matrix::Zero(n, 0);
    return adj;
}

}  // namespace

AdjustmentFit fit_adjustment(const GmmFit& fit, const ExperimentFrame& frame, const GroupPartition& partition,
                             const Matrix& w, const std::vector<std::string>& w_names) {
    const Index n = frame.n();
    if (w.rows() != n) throw ConfigError("adjustment covariates have the wrong number of rows");
    if (w.cols() == 0) return empty_adjustment(fit.theta, n);

    const Matrix w_check = within_tuple_demean(w, partition);
    const Matrix pig = assignment_component(fit);
    const double var_d = frame.var_d();

    AdjustmentFit adj;
    adj.gram = (w_check.transpose() * w_check) / static_cast<double>(n);
    Matrix rhs(w.cols(), 2 * pig.cols());
    rhs << arm_covariance(w_check, pig, frame.d, 1), arm_covariance(w_check, pig, frame.d, 0);
    const Matrix solved = var_d * solve_gram(adj.gram, rhs, w_check, w_names, &adj.condition_number);
    adj.beta1 = solved.leftCols(pig.cols());
    adj.beta0 = solved.rightCols(pig.cols());
    adj.alpha = adj.beta1 - adj.beta0;
    adj.theta_hat = fit.theta;
    adj.theta_adj = fit.theta - adj.alpha.transpose() * ht_mean(w_check, horvitz_thompson_weights(frame));
    adj.w = w;
    return adj;
}

AdjustmentFit two_step_adjust(const ExperimentFrame& frame, const GroupPartition& partition,
                              const EstimandSpec& spec, const Matrix& w, int iterations,
                              const std::vector<std::string>& w_names) {
    if (iterations < 1) throw ConfigError("two-step adjustment needs at least one iteration");
    const GmmFit fit = solve_gmm(frame, spec);
    AdjustmentFit adj = fit_adjustment(fit, frame, partition, w, w_names);
    for (int it = 2; it <= iterations; ++it) {
        GmmFit at = evaluate_at(frame, spec, adj.theta_adj);
        at.theta = fit.theta;  // adjustment is always applied to the unadjusted estimate
        const Vector previous = adj.theta_adj;
        adj = fit_adjustment(at, frame, partition, w, w_names);
        adj.iterations = it;
        if ((adj.theta_adj - previous).cwiseAbs().maxCoeff() < 1e-8) break;
    }
    return adj;
}

AdjustmentFit one_step_cate_adjust(const ExperimentFrame& frame, const GroupPartition& partition,
                                   const Matrix& x, const Matrix& w) {
    const Index n = frame.n();
    const Vector& y = frame.outcome();
    if (x.rows() != n || w.rows() != n) throw ConfigError("regressors have the wrong number of rows");
    const Vector h = horvitz_thompson_weights(frame);
    const Matrix xx = (x.transpose() * x) / static_cast<double>(n);
    Eigen::LLT<Matrix> xchol(xx);
    if (xchol.info() != Eigen::Success) throw NumericalError("E_n[X X'] is singular");
    const Vector theta = xchol.solve((x.transpose() * (h.cwiseProduct(y))) / static_cast<double>(n));
    if (w.cols() == 0) return empty_adjustment(theta, n);

    const Matrix w_check = within_tuple_demean(w, partition);
    const Matrix yx = x.array().colwise() * y.array();
    const double p = frame.p;
    AdjustmentFit adj;
    adj.gram = (w_check.transpose() * w_check) / static_cast<double>(n);
    const Matrix xx_inv = xchol.solve(Matrix::Identity(x.cols(), x.cols()));
    Matrix rhs(w.cols(), 2 * x.cols());
    rhs << arm_covariance(w_check, yx, frame.d, 1), arm_covariance(w_check, yx, frame.d, 0);
    const Matrix solved = solve_gram(adj.gram, rhs, w_check, {}, &adj.condition_number);
    adj.beta1 = (1.0 - p) * solved.leftCols(x.cols()) * xx_inv;
    adj.beta0 = -p * solved.rightCols(x.cols()) * xx_inv;
    adj.alpha = adj.beta1 - adj.beta0;
    adj.theta_hat = theta;
    adj.theta_adj = theta - adj.alpha.transpose() * ht_mean(w_check, h);
    adj.w = w;
    return adj;
}

DoubleRobustness double_robustness_decomposition(const ExperimentFrame& frame, const AdjustmentFit& adj,
                                                 const Vector& gamma0, const Vector& ylevel) {
    if (adj.alpha.cols() != 1) throw ConfigError("double-robustness decomposition needs a scalar estimand");
    if (gamma0.size() != adj.w.cols()) throw ConfigError("gamma0 dimension does not match w");
    if (ylevel.size() != frame.n()) throw ConfigError("outcome level has the wrong length");
    const Vector h = horvitz_thompson_weights(frame);
    const double n = static_cast<double>(frame.n());
    const Vector imbalance = (adj.w.transpose() * h) / n;  // h1bar - h0bar under stratification
    DoubleRobustness out;
    out.imbalance_term = std::sqrt(n) * (gamma0 - adj.alpha.col(0)).dot(imbalance);
    out.residual_term = std::sqrt(n) * h.dot(ylevel - adj.w * gamma0) / n;
    out.total = out.imbalance_term + out.residual_term;
    return out;
}

}  // namespace finestrat
