#include "doctest.h"
#include "finestrat/adjust.hpp"
#include "finestrat/randomize.hpp"
#include "finestrat/simulate.hpp"

#include <cmath>

using namespace finestrat;

namespace {

struct Sample {
    ExperimentFrame frame;
    GroupPartition part;
    Matrix w;
    Vector y1, y0;
};

Sample make_sample(Index n, int k, int l, std::uint64_t seed) {
    Rng rng(seed, 0);
    Sample s;
    s.w.resize(n, 2);
    s.y1.resize(n);
    s.y0.resize(n);
    for (Index i = 0; i < n; ++i) {
        s.w(i, 0) = rng.normal();
        s.w(i, 1) = rng.normal();
        s.y0[i] = 1.0 + s.w(i, 0) - 0.5 * s.w(i, 1) + rng.normal();
        s.y1[i] = s.y0[i] + 2.0 + s.w(i, 1) + 0.3 * rng.normal();
    }
    s.part = match_k_tuples(s.w.leftCols(1), MatchConfig{k, l, {}, MatchMethod::sorted_1d}, rng);
    s.frame.d = draw_stratified(s.part, rng).d;
    s.frame.p = static_cast<double>(l) / k;
    Vector y(n);
    for (Index i = 0; i < n; ++i) y[i] = s.frame.d[i] ? s.y1[i] : s.y0[i];
    s.frame.y = y;
    return s;
}

// beta_d by the literal definition: Var(D) gram^{-1} Cov_n(w_check, H Y - theta | D = d).
Matrix literal_beta(const Sample& s, int arm) {
    const Index n = s.frame.n();
    const double p = s.frame.p;
    Matrix wc = s.w;
    for (const auto& g : s.part.groups) {
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(s.w.cols());
        for (Index i : g) mean += s.w.row(i);
        mean /= static_cast<double>(g.size());
        for (Index i : g) wc.row(i) = s.w.row(i) - mean;
    }
    Vector pig(n);
    double theta = 0;
    for (Index i = 0; i < n; ++i) {
        const double h = s.frame.d[i] ? 1 / p : -1 / (1 - p);
        pig[i] = h * (*s.frame.y)[i];
        theta += pig[i] / n;
    }
    pig.array() -= theta;
    Vector mw = Vector::Zero(s.w.cols());
    double mp = 0, cnt = 0;
    for (Index i = 0; i < n; ++i) {
        if (s.frame.d[i] != arm) continue;
        mw += wc.row(i).transpose();
        mp += pig[i];
        ++cnt;
    }
    mw /= cnt;
    mp /= cnt;
    Vector cov = Vector::Zero(s.w.cols());
    for (Index i = 0; i < n; ++i) {
        if (s.frame.d[i] == arm) cov += (wc.row(i).transpose() - mw) * (pig[i] - mp);
    }
    cov /= cnt;
    const Matrix gram = wc.transpose() * wc / static_cast<double>(n);
    return p * (1 - p) * gram.inverse() * cov;
}

}  // namespace

TEST_CASE("adjustment coefficients follow the definition") {
    for (auto [k, l] : {std::pair{2, 1}, std::pair{4, 2}, std::pair{4, 1}}) {
        const Sample s = make_sample(240, k, l, 17);
        const GmmFit fit = solve_gmm(s.frame, score_sate());
        const AdjustmentFit adj = fit_adjustment(fit, s.frame, s.part, s.w);
        CHECK((adj.beta1 - literal_beta(s, 1)).norm() < 1e-10);
        CHECK((adj.beta0 - literal_beta(s, 0)).norm() < 1e-10);
        CHECK(adj.alpha == adj.beta1 - adj.beta0);
        CHECK(adj.theta_hat == fit.theta);
        CHECK(adj.condition_number >= 1.0);
    }
}

TEST_CASE("adjustment is invariant to shifting the covariates") {
    const Sample s = make_sample(200, 2, 1, 5);
    const GmmFit fit = solve_gmm(s.frame, score_sate());
    const AdjustmentFit a = fit_adjustment(fit, s.frame, s.part, s.w);
    Matrix shifted = s.w;
    shifted.col(0).array() += 1000.0;
    shifted.col(1).array() -= 3.0;
    const AdjustmentFit b = fit_adjustment(fit, s.frame, s.part, shifted);
    CHECK(std::abs(a.theta_adj[0] - b.theta_adj[0]) < 1e-9);
}

TEST_CASE("no adjustment covariates leaves the estimate unchanged") {
    const Sample s = make_sample(40, 2, 1, 6);
    const GmmFit fit = solve_gmm(s.frame, score_sate());
    const AdjustmentFit adj = fit_adjustment(fit, s.frame, s.part, Matrix(40, 0));
    CHECK(adj.theta_adj == fit.theta);
    CHECK(adj.alpha.size() == 0);
}

TEST_CASE("collinear adjustment covariates are named") {
    const Sample s = make_sample(40, 2, 1, 7);
    const GmmFit fit = solve_gmm(s.frame, score_sate());
    Matrix w(40, 3);
    w << s.w, s.w.col(0) * 2.0 + s.w.col(1);
    try {
        fit_adjustment(fit, s.frame, s.part, w, {"age", "income", "score"});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("near-collinear") != std::string::npos);
        const bool named = msg.find("age") != std::string::npos || msg.find("income") != std::string::npos ||
                           msg.find("score") != std::string::npos;
        CHECK(named);
    }
}

TEST_CASE("one-step CATE with an intercept equals the SATE adjustment") {
    const Sample s = make_sample(120, 2, 1, 8);
    const GmmFit fit = solve_gmm(s.frame, score_sate());
    const AdjustmentFit two = fit_adjustment(fit, s.frame, s.part, s.w);
    const AdjustmentFit one = one_step_cate_adjust(s.frame, s.part, Matrix::Ones(120, 1), s.w);
    CHECK((one.alpha - two.alpha).norm() < 1e-10);
    CHECK(std::abs(one.theta_adj[0] - two.theta_adj[0]) < 1e-10);
}

TEST_CASE("one-step CATE matches dense algebra") {
    const Sample s = make_sample(160, 4, 2, 9);
    Matrix x(160, 2);
    x.col(0).setOnes();
    x.col(1) = s.w.col(1);
    const AdjustmentFit adj = one_step_cate_adjust(s.frame, s.part, x, s.w.leftCols(1));
    const Index n = 160;
    const Vector& y = *s.frame.y;
    Vector wc(n);
    for (const auto& g : s.part.groups) {
        double m = 0;
        for (Index i : g) m += s.w(i, 0);
        m /= 4;
        for (Index i : g) wc[i] = s.w(i, 0) - m;
    }
    const double gram = wc.squaredNorm() / n;
    const Matrix xx = x.transpose() * x / static_cast<double>(n);
    Eigen::RowVectorXd cov[2];
    for (int arm = 0; arm < 2; ++arm) {
        double mw = 0, cnt = 0;
        Eigen::RowVectorXd myx = Eigen::RowVectorXd::Zero(2);
        for (Index i = 0; i < n; ++i) {
            if (s.frame.d[i] != arm) continue;
            mw += wc[i];
            myx += y[i] * x.row(i);
            ++cnt;
        }
        mw /= cnt;
        myx /= cnt;
        cov[arm] = Eigen::RowVectorXd::Zero(2);
        for (Index i = 0; i < n; ++i) {
            if (s.frame.d[i] == arm) cov[arm] += (wc[i] - mw) * (y[i] * x.row(i) - myx);
        }
        cov[arm] /= cnt;
    }
    const Eigen::RowVectorXd alpha = (0.5 * cov[1] + 0.5 * cov[0]) / gram * xx.inverse();
    CHECK((adj.alpha.row(0) - alpha).norm() < 1e-10);
}

TEST_CASE("iterated adjustment converges and keeps the first step's alpha shape") {
    const Sample s = make_sample(200, 2, 1, 10);
    const AdjustmentFit one = two_step_adjust(s.frame, s.part, score_sate(), s.w, 1);
    const AdjustmentFit many = two_step_adjust(s.frame, s.part, score_sate(), s.w, 5);
    // the SATE score is linear in theta, so re-evaluation changes nothing
    CHECK(std::abs(one.theta_adj[0] - many.theta_adj[0]) < 1e-12);
}

TEST_CASE("double robustness decomposition sums to the estimation error") {
    const Sample s = make_sample(300, 2, 1, 11);
    const GmmFit fit = solve_gmm(s.frame, score_sate());
    const AdjustmentFit adj = fit_adjustment(fit, s.frame, s.part, s.w);
    const Vector ylevel = 0.5 * s.y1 + 0.5 * s.y0;
    Vector gamma0(2);
    gamma0 << 0.5, 0.0;
    const DoubleRobustness dr = double_robustness_decomposition(s.frame, adj, gamma0, ylevel);
    const double sate = (s.y1 - s.y0).mean();
    CHECK(dr.total == doctest::Approx(std::sqrt(300.0) * (adj.theta_adj[0] - sate)).epsilon(1e-9));
    CHECK(dr.total == doctest::Approx(dr.imbalance_term + dr.residual_term));
}
