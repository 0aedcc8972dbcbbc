#include "doctest.h"
#include "finestrat/randomize.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/stats.hpp"
#include "oracles.hpp"

#include <cmath>
#include <sstream>

using namespace finestrat;

namespace {

Matrix normal_matrix(Index n, Index m, Rng& rng) {
    Matrix x(n, m);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) x(i, j) = rng.normal();
    return x;
}

std::vector<std::vector<int>> as_int_groups(const GroupPartition& part) {
    std::vector<std::vector<int>> out;
    for (const auto& g : part.groups) out.emplace_back(g.begin(), g.end());
    return out;
}

std::vector<int> as_int(const Assignment& d) { return std::vector<int>(d.data(), d.data() + d.size()); }

}  // namespace

TEST_CASE("mahalanobis statistic matches the literal formula") {
    Rng rng(11, 0);
    for (auto [k, l] : {std::pair{2, 1}, std::pair{4, 2}, std::pair{3, 1}}) {
        const Matrix x = normal_matrix(60, 3, rng);
        const GroupPartition part = match_k_tuples(x.leftCols(1), MatchConfig{k, l, {}, MatchMethod::sorted_1d}, rng);
        const Assignment d = draw_stratified(part, rng).d;
        const ImbalanceStat s = mahalanobis_stat(x, d, part);
        CHECK(s.scalar == doctest::Approx(oracle::mahalanobis(x, as_int(d), as_int_groups(part), part.p()))
                              .epsilon(1e-10));
        const MahalanobisImbalance eval(x, part);
        CHECK(eval.evaluate(d).scalar == doctest::Approx(s.scalar).epsilon(1e-12));
    }
}

TEST_CASE("within-tuple demeaning centres every group") {
    Rng rng(2, 0);
    const Matrix x = normal_matrix(12, 2, rng);
    const GroupPartition part = random_groups(12, 3, 1, rng);
    const Matrix c = within_tuple_demean(x, part);
    for (const auto& g : part.groups) {
        Vector s = Vector::Zero(2);
        for (Index i : g) s += c.row(i).transpose();
        CHECK(s.norm() < 1e-14);
    }
}

TEST_CASE("collinear covariates make the statistic undefined") {
    Rng rng(4, 0);
    Matrix x = normal_matrix(20, 2, rng);
    x.col(1) = 2.0 * x.col(0);
    const GroupPartition part = random_groups(20, 2, 1, rng);
    CHECK_THROWS_AS(mahalanobis_stat(x, draw_stratified(part, rng).d, part), NumericalError);
}

TEST_CASE("chi-squared thresholds") {
    CHECK(chi2_threshold(5, 0.5) == doctest::Approx(oracle::chi2_quantile(0.5, 5)).epsilon(1e-9));
    CHECK(chi2_threshold(2, 0.1) == doctest::Approx(-2.0 * std::log(0.9)).epsilon(1e-12));
    CHECK_THROWS(chi2_threshold(5, 0.0));
    CHECK_THROWS(chi2_threshold(5, 1.0));
    const AcceptanceRegion r = mahalanobis_region(4, 0.01);
    CHECK(r.eps * r.eps == doctest::Approx(oracle::chi2_quantile(0.01, 4)).epsilon(1e-9));
}

TEST_CASE("polar penalty equals the supremum over the belief set") {
    Rng rng(5, 0);
    for (int rep = 0; rep < 20; ++rep) {
        const Vector x = normal_matrix(3, 1, rng).col(0);
        const Vector g = normal_matrix(3, 1, rng).col(0);
        const Matrix U = normal_matrix(3, 3, rng);
        const double pen = polar_penalty(x, g, U, 2.0);
        double sup = 0.0;
        for (int s = 0; s < 20000; ++s) {
            Vector b = normal_matrix(3, 1, rng).col(0);
            b /= b.norm();
            sup = std::max(sup, std::abs(x.dot(g + U * b)));
        }
        CHECK(sup <= pen * (1 + 1e-12));
        CHECK(sup >= 0.97 * pen);
        // the supremum is attained at the aligned direction
        const Vector star = U.transpose() * x / (U.transpose() * x).norm() * (x.dot(g) >= 0 ? 1.0 : -1.0);
        CHECK(std::abs(x.dot(g + U * star)) == doctest::Approx(pen).epsilon(1e-12));
    }
}

TEST_CASE("rectangle penalty has the closed form") {
    Vector a(2), b(2), x(2);
    a << -1, 0.5;
    b << 3, 1.5;
    x << 2, -3;
    const AcceptanceRegion r = rectangle_region(a, b, 1.0);
    ImbalanceStat s;
    s.value = x;
    // |x'(a+b)/2| + sum_j |x_j| (b_j - a_j)/2
    CHECK(r.penalty(s) == doctest::Approx(std::abs(2 * 1 - 3 * 1) + 2 * 2 + 3 * 0.5).epsilon(1e-14));
    // vertices of the rectangle attain it
    double sup = 0.0;
    for (double v0 : {a[0], b[0]})
        for (double v1 : {a[1], b[1]}) sup = std::max(sup, std::abs(x[0] * v0 + x[1] * v1));
    CHECK(r.penalty(s) == doctest::Approx(sup).epsilon(1e-14));
    CHECK_THROWS_AS(rectangle_region(b, a, 1.0), DomainError);
}

TEST_CASE("pilot Wald region scales the pilot covariance") {
    Vector g(2);
    g << 1, -1;
    const Matrix sigma = Matrix::Identity(2, 2) * 4.0;
    const AcceptanceRegion r = pilot_wald_region(g, sigma, 100.0, 0.05, 1.0);
    const double c = oracle::chi2_quantile(0.95, 2);
    CHECK(r.U(0, 0) == doctest::Approx(std::sqrt(c / 100.0) * 2.0).epsilon(1e-9));
    CHECK(r.U(0, 1) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("polar region rejects a singular U") {
    CHECK_THROWS_AS(polar_region(Vector::Zero(2), Matrix::Zero(2, 2), 2.0, 1.0), NumericalError);
}

TEST_CASE("rerandomization accepts only inside the region") {
    Rng rng(8, 0);
    const Matrix x = normal_matrix(100, 3, rng);
    const GroupPartition part = random_groups(100, 2, 1, rng);
    const MahalanobisImbalance eval(x, part);
    const AcceptanceRegion region = mahalanobis_region(3, 0.05);
    RerandomizeOptions opts;
    opts.record_trace = true;
    const RerandomizeResult res = rerandomize(part, eval, region, rng, opts);
    CHECK(!res.exhausted);
    CHECK(res.penalty <= region.eps);
    CHECK(res.draw.draw_index == static_cast<long>(res.trace.size()));
    for (std::size_t t = 0; t + 1 < res.trace.size(); ++t) CHECK(!res.trace[t].accepted);
    CHECK(res.trace.back().accepted);
    CHECK(res.draw.d.sum() == 50);
    std::ostringstream out;
    write_trace(out, res.trace);
    CHECK(out.str().rfind("draw_index,penalty,accepted\n", 0) == 0);
}

TEST_CASE("unrestricted region accepts the first draw") {
    Rng rng(9, 0);
    const Matrix x = normal_matrix(10, 1, rng);
    const GroupPartition part = random_groups(10, 2, 1, rng);
    const RerandomizeResult res = rerandomize(part, LinearImbalance(x), unrestricted_region(), rng);
    CHECK(res.draw.draw_index == 1);
}

TEST_CASE("exhaustion returns the best draw seen") {
    Rng rng(10, 0);
    const Matrix x = normal_matrix(20, 2, rng);
    const GroupPartition part = random_groups(20, 2, 1, rng);
    RerandomizeOptions opts;
    opts.max_draws = 50;
    opts.record_trace = true;
    const RerandomizeResult res = rerandomize(part, LinearImbalance(x), ball_region(1e-12), rng, opts);
    CHECK(res.exhausted);
    double best = 1e300;
    for (const auto& row : res.trace) best = std::min(best, row.penalty);
    CHECK(res.penalty == best);
}

TEST_CASE("calibrated epsilon yields the target acceptance rate") {
    Rng rng(12, 0);
    const Matrix x = normal_matrix(200, 2, rng);
    const GroupPartition part = random_groups(200, 2, 1, rng);
    const LinearImbalance eval(x);
    const AcceptanceRegion ball = ball_region(1.0);
    const double eps = calibrate_epsilon(part, eval, ball, 0.2, 4000, rng);
    int hits = 0;
    for (int r = 0; r < 4000; ++r) {
        ImbalanceStat s = eval.evaluate(draw_stratified(part, rng).d);
        hits += ball.penalty(s) <= eps;
    }
    CHECK(std::abs(hits / 4000.0 - 0.2) < 4 * std::sqrt(0.2 * 0.8 / 4000) * std::sqrt(2.0));
}

TEST_CASE("logistic fit recovers coefficients and detects separation") {
    Rng rng(13, 0);
    const Index n = 4000;
    Matrix x(n, 2);
    Assignment d(n);
    for (Index i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = rng.normal();
        const double pr = 1.0 / (1.0 + std::exp(-(0.5 + 1.0 * x(i, 1))));
        d[i] = rng.uniform() < pr ? 1 : 0;
    }
    const LogisticFit fit = fit_logistic(x, d);
    CHECK(fit.beta[0] == doctest::Approx(0.5).epsilon(0.3));
    CHECK(fit.beta[1] == doctest::Approx(1.0).epsilon(0.15));
    // score equations hold at the MLE
    CHECK((x.transpose() * (d.cast<double>() - fit.fitted)).norm() < 1e-6);
    for (size_t t = 1; t < fit.trace.size(); ++t) CHECK(fit.trace[t] >= fit.trace[t - 1] - 1e-9);

    Matrix xs(6, 2);
    xs << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
    Assignment ds(6);
    ds << 0, 0, 0, 1, 1, 1;
    CHECK_THROWS_AS(fit_logistic(xs, ds), ConvergenceError);
}

TEST_CASE("propensity statistic vanishes for a perfectly balanced binary covariate") {
    Matrix x(8, 2);
    x.col(0).setOnes();
    x.col(1) << 0, 0, 1, 1, 0, 0, 1, 1;
    Assignment d(8);
    d << 1, 0, 1, 0, 0, 1, 0, 1;
    const ImbalanceStat s = propensity_stat(x, d, 0.5);
    CHECK(s.scalar == doctest::Approx(0.0).scale(1.0));
    CHECK(propensity_region(1.0).penalty(s) < 1e-6);
}

TEST_CASE("GMM imbalance with location moments is the scaled mean difference") {
    Rng rng(14, 0);
    const Matrix x = normal_matrix(30, 2, rng);
    const GroupPartition part = random_groups(30, 2, 1, rng);
    const Assignment d = draw_stratified(part, rng).d;
    const ImbalanceStat s = gmm_imbalance(x, location_moments(2), d);
    const Vector want = std::sqrt(30.0) * arm_mean_difference(x, d);
    CHECK((s.value - want).norm() < 1e-10);
    const GmmImbalance eval(x, gaussian_location_scale_moments(2));
    CHECK((eval.beta_pooled().head(2) - column_means(x)).norm() < 1e-10);
    CHECK((eval.beta_pooled().tail(2) - empirical_covariance(x).diagonal()).norm() < 1e-10);
}
