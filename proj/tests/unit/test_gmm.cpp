#include "doctest.h"
#include "finestrat/gmm.hpp"
#include "finestrat/rng.hpp"

#include <cmath>
#include <memory>

using namespace finestrat;

namespace {

ExperimentFrame frame_with(const Matrix& x, const std::vector<int>& d, const std::vector<double>& y, double p) {
    ExperimentFrame f;
    std::vector<std::string> names;
    RoleIndices roles;
    for (Index j = 0; j < x.cols(); ++j) {
        names.push_back("x" + std::to_string(j));
        roles.x.push_back(j);
    }
    f.covariates = std::make_shared<CovariateTable>(x, names, roles);
    f.d = Eigen::Map<const Eigen::VectorXi>(d.data(), static_cast<Index>(d.size()));
    f.y = Eigen::Map<const Vector>(y.data(), static_cast<Index>(y.size()));
    f.p = p;
    return f;
}

}  // namespace

TEST_CASE("SATE equals the difference in means under balanced arms") {
    const Matrix x = Matrix::Ones(6, 1);
    const auto f = frame_with(x, {1, 0, 1, 0, 1, 0}, {5, 1, 7, 2, 6, 3}, 0.5);
    const GmmFit fit = solve_gmm(f, score_sate());
    CHECK(fit.theta[0] == doctest::Approx(6.0 - 2.0).epsilon(1e-14));
    CHECK(fit.Pi(0, 0) == 1.0);
    CHECK(fit.converged);
    const Matrix a = assignment_component(fit);
    CHECK(a.rows() == 6);
    CHECK(a.col(0).mean() == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("CATE BLP solves the normal equations of H*Y on X") {
    Rng rng(3, 1);
    const Index n = 40;
    Matrix x(n, 2);
    std::vector<int> d;
    std::vector<double> y;
    for (Index i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = rng.normal();
        d.push_back(static_cast<int>(i % 2));
        y.push_back(1.0 + 2.0 * d.back() * x(i, 1) + rng.normal());
    }
    const auto f = frame_with(x, d, y, 0.5);
    const GmmFit fit = solve_gmm(f, score_cate_blp());
    Matrix xx = Matrix::Zero(2, 2);
    Vector xy = Vector::Zero(2);
    for (Index i = 0; i < n; ++i) {
        const double h = d[i] ? 2.0 : -2.0;
        xx += x.row(i).transpose() * x.row(i);
        xy += h * y[i] * x.row(i).transpose();
    }
    const Vector want = xx.inverse() * xy;
    CHECK((fit.theta - want).norm() < 1e-10);
    CHECK((fit.G + xx / n).norm() < 1e-12);
}

TEST_CASE("LATE is the Wald ratio") {
    const Matrix x = Matrix::Ones(4, 1);
    auto f = frame_with(x, {1, 1, 0, 0}, {4, 2, 1, 1}, 0.5);
    f.d_endog = Vector::Map(std::vector<double>{1, 0, 0, 0}.data(), 4);
    const GmmFit fit = solve_gmm(f, score_late());
    // (3 - 1) / (0.5 - 0)
    CHECK(fit.theta[0] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("newton solver with and without an analytic jacobian") {
    auto f = [](const Vector& t) { return Vector::Constant(1, t[0] * t[0] * t[0] - 8.0); };
    auto j = [](const Vector& t) { return Matrix::Constant(1, 1, 3.0 * t[0] * t[0]); };
    const RootResult a = solve_moment_equations(f, j, Vector::Constant(1, 10.0));
    CHECK(a.theta[0] == doctest::Approx(2.0).epsilon(1e-10));
    const RootResult b = solve_moment_equations(f, {}, Vector::Constant(1, 10.0));
    CHECK(b.theta[0] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(!a.trace.empty());
}

TEST_CASE("solver reports non-convergence with its trace") {
    auto f = [](const Vector& t) { return Vector::Constant(1, t[0] * t[0] + 1.0); };
    try {
        solve_moment_equations(f, {}, Vector::Constant(1, 0.5));
        FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
        CHECK(!e.trace().empty());
    }
}

TEST_CASE("finite differences agree with the analytic jacobian") {
    auto f = [](const Vector& t) {
        Vector out(2);
        out << std::sin(t[0]) * t[1], t[0] * t[0] - std::exp(t[1]);
        return out;
    };
    Vector t(2);
    t << 0.3, -0.7;
    Matrix want(2, 2);
    want << std::cos(0.3) * -0.7, std::sin(0.3), 0.6, -std::exp(-0.7);
    CHECK((finite_difference_jacobian(f, t) - want).norm() < 1e-8);
}

TEST_CASE("over-identified and outcome-free estimation are rejected") {
    const Matrix x = Matrix::Ones(4, 1);
    auto f = frame_with(x, {1, 1, 0, 0}, {4, 2, 1, 1}, 0.5);
    EstimandSpec spec = score_sate();
    spec.dim_g = 2;
    CHECK_THROWS_AS(solve_gmm(f, spec), ConfigError);
    f.y.reset();
    CHECK_THROWS_AS(solve_gmm(f, score_sate()), ConfigError);
}

TEST_CASE("CLATE with no compliers has a singular jacobian") {
    Matrix x(4, 1);
    x << 1, 1, 1, 1;
    auto f = frame_with(x, {1, 1, 0, 0}, {4, 2, 1, 1}, 0.5);
    f.d_endog = Vector::Zero(4);
    CHECK_THROWS(solve_gmm(f, score_clate()));
}
