#include "doctest.h"
#include "finestrat/rng.hpp"
#include "finestrat/stats.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace finestrat;

TEST_CASE("normal quantile matches bisection of the cdf") {
    CHECK(normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-5 / 1.96));
    for (double p : {1e-8, 0.001, 0.025, 0.3, 0.5, 0.7, 0.975, 0.999, 1 - 1e-8}) {
        const double want = oracle::normal_quantile(p);
        CHECK(std::abs(normal_quantile(p) - want) <= 1e-10 * std::max(1.0, std::abs(want)));
    }
    CHECK(normal_cdf(0.0) == 0.5);
    CHECK_THROWS_AS(normal_quantile(0.0), DomainError);
    CHECK_THROWS_AS(normal_quantile(1.0), DomainError);
}

TEST_CASE("chi-squared cdf and quantile match the incomplete gamma series") {
    for (double k : {1.0, 2.0, 4.0, 5.0, 6.0, 19.0}) {
        for (double x : {0.01, 0.5, 1.0, 3.0, 7.5, 20.0}) {
            CHECK(chi2_cdf(x, k) == doctest::Approx(oracle::chi2_cdf(x, k)).epsilon(1e-10));
        }
        for (double a : {0.002, 0.01, 0.1, 0.5, 0.95}) {
            CHECK(chi2_quantile(a, k) == doctest::Approx(oracle::chi2_quantile(a, k)).epsilon(1e-9));
        }
    }
    // two degrees of freedom: exponential with mean 2
    CHECK(chi2_quantile(0.5, 2.0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("covariance and square root") {
    Matrix v(4, 2);
    v << 1, 0, 3, 2, 5, 2, 7, 4;
    const Vector mu = column_means(v);
    CHECK(mu[0] == 4.0);
    CHECK(mu[1] == 2.0);
    const Matrix c = empirical_covariance(v);
    CHECK(c(0, 0) == 5.0);
    CHECK(c(1, 1) == 2.0);
    CHECK(c(0, 1) == 3.0);
    Matrix s(2, 2);
    s << 4, 1, 1, 3;
    const Matrix r = psd_sqrt(s);
    CHECK((r * r - s).norm() < 1e-12);
}

TEST_CASE("ks distance") {
    CHECK(ks_distance({1, 2, 3, 4}, {1, 2, 3, 4}) == 0.0);
    CHECK(ks_distance({1, 2}, {3, 4}) == 1.0);
    CHECK(ks_distance({1, 2, 3, 4}, {3, 4, 5, 6}) == 0.5);
}

TEST_CASE("anderson-darling separates normal from exponential") {
    Rng rng(7, 0);
    std::vector<double> gauss, expo;
    for (int i = 0; i < 2000; ++i) {
        gauss.push_back(3.0 + 2.0 * rng.normal());
        expo.push_back(-std::log(rng.uniform()));
    }
    CHECK(anderson_darling_normal(gauss).p_value > 0.01);
    CHECK(anderson_darling_normal(expo).p_value < 1e-6);
}

TEST_CASE("ranks and correlations") {
    const auto r = ranks({10, 20, 20, 5});
    CHECK(r == std::vector<double>{2, 3.5, 3.5, 1});
    CHECK(spearman({1, 2, 3, 4}, {1, 8, 27, 64}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
}

TEST_CASE("empirical quantile interpolates order statistics") {
    CHECK(empirical_quantile({4, 1, 3, 2}, 0.0) == 1.0);
    CHECK(empirical_quantile({4, 1, 3, 2}, 1.0) == 4.0);
    CHECK(empirical_quantile({4, 1, 3, 2}, 0.5) == 2.5);
}
