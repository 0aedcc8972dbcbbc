#include "finestrat/stats.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace finestrat {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double prob) {
    if (!(prob > 0.0 && prob < 1.0)) throw DomainError("normal quantile needs prob in (0,1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), prob);
}

double chi2_cdf(double x, double dof) {
    if (x <= 0.0) return 0.0;
    return boost::math::cdf(boost::math::chi_squared_distribution<double>(dof), x);
}

double chi2_quantile(double prob, double dof) {
    if (!(dof > 0.0)) throw DomainError("chi-squared degrees of freedom must be positive");
    if (!(prob > 0.0 && prob < 1.0)) throw DomainError("chi-squared quantile needs prob in (0,1)");
    return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), prob);
}

Vector column_means(const Matrix& v) { return v.colwise().mean().transpose(); }

Matrix empirical_covariance(const Matrix& v) {
    const Matrix c = v.rowwise() - v.colwise().mean();
    return (c.transpose() * c) / static_cast<double>(v.rows());
}

Matrix psd_sqrt(const Matrix& s) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (s + s.transpose()));
    Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

double ks_distance(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw DomainError("KS distance needs non-empty samples");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(i / na - j / nb));
    }
    return d;
}

AndersonDarling anderson_darling_normal(std::vector<double> x) {
    const auto n = x.size();
    if (n < 8) throw DomainError("Anderson-Darling test needs at least 8 observations");
    std::sort(x.begin(), x.end());
    const double dn = static_cast<double>(n);
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / dn;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (dn - 1.0));
    if (!(sd > 0.0)) throw DomainError("Anderson-Darling test needs non-constant data");

    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double zi = (x[i] - mean) / sd;
        const double zr = (x[n - 1 - i] - mean) / sd;
        // log Phi(z) and log(1 - Phi(z)) via erfc keep precision in the tails
        const double log_cdf = std::log(0.5 * std::erfc(-zi / std::sqrt(2.0)));
        const double log_sf = std::log(0.5 * std::erfc(zr / std::sqrt(2.0)));
        s += (2.0 * static_cast<double>(i) + 1.0) * (log_cdf + log_sf);
    }
    AndersonDarling out;
    out.a2 = -dn - s / dn;
    const double a = out.a2 * (1.0 + 0.75 / dn + 2.25 / (dn * dn));
    out.a2_star = a;
    double p;
    if (a >= 0.6) {
        p = std::exp(1.2937 - 5.709 * a + 0.0186 * a * a);
    } else if (a >= 0.34) {
        p = std::exp(0.9177 - 4.279 * a - 1.38 * a * a);
    } else if (a >= 0.2) {
        p = 1.0 - std::exp(-8.318 + 42.796 * a - 59.938 * a * a);
    } else {
        p = 1.0 - std::exp(-13.436 + 101.14 * a - 223.73 * a * a);
    }
    out.p_value = std::clamp(p, 0.0, 1.0);
    return out;
}

std::vector<double> ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
        i = j + 1;
    }
    return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw DomainError("correlation needs paired samples");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(ranks(a), ranks(b));
}

double empirical_quantile(std::vector<double> x, double prob) {
    if (x.empty()) throw DomainError("quantile of an empty sample");
    std::sort(x.begin(), x.end());
    const double pos = std::clamp(prob, 0.0, 1.0) * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

}  // namespace finestrat
