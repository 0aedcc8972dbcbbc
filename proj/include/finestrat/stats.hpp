#ifndef FINESTRAT_STATS_HPP
#define FINESTRAT_STATS_HPP

#include "finestrat/types.hpp"

#include <vector>

namespace finestrat {

double normal_cdf(double x);
double normal_quantile(double prob);
double chi2_cdf(double x, double dof);
double chi2_quantile(double prob, double dof);

/** Sample mean and (1/n) variance-covariance of the rows of `v`. */
Vector column_means(const Matrix& v);
Matrix empirical_covariance(const Matrix& v);

/** Symmetric PSD square root via eigendecomposition; negative eigenvalues clipped. */
Matrix psd_sqrt(const Matrix& s);

/** Supremum distance between the empirical CDFs of two samples. */
double ks_distance(std::vector<double> a, std::vector<double> b);

struct AndersonDarling {
    double a2 = 0.0;       // raw statistic
    double a2_star = 0.0;  // small-sample adjusted, mean and variance estimated
    double p_value = 0.0;
};

/** Normality test with estimated mean and variance. */
AndersonDarling anderson_darling_normal(std::vector<double> x);

/** Average ranks with ties sharing the mean rank. */
std::vector<double> ranks(const std::vector<double>& x);
double pearson(const std::vector<double>& a, const std::vector<double>& b);
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/** Empirical quantile by linear interpolation between order statistics. */
double empirical_quantile(std::vector<double> x, double prob);

}  // namespace finestrat

#endif  // FINESTRAT_STATS_HPP
