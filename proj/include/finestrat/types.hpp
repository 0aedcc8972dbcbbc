#ifndef FINESTRAT_TYPES_HPP
#define FINESTRAT_TYPES_HPP

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace finestrat {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/** Treatment (or instrument) indicators, one 0/1 entry per unit. */
using Assignment = Eigen::VectorXi;

/** Base class for every error raised by the library. */
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** Invalid configuration: bad group sizes, missing roles, malformed specs. */
class ConfigError : public Error {
public:
    using Error::Error;
};

/** Input data problems (CSV parsing, non-finite values). */
class DataError : public Error {
public:
    using Error::Error;
};

/** Argument outside the mathematical domain of an operation. */
class DomainError : public Error {
public:
    using Error::Error;
};

/** Singular systems, failed convergence, inconsistent estimates. */
class NumericalError : public Error {
public:
    using Error::Error;
};

/** Solver failure that carries the per-iteration objective trace. */
class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, std::vector<double> trace)
        : NumericalError(what), trace_(std::move(trace)) {}

    const std::vector<double>& trace() const noexcept { return trace_; }

private:
    std::vector<double> trace_;
};

}  // namespace finestrat

#endif  // FINESTRAT_TYPES_HPP
