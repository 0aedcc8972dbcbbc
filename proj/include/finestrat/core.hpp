#ifndef FINESTRAT_CORE_HPP
#define FINESTRAT_CORE_HPP

#include "finestrat/types.hpp"

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace finestrat {

/**
 * Declared covariate roles, by CSV column name.
 *
 * A column may appear under several roles (typically h and w); it is stored
 * once in the table and referenced by index from each role.
 */
struct RoleMap {
    std::vector<std::string> psi;
    std::vector<double> psi_weights;  // empty means all ones
    std::vector<std::string> h;
    std::vector<std::string> w;
    std::vector<std::string> x;
    bool intercept = false;           // prepend a constant column to x
    std::optional<std::string> id;
};

/** Column indices into CovariateTable::data() for each role. */
struct RoleIndices {
    std::vector<Index> psi;
    std::vector<Index> h;
    std::vector<Index> w;
    std::vector<Index> x;
};

inline constexpr const char* kInterceptColumn = "(intercept)";

/** Immutable per-unit covariates partitioned by role. */
class CovariateTable {
public:
    CovariateTable() = default;

    /**
     * Validates shapes, role indices and finiteness. `ids` defaults to the
     * 0-based row index when empty.
     */
    CovariateTable(Matrix data, std::vector<std::string> names, RoleIndices roles,
                   std::vector<std::string> ids = {});

    Index n() const noexcept { return data_.rows(); }
    const Matrix& data() const noexcept { return data_; }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    const RoleIndices& roles() const noexcept { return roles_; }

    Matrix psi() const { return columns(roles_.psi); }
    Matrix h() const { return columns(roles_.h); }
    Matrix w() const { return columns(roles_.w); }
    Matrix x() const { return columns(roles_.x); }

    Index dim_psi() const { return static_cast<Index>(roles_.psi.size()); }
    Index dim_h() const { return static_cast<Index>(roles_.h.size()); }
    Index dim_w() const { return static_cast<Index>(roles_.w.size()); }
    Index dim_x() const { return static_cast<Index>(roles_.x.size()); }

    Matrix columns(const std::vector<Index>& cols) const;
    std::vector<std::string> column_names(const std::vector<Index>& cols) const;

    /** True when every h column is also a w column. */
    bool h_subset_of_w() const;

private:
    Matrix data_;
    std::vector<std::string> names_;
    RoleIndices roles_;
    std::vector<std::string> ids_;
};

/**
 * Parse a comma-separated file with a header row. Only columns referenced by
 * the role map are parsed; they are stored in order of first reference
 * (psi, h, w, x). Throws DataError naming the row (1-based, header excluded)
 * and column on non-numeric or non-finite cells.
 */
CovariateTable load_covariates(std::istream& csv, const RoleMap& roles);
CovariateTable load_covariates(const std::string& path, const RoleMap& roles);

/** Writes id plus stored columns using shortest round-trip formatting. */
void write_covariates(std::ostream& out, const CovariateTable& table,
                      const std::string& id_column = "id");

/** Shortest decimal string that parses back to exactly `v`. */
std::string format_double(double v);

/** Treatment assignment and realized outcomes for one experiment. */
struct ExperimentFrame {
    std::shared_ptr<const CovariateTable> covariates;
    Assignment d;                    // assigned treatment or instrument
    std::optional<Vector> y;         // absent at design time
    std::optional<Vector> d_endog;   // treatment actually taken (LATE settings)
    double p = 0.5;

    Index n() const { return d.size(); }
    double var_d() const { return p * (1.0 - p); }
    const Vector& outcome() const;
};

/** H_i = (d_i - p) / (p - p^2): 1/p for treated, -1/(1-p) for controls. */
Vector horvitz_thompson_weights(const Assignment& d, double p);
Vector horvitz_thompson_weights(const ExperimentFrame& frame);

}  // namespace finestrat

#endif  // FINESTRAT_CORE_HPP
