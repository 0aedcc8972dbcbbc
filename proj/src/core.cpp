#include "finestrat/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace finestrat {

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    std::string out(s.substr(b, e - b + 1));
    if (out.size() >= 2 && out.front() == '"' && out.back() == '"') {
        out = out.substr(1, out.size() - 2);
    }
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
            current.push_back(c);
        } else if (c == ',' && !quoted) {
            fields.push_back(trim(current));
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    fields.push_back(trim(current));
    return fields;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

}  // namespace

CovariateTable::CovariateTable(Matrix data, std::vector<std::string> names, RoleIndices roles,
                               std::vector<std::string> ids)
    : data_(std::move(data)), names_(std::move(names)), roles_(std::move(roles)),
      ids_(std::move(ids)) {
    if (static_cast<Index>(names_.size()) != data_.cols()) {
        throw ConfigError("covariate table: " + std::to_string(names_.size()) +
                          " names for " + std::to_string(data_.cols()) + " columns");
    }
    for (const auto* role : {&roles_.psi, &roles_.h, &roles_.w, &roles_.x}) {
        for (Index c : *role) {
            if (c < 0 || c >= data_.cols()) {
                throw ConfigError("covariate table: role index " + std::to_string(c) +
                                  " out of range");
            }
        }
    }
    for (Index j = 0; j < data_.cols(); ++j) {
        for (Index i = 0; i < data_.rows(); ++i) {
            if (!std::isfinite(data_(i, j))) {
                throw DataError("non-finite value at row " + std::to_string(i + 1) +
                                ", column '" + names_[j] + "'");
            }
        }
    }
    if (ids_.empty()) {
        ids_.reserve(data_.rows());
        for (Index i = 0; i < data_.rows(); ++i) ids_.push_back(std::to_string(i));
    } else if (static_cast<Index>(ids_.size()) != data_.rows()) {
        throw ConfigError("covariate table: id count does not match row count");
    }
}

Matrix CovariateTable::columns(const std::vector<Index>& cols) const {
    Matrix out(data_.rows(), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = data_.col(cols[j]);
    return out;
}

std::vector<std::string> CovariateTable::column_names(const std::vector<Index>& cols) const {
    std::vector<std::string> out;
    for (Index c : cols) out.push_back(names_[c]);
    return out;
}

bool CovariateTable::h_subset_of_w() const {
    return std::all_of(roles_.h.begin(), roles_.h.end(), [&](Index c) {
        return std::find(roles_.w.begin(), roles_.w.end(), c) != roles_.w.end();
    });
}

CovariateTable load_covariates(std::istream& csv, const RoleMap& roles) {
    std::string line;
    if (!std::getline(csv, line)) throw DataError("covariate file is empty: header row missing");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
    const auto header = split_csv_line(line);
    std::unordered_map<std::string, std::size_t> header_pos;
    for (std::size_t j = 0; j < header.size(); ++j) header_pos.emplace(header[j], j);

    std::vector<std::string> stored;
    std::unordered_map<std::string, Index> stored_pos;
    RoleIndices idx;
    auto reference = [&](const std::vector<std::string>& cols, std::vector<Index>& out) {
        for (const auto& name : cols) {
            if (name == kInterceptColumn) continue;
            if (!header_pos.count(name)) throw DataError("missing column '" + name + "'");
            auto [it, inserted] = stored_pos.emplace(name, static_cast<Index>(stored.size()));
            if (inserted) stored.push_back(name);
            out.push_back(it->second);
        }
    };
    reference(roles.psi, idx.psi);
    reference(roles.h, idx.h);
    reference(roles.w, idx.w);
    if (roles.intercept) {
        auto [it, inserted] = stored_pos.emplace(kInterceptColumn, static_cast<Index>(stored.size()));
        if (inserted) stored.push_back(kInterceptColumn);
        idx.x.push_back(it->second);
    }
    reference(roles.x, idx.x);
    if (!roles.psi_weights.empty() && roles.psi_weights.size() != roles.psi.size()) {
        throw ConfigError("psi_weights has " + std::to_string(roles.psi_weights.size()) +
                          " entries for " + std::to_string(roles.psi.size()) + " psi columns");
    }
    std::optional<std::size_t> id_pos;
    if (roles.id) {
        if (!header_pos.count(*roles.id)) throw DataError("missing id column '" + *roles.id + "'");
        id_pos = header_pos.at(*roles.id);
    }

    std::vector<std::vector<double>> rows;
    std::vector<std::string> ids;
    std::size_t row = 0;
    while (std::getline(csv, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw DataError("row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                            " fields, header has " + std::to_string(header.size()));
        }
        std::vector<double> values(stored.size(), 1.0);
        for (std::size_t j = 0; j < stored.size(); ++j) {
            if (stored[j] == kInterceptColumn) continue;
            const auto& cell = fields[header_pos.at(stored[j])];
            double v = 0.0;
            if (!parse_double(cell, v)) {
                throw DataError("non-numeric at row " + std::to_string(row) + ", column '" +
                                stored[j] + "': '" + cell + "'");
            }
            if (!std::isfinite(v)) {
                throw DataError("non-finite at row " + std::to_string(row) + ", column '" +
                                stored[j] + "'");
            }
            values[j] = v;
        }
        rows.push_back(std::move(values));
        ids.push_back(id_pos ? fields[*id_pos] : std::to_string(row - 1));
    }

    Matrix data(static_cast<Index>(rows.size()), static_cast<Index>(stored.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < stored.size(); ++j) data(i, j) = rows[i][j];
    }
    return CovariateTable(std::move(data), std::move(stored), std::move(idx), std::move(ids));
}

CovariateTable load_covariates(const std::string& path, const RoleMap& roles) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open covariate file '" + path + "'");
    return load_covariates(in, roles);
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void write_covariates(std::ostream& out, const CovariateTable& table, const std::string& id_column) {
    out << id_column;
    for (const auto& name : table.names()) {
        if (name != kInterceptColumn) out << ',' << name;
    }
    out << '\n';
    for (Index i = 0; i < table.n(); ++i) {
        out << table.ids()[i];
        for (Index j = 0; j < table.data().cols(); ++j) {
            if (table.names()[j] == kInterceptColumn) continue;
            out << ',' << format_double(table.data()(i, j));
        }
        out << '\n';
    }
}

const Vector& ExperimentFrame::outcome() const {
    if (!y) throw ConfigError("experiment frame has no outcomes");
    return *y;
}

Vector horvitz_thompson_weights(const Assignment& d, double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("treatment proportion p=" + format_double(p) + " outside (0,1)");
    }
    Vector h(d.size());
    const double treated = 1.0 / p;
    const double control = -1.0 / (1.0 - p);
    for (Index i = 0; i < d.size(); ++i) h[i] = d[i] == 1 ? treated : control;
    return h;
}

Vector horvitz_thompson_weights(const ExperimentFrame& frame) {
    return horvitz_thompson_weights(frame.d, frame.p);
}

}  // namespace finestrat
