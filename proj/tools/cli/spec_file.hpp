#ifndef FINESTRAT_CLI_SPEC_FILE_HPP
#define FINESTRAT_CLI_SPEC_FILE_HPP

#include "finestrat/core.hpp"
#include "finestrat/gmm.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/simulate.hpp"
#include "finestrat/stratify.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace finestrat::cli {

using nlohmann::json;

/** Malformed or invalid spec documents; reported with exit code 2. */
class SpecError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

struct RegionParams {
    RegionShape shape = RegionShape::none;
    std::optional<double> alpha;     // target acceptance probability
    std::optional<double> eps;       // explicit threshold; infinity allowed
    Vector gamma_bar;
    Matrix U;
    double p_exponent = 2.0;
    Vector lower, upper;             // rectangle
    Vector pilot_gamma;
    Matrix pilot_sigma;
    double pilot_m = 1.0;
    double pilot_alpha = 0.05;
    int calibrate_draws = 10000;
};

struct DesignSpecFile {
    RoleMap roles;
    int k = 2;
    int l = 1;
    double p = 0.5;
    MatchMethod method = MatchMethod::greedy_nn;
    std::optional<std::string> cell_column;
    RegionParams region;
    std::string estimand = "sate";
    Link link = Link::linear;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    long max_draws = 1000000;
    int adjust_iterations = 1;
    json raw;
};

struct SimSpecFile {
    MonteCarloConfig config;
    json raw;
};

/** Parses JSON text; syntax errors become SpecError. */
json parse_json_text(const std::string& text, const std::string& what);
json read_json_file(const std::string& path);

DesignSpecFile parse_design_spec(const json& doc);
SimSpecFile parse_sim_spec(const json& doc);

}  // namespace finestrat::cli

#endif  // FINESTRAT_CLI_SPEC_FILE_HPP
