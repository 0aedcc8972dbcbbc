#include "spec_file.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace finestrat::cli {

namespace {

void allow_only(const json& obj, const std::set<std::string>& keys, const std::string& where) {
    if (!obj.is_object()) throw SpecError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (!keys.count(key)) throw SpecError("unknown key '" + key + "' in " + where);
    }
}

template <class T>
T get_as(const json& obj, const std::string& key, const std::string& where) {
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw SpecError("'" + key + "' in " + where + " has the wrong type");
    }
}

template <class T>
void read_opt(const json& obj, const std::string& key, T& out, const std::string& where) {
    if (obj.contains(key)) out = get_as<T>(obj, key, where);
}

double read_number_or_inf(const json& v, const std::string& what) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string() && (v == "inf" || v == "infinity")) return std::numeric_limits<double>::infinity();
    if (v.is_null()) return std::numeric_limits<double>::infinity();
    throw SpecError(what + " must be a number or \"inf\"");
}

Vector read_vector(const json& v, const std::string& what) {
    if (!v.is_array()) throw SpecError(what + " must be an array of numbers");
    Vector out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw SpecError(what + " must be an array of numbers");
        out[static_cast<Index>(i)] = v[i].get<double>();
    }
    return out;
}

Matrix read_matrix(const json& v, const std::string& what) {
    if (!v.is_array() || v.empty()) throw SpecError(what + " must be a non-empty array of rows");
    const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
    Matrix out(static_cast<Index>(v.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
        const Vector row = read_vector(v[i], what);
        if (static_cast<std::size_t>(row.size()) != cols) throw SpecError(what + " rows have different lengths");
        out.row(static_cast<Index>(i)) = row.transpose();
    }
    return out;
}

RoleMap parse_roles(const json& j) {
    allow_only(j, {"psi", "psi_weights", "h", "x", "intercept", "id"}, "roles");
    RoleMap roles;
    read_opt(j, "psi", roles.psi, "roles");
    read_opt(j, "psi_weights", roles.psi_weights, "roles");
    read_opt(j, "h", roles.h, "roles");
    read_opt(j, "x", roles.x, "roles");
    read_opt(j, "intercept", roles.intercept, "roles");
    if (j.contains("id")) roles.id = get_as<std::string>(j, "id", "roles");
    return roles;
}

RegionParams parse_region(const json& j) {
    allow_only(j, {"shape", "alpha", "eps", "gamma_bar", "U", "p_exponent", "lower", "upper", "pilot_gamma",
                   "pilot_sigma", "pilot_m", "pilot_alpha", "calibrate_draws"},
               "region");
    RegionParams r;
    if (!j.contains("shape")) throw SpecError("region needs a 'shape'");
    try {
        r.shape = parse_region_shape(get_as<std::string>(j, "shape", "region"));
    } catch (const SpecError&) {
        throw;
    } catch (const ConfigError& e) {
        throw SpecError(e.what());
    }
    if (j.contains("alpha")) r.alpha = get_as<double>(j, "alpha", "region");
    if (j.contains("eps")) r.eps = read_number_or_inf(j.at("eps"), "region eps");
    if (j.contains("gamma_bar")) r.gamma_bar = read_vector(j.at("gamma_bar"), "region gamma_bar");
    if (j.contains("U")) r.U = read_matrix(j.at("U"), "region U");
    if (j.contains("p_exponent")) r.p_exponent = read_number_or_inf(j.at("p_exponent"), "region p_exponent");
    if (j.contains("lower")) r.lower = read_vector(j.at("lower"), "region lower");
    if (j.contains("upper")) r.upper = read_vector(j.at("upper"), "region upper");
    if (j.contains("pilot_gamma")) r.pilot_gamma = read_vector(j.at("pilot_gamma"), "region pilot_gamma");
    if (j.contains("pilot_sigma")) r.pilot_sigma = read_matrix(j.at("pilot_sigma"), "region pilot_sigma");
    read_opt(j, "pilot_m", r.pilot_m, "region");
    read_opt(j, "pilot_alpha", r.pilot_alpha, "region");
    read_opt(j, "calibrate_draws", r.calibrate_draws, "region");
    if (r.alpha && !(*r.alpha > 0.0 && *r.alpha < 1.0)) throw SpecError("region alpha must lie in (0,1)");
    if (r.shape != RegionShape::none && !r.alpha && !r.eps) {
        throw SpecError("region '" + to_string(r.shape) + "' needs 'alpha' or 'eps'");
    }
    if (r.calibrate_draws < 100) throw SpecError("calibrate_draws must be at least 100");
    return r;
}

}  // namespace

json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw SpecError("malformed JSON in " + what + ": " + e.what());
    }
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_json_text(buf.str(), path);
}

DesignSpecFile parse_design_spec(const json& doc) {
    allow_only(doc, {"roles", "k", "l", "p", "match", "region", "estimand", "w_cols", "alpha", "seed", "max_draws",
                     "adjust_iterations"},
               "design spec");
    DesignSpecFile s;
    s.raw = doc;
    if (!doc.contains("roles")) throw SpecError("design spec needs 'roles'");
    s.roles = parse_roles(doc.at("roles"));
    read_opt(doc, "k", s.k, "design spec");
    read_opt(doc, "l", s.l, "design spec");
    if (s.k < 2 || s.l < 1 || s.l >= s.k) throw SpecError("need k >= 2 and 1 <= l < k");
    s.p = static_cast<double>(s.l) / s.k;
    if (doc.contains("p")) {
        const double p = get_as<double>(doc, "p", "design spec");
        if (std::abs(p - s.p) > 1e-12) throw SpecError("p does not equal l/k");
    }
    if (doc.contains("match")) {
        const json& m = doc.at("match");
        allow_only(m, {"method", "cell_column"}, "match");
        if (m.contains("method")) {
            try {
                s.method = parse_match_method(get_as<std::string>(m, "method", "match"));
            } catch (const SpecError&) {
                throw;
            } catch (const ConfigError& e) {
                throw SpecError(e.what());
            }
        }
        if (m.contains("cell_column")) s.cell_column = get_as<std::string>(m, "cell_column", "match");
    }
    if (s.method == MatchMethod::random_within_cell && !s.cell_column) {
        throw SpecError("random_within_cell matching needs match.cell_column");
    }
    if (doc.contains("region")) s.region = parse_region(doc.at("region"));
    if (doc.contains("estimand")) {
        const json& e = doc.at("estimand");
        if (e.is_string()) {
            s.estimand = e.get<std::string>();
        } else {
            allow_only(e, {"name", "link"}, "estimand");
            s.estimand = get_as<std::string>(e, "name", "estimand");
            if (e.contains("link")) {
                const auto link = get_as<std::string>(e, "link", "estimand");
                if (link == "linear") s.link = Link::linear;
                else if (link == "logit") s.link = Link::logit;
                else throw SpecError("unknown link '" + link + "' (expected linear or logit)");
            }
        }
        static const std::set<std::string> known{"sate", "cate_blp", "late", "clate"};
        if (!known.count(s.estimand)) {
            throw SpecError("unknown estimand '" + s.estimand + "' (expected sate, cate_blp, late or clate)");
        }
    }
    read_opt(doc, "w_cols", s.roles.w, "design spec");
    read_opt(doc, "alpha", s.alpha, "design spec");
    if (!(s.alpha > 0.0 && s.alpha < 1.0)) throw SpecError("alpha must lie in (0,1)");
    read_opt(doc, "seed", s.seed, "design spec");
    read_opt(doc, "max_draws", s.max_draws, "design spec");
    if (s.max_draws < 1) throw SpecError("max_draws must be positive");
    read_opt(doc, "adjust_iterations", s.adjust_iterations, "design spec");
    if (s.adjust_iterations < 1) throw SpecError("adjust_iterations must be positive");
    if (!s.roles.psi_weights.empty() && s.roles.psi_weights.size() != s.roles.psi.size()) {
        throw SpecError("psi_weights must match psi in length");
    }
    return s;
}

SimSpecFile parse_sim_spec(const json& doc) {
    allow_only(doc, {"model", "dim", "n", "p", "covariance", "residual_var", "residual_corr", "tau", "designs",
                     "accept_alpha", "replicates", "seed", "threads", "ci_alpha", "theta0"},
               "simulation spec");
    SimSpecFile s;
    s.raw = doc;
    MonteCarloConfig& c = s.config;
    read_opt(doc, "model", c.dgp.model, "simulation spec");
    read_opt(doc, "dim", c.dgp.dim, "simulation spec");
    read_opt(doc, "n", c.dgp.n, "simulation spec");
    read_opt(doc, "p", c.dgp.p, "simulation spec");
    read_opt(doc, "residual_var", c.dgp.residual_var, "simulation spec");
    read_opt(doc, "residual_corr", c.dgp.residual_corr, "simulation spec");
    read_opt(doc, "tau", c.dgp.tau, "simulation spec");
    if (doc.contains("covariance")) {
        const auto cov = get_as<std::string>(doc, "covariance", "simulation spec");
        if (cov == "identity") c.dgp.covariance = CovarianceKind::identity;
        else if (cov == "equicorrelated") c.dgp.covariance = CovarianceKind::equicorrelated;
        else throw SpecError("unknown covariance '" + cov + "' (expected identity or equicorrelated)");
    }
    try {
        c.dgp.validate();
    } catch (const ConfigError& e) {
        throw SpecError(e.what());
    }
    if (std::abs(c.dgp.p - 0.5) > 1e-12) throw SpecError("built-in designs use pairs, so p must be 1/2");
    if (c.dgp.n % 2 != 0) throw SpecError("n must be even for paired designs");
    std::vector<std::string> names{"C", "S", "SR"};
    read_opt(doc, "designs", names, "simulation spec");
    double accept_alpha = 1.0 / 500.0;
    read_opt(doc, "accept_alpha", accept_alpha, "simulation spec");
    if (!(accept_alpha > 0.0 && accept_alpha < 1.0)) throw SpecError("accept_alpha must lie in (0,1)");
    for (const auto& name : names) {
        try {
            DesignSpec d = named_design(name, c.dgp.model, c.dgp.dim);
            if (name == "SR") d.accept_alpha = accept_alpha;
            c.designs.push_back(d);
        } catch (const ConfigError& e) {
            throw SpecError(e.what());
        }
    }
    read_opt(doc, "replicates", c.replicates, "simulation spec");
    read_opt(doc, "seed", c.seed, "simulation spec");
    read_opt(doc, "threads", c.threads, "simulation spec");
    read_opt(doc, "ci_alpha", c.ci_alpha, "simulation spec");
    if (doc.contains("theta0")) c.theta0 = get_as<double>(doc, "theta0", "simulation spec");
    if (!(c.ci_alpha > 0.0 && c.ci_alpha < 1.0)) throw SpecError("ci_alpha must lie in (0,1)");
    return s;
}

}  // namespace finestrat::cli
