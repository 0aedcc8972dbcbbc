#include "commands.hpp"

#include "json_io.hpp"
#include "spec_file.hpp"

#include "finestrat/inference.hpp"
#include "finestrat/randomize.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/simulate.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <unordered_map>

namespace finestrat::cli {

namespace {

namespace fs = std::filesystem;

/** Assignments carry no imbalance information when no region is requested. */
class NoImbalance : public ImbalanceEvaluator {
public:
    ImbalanceStat evaluate(const Assignment&) const override { return {}; }
};

struct DesignContext {
    DesignSpecFile spec;
    std::shared_ptr<CovariateTable> table;
    GroupPartition partition;
    std::unique_ptr<ImbalanceEvaluator> evaluator;
    AcceptanceRegion region;
    std::uint64_t seed = 0;
};

std::vector<std::string> header_columns(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "' is empty: header row missing");
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cols.push_back(cell);
    }
    return cols;
}

std::vector<std::string> string_column(const std::string& path, const std::string& name) {
    const auto header = header_columns(path);
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("missing column '" + name + "'");
    const auto pos = static_cast<std::size_t>(it - header.begin());
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> out;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t j = 0; j <= pos && std::getline(ss, cell, ','); ++j) {
        }
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        out.push_back(cell);
    }
    return out;
}

AcceptanceRegion make_region(const RegionParams& r, Index dh, double eps) {
    switch (r.shape) {
    case RegionShape::none: return unrestricted_region();
    case RegionShape::ball: return ball_region(eps);
    case RegionShape::ellipsoid_mahalanobis: {
        AcceptanceRegion region = r.alpha ? mahalanobis_region(static_cast<int>(dh), *r.alpha) : AcceptanceRegion{};
        region.shape = RegionShape::ellipsoid_mahalanobis;
        if (r.eps) region.eps = *r.eps;
        return region;
    }
    case RegionShape::polar:
        if (r.gamma_bar.size() != dh || r.U.rows() != dh) throw SpecError("polar region needs gamma_bar and U of dim(h)");
        return polar_region(r.gamma_bar, r.U, r.p_exponent, eps);
    case RegionShape::rectangle_polar:
        if (r.lower.size() != dh || r.upper.size() != dh) throw SpecError("rectangle needs lower and upper of dim(h)");
        return rectangle_region(r.lower, r.upper, eps);
    case RegionShape::pilot_wald:
        if (r.pilot_gamma.size() != dh || r.pilot_sigma.rows() != dh) {
            throw SpecError("pilot-wald region needs pilot_gamma and pilot_sigma of dim(h)");
        }
        return pilot_wald_region(r.pilot_gamma, r.pilot_sigma, r.pilot_m, r.pilot_alpha, eps);
    case RegionShape::propensity_threshold: return propensity_region(eps);
    case RegionShape::gmm_region: {
        AcceptanceRegion region;
        region.shape = RegionShape::gmm_region;
        region.eps = eps;
        return region;
    }
    }
    return unrestricted_region();
}

std::unique_ptr<ImbalanceEvaluator> make_evaluator(RegionShape shape, const Matrix& h,
                                                   const GroupPartition& partition, double p) {
    switch (shape) {
    case RegionShape::none: return std::make_unique<NoImbalance>();
    case RegionShape::ellipsoid_mahalanobis: return std::make_unique<MahalanobisImbalance>(h, partition);
    case RegionShape::propensity_threshold: {
        Matrix x(h.rows(), h.cols() + 1);
        x << Vector::Ones(h.rows()), h;
        return std::make_unique<PropensityImbalance>(x, p);
    }
    case RegionShape::gmm_region: return std::make_unique<GmmImbalance>(h, location_moments(h.cols()));
    default: return std::make_unique<LinearImbalance>(h);
    }
}

DesignContext build_design(const DesignSpecFile& spec, const std::string& data_path, std::uint64_t seed,
                           bool calibrate_if_needed) {
    DesignContext ctx;
    ctx.spec = spec;
    ctx.seed = seed;
    ctx.table = std::make_shared<CovariateTable>(load_covariates(data_path, spec.roles));
    const CovariateTable& t = *ctx.table;
    if (t.n() % spec.k != 0) {
        throw ConfigError("n=" + std::to_string(t.n()) + " is not divisible by k=" + std::to_string(spec.k));
    }

    Rng match_rng(seed, 0);
    Matrix psi = t.psi();
    if (spec.cell_column) {
        ctx.partition = coarse_strata(string_column(data_path, *spec.cell_column), spec.k, spec.l, match_rng);
    } else if (psi.cols() == 0) {
        ctx.partition = random_groups(t.n(), spec.k, spec.l, match_rng);
    } else {
        ctx.partition = match_k_tuples(psi, MatchConfig{spec.k, spec.l, spec.roles.psi_weights, spec.method}, match_rng);
    }
    if (std::min(spec.l, spec.k - spec.l) < 2) {
        if (ctx.partition.groups.size() % 2 == 0) {
            const Matrix centroids_on = psi.cols() ? weighted_psi(psi, spec.roles.psi_weights)
                                                   : Matrix(Matrix::Zero(t.n(), 1));
            ctx.partition = pair_groups_by_centroid(std::move(ctx.partition), centroids_on);
        } else {
            std::cerr << "warning: odd number of groups; collapsed-strata variance estimation will be unavailable\n";
        }
    }

    const RegionParams& r = spec.region;
    const Matrix h = t.h();
    if (r.shape != RegionShape::none && h.cols() == 0) {
        throw SpecError("region '" + to_string(r.shape) + "' needs roles.h columns");
    }
    ctx.evaluator = make_evaluator(r.shape, h, ctx.partition, spec.p);
    const bool needs_calibration = r.shape != RegionShape::none &&
                                   r.shape != RegionShape::ellipsoid_mahalanobis && !r.eps;
    ctx.region = make_region(r, h.cols(), r.eps ? *r.eps : 1.0);
    if (needs_calibration && calibrate_if_needed) {
        Rng cal_rng(seed, 2);
        ctx.region.eps = calibrate_epsilon(ctx.partition, *ctx.evaluator, ctx.region, *r.alpha, r.calibrate_draws,
                                           cal_rng);
    }
    return ctx;
}

std::string manifest_path_for(const std::string& out) { return out + ".manifest.json"; }

std::string absolute(const std::string& p) { return fs::absolute(fs::path(p)).lexically_normal().string(); }

void require_out(const CommandOptions& opts) {
    if (opts.out.empty()) throw SpecError("--out is required");
}

}  // namespace

int cmd_assign(const CommandOptions& opts) {
    require_out(opts);
    if (opts.data.empty()) throw SpecError("--data (covariate CSV) is required");
    const DesignSpecFile spec = parse_design_spec(read_json_file(opts.spec));
    const std::uint64_t seed = opts.seed.value_or(spec.seed);
    DesignContext ctx = build_design(spec, opts.data, seed, true);

    Rng draw_rng(seed, 1);
    RerandomizeOptions ropts;
    ropts.max_draws = spec.max_draws;
    const RerandomizeResult res = rerandomize(ctx.partition, *ctx.evaluator, ctx.region, draw_rng, ropts);

    {
        std::ofstream out(opts.out);
        if (!out) throw DataError("cannot write '" + opts.out + "'");
        const auto group_of = ctx.partition.group_of();
        out << "id,group,d\n";
        for (Index i = 0; i < ctx.table->n(); ++i) {
            out << ctx.table->ids()[static_cast<std::size_t>(i)] << ',' << group_of[static_cast<std::size_t>(i)] << ','
                << res.draw.d[i] << '\n';
        }
    }

    json manifest;
    manifest["design"] = spec.raw;
    manifest["seed"] = seed;
    manifest["covariates"] = {{"path", absolute(opts.data)}, {"sha256", sha256_file(opts.data)}};
    manifest["assignment"] = {{"path", absolute(opts.out)}, {"sha256", sha256_file(opts.out)}};
    manifest["n"] = ctx.table->n();
    manifest["treated"] = res.draw.d.sum();
    manifest["partition"] = partition_json(ctx.partition);
    manifest["region"] = region_json(ctx.region);
    manifest["homogeneity"] = number_json(ctx.partition.homogeneity);
    manifest["draws_to_accept"] = res.draw.draw_index;
    manifest["penalty"] = number_json(res.penalty);
    manifest["exhausted"] = res.exhausted;
    write_json_file(manifest_path_for(opts.out), manifest);

    if (res.exhausted) {
        std::cerr << "warning: no draw accepted within max_draws=" << spec.max_draws
                  << "; the minimum-penalty draw was written\n";
        return kExitExhausted;
    }
    return kExitOk;
}

int cmd_estimate(const CommandOptions& opts) {
    require_out(opts);
    if (opts.data.empty()) throw SpecError("--data (outcome CSV) is required");
    const json manifest = read_json_file(opts.spec);
    for (const char* key : {"design", "covariates", "assignment", "partition"}) {
        if (!manifest.contains(key)) throw SpecError(std::string("manifest is missing '") + key + "'");
    }
    const DesignSpecFile spec = parse_design_spec(manifest.at("design"));
    std::string cov_path, cov_hash, asg_path, asg_hash;
    try {
        cov_path = manifest.at("covariates").at("path").get<std::string>();
        cov_hash = manifest.at("covariates").at("sha256").get<std::string>();
        asg_path = manifest.at("assignment").at("path").get<std::string>();
        asg_hash = manifest.at("assignment").at("sha256").get<std::string>();
    } catch (const json::exception& e) {
        throw SpecError(std::string("malformed manifest: ") + e.what());
    }
    if (sha256_file(cov_path) != cov_hash) {
        throw DataError("covariate file '" + cov_path + "' does not match the manifest hash");
    }
    if (sha256_file(asg_path) != asg_hash) {
        throw DataError("assignment file '" + asg_path + "' does not match the manifest hash");
    }

    auto table = std::make_shared<CovariateTable>(load_covariates(cov_path, spec.roles));
    RoleMap asg_roles;
    asg_roles.x = {"d"};
    asg_roles.id = "id";
    const CovariateTable asg = load_covariates(asg_path, asg_roles);
    const GroupPartition partition = partition_from_json(manifest.at("partition"));
    validate_partition(partition, table->n());

    const auto out_cols = header_columns(opts.data);
    const bool has_taken = std::find(out_cols.begin(), out_cols.end(), "d_taken") != out_cols.end();
    RoleMap y_roles;
    y_roles.x = {"y"};
    if (has_taken) y_roles.x.push_back("d_taken");
    y_roles.id = "id";
    const CovariateTable outcomes = load_covariates(opts.data, y_roles);

    std::unordered_map<std::string, Index> row_of;
    for (Index i = 0; i < outcomes.n(); ++i) row_of.emplace(outcomes.ids()[static_cast<std::size_t>(i)], i);
    std::unordered_map<std::string, Index> asg_row;
    for (Index i = 0; i < asg.n(); ++i) asg_row.emplace(asg.ids()[static_cast<std::size_t>(i)], i);

    ExperimentFrame frame;
    frame.covariates = table;
    frame.p = spec.p;
    const Index n = table->n();
    frame.d.resize(n);
    Vector y(n), taken(n);
    for (Index i = 0; i < n; ++i) {
        const std::string& id = table->ids()[static_cast<std::size_t>(i)];
        const auto a = asg_row.find(id);
        if (a == asg_row.end()) throw DataError("unit '" + id + "' has no assignment");
        frame.d[i] = static_cast<int>(asg.data()(a->second, 0));
        const auto o = row_of.find(id);
        if (o == row_of.end()) throw DataError("unit '" + id + "' has no outcome");
        y[i] = outcomes.data()(o->second, 0);
        if (has_taken) taken[i] = outcomes.data()(o->second, 1);
    }
    frame.y = y;
    if (has_taken) frame.d_endog = taken;

    EstimandSpec est;
    if (spec.estimand == "sate") {
        est = score_sate();
    } else if (spec.estimand == "cate_blp") {
        est = score_cate_blp();
    } else if (spec.estimand == "late") {
        if (!has_taken) throw DataError("LATE needs a d_taken column in the outcome file");
        est = score_late();
    } else {
        if (!has_taken) throw DataError("CLATE needs a d_taken column in the outcome file");
        est = score_clate({}, spec.link);
    }
    const InferenceReport report = estimate_and_infer(frame, partition, est, table->w(), spec.alpha,
                                                      spec.adjust_iterations, {},
                                                      table->column_names(table->roles().w));
    write_json_file(opts.out, report_json(report, spec.estimand));
    for (const auto& flag : report.flags) std::cerr << "warning: " << flag << '\n';
    return kExitOk;
}

int cmd_simulate(const CommandOptions& opts) {
    require_out(opts);
    SimSpecFile sim = parse_sim_spec(read_json_file(opts.spec));
    MonteCarloConfig& cfg = sim.config;
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.replicates) cfg.replicates = *opts.replicates;
    if (opts.threads) cfg.threads = *opts.threads;
    if (cfg.replicates < 1) throw SpecError("replicates must be positive");
    const MonteCarloResult result = run_monte_carlo(cfg);
    {
        std::ofstream out(opts.out);
        if (!out) throw DataError("cannot write '" + opts.out + "'");
        write_results_csv(out, result);
    }
    json rows = json::array();
    for (const auto& r : result.rows) {
        rows.push_back({{"design", r.design}, {"estimator", r.estimator}, {"replicates", r.replicates},
                        {"mse", number_json(r.mse)}, {"mse_se", number_json(r.mse_se)},
                        {"mse_ratio", number_json(r.mse_ratio)}, {"cover_pop", r.cover_pop},
                        {"cover_fin", r.cover_fin}, {"width_pop", number_json(r.width_pop)},
                        {"width_fin", number_json(r.width_fin)}, {"mean_draws", r.mean_draws}});
    }
    json manifest;
    manifest["spec"] = sim.raw;
    manifest["seed"] = cfg.seed;
    manifest["replicates"] = cfg.replicates;
    manifest["threads"] = cfg.threads;
    manifest["theta0"] = result.theta0;
    manifest["failures"] = result.failures;
    manifest["failure_messages"] = result.failure_messages;
    manifest["rows"] = rows;
    manifest["results"] = {{"path", absolute(opts.out)}, {"sha256", sha256_file(opts.out)}};
    write_json_file(manifest_path_for(opts.out), manifest);
    long exhausted = 0;
    for (const auto& design : result.outcomes)
        for (const auto& rec : design) exhausted += rec.exhausted;
    if (result.failures > 0) std::cerr << "warning: " << result.failures << " replicates failed and were excluded\n";
    if (exhausted > 0) {
        std::cerr << "warning: " << exhausted << " rerandomizations hit max_draws\n";
        return kExitExhausted;
    }
    return kExitOk;
}

int cmd_calibrate(const CommandOptions& opts) {
    require_out(opts);
    if (opts.data.empty()) throw SpecError("--data (covariate CSV) is required");
    const DesignSpecFile spec = parse_design_spec(read_json_file(opts.spec));
    if (spec.region.shape == RegionShape::none) throw SpecError("calibration needs a region shape");
    if (!spec.region.alpha) throw SpecError("calibration needs region.alpha");
    const std::uint64_t seed = opts.seed.value_or(spec.seed);
    DesignContext ctx = build_design(spec, opts.data, seed, false);
    const int draws = opts.replicates.value_or(spec.region.calibrate_draws);
    Rng cal_rng(seed, 2);
    const double eps = calibrate_epsilon(ctx.partition, *ctx.evaluator, ctx.region, *spec.region.alpha, draws, cal_rng);
    json out;
    out["shape"] = to_string(spec.region.shape);
    out["alpha"] = *spec.region.alpha;
    out["draws"] = draws;
    out["seed"] = seed;
    out["eps"] = number_json(eps);
    if (spec.region.shape == RegionShape::ellipsoid_mahalanobis) {
        out["eps_chi2"] = std::sqrt(chi2_threshold(static_cast<int>(ctx.table->dim_h()), *spec.region.alpha));
    }
    write_json_file(opts.out, out);
    return kExitOk;
}

}  // namespace finestrat::cli
