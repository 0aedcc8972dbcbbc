#include "commands.hpp"
#include "spec_file.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using finestrat::cli::CommandOptions;

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, CommandOptions& opts,
                      bool data, bool sim) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--spec", opts.spec, sim ? "simulation spec JSON" : "design spec or manifest JSON")->required();
    if (data) sub->add_option("--data", opts.data, "input CSV");
    sub->add_option("--out", opts.out, "output path")->required();
    sub->add_option("--seed", opts.seed, "master seed (overrides the spec)");
    sub->add_option("--replicates", opts.replicates, "Monte Carlo replicates or calibration draws");
    if (sim) sub->add_option("--threads", opts.threads, "worker threads");
    return sub;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Finely stratified experiments: assignment, estimation and simulation"};
    app.require_subcommand(1);
    CommandOptions opts;
    auto* assign = add_command(app, "assign", "match units and draw an accepted assignment", opts, true, false);
    auto* estimate = add_command(app, "estimate", "estimate and build confidence intervals", opts, true, false);
    auto* simulate = add_command(app, "simulate", "Monte Carlo design comparison", opts, false, true);
    auto* calibrate = add_command(app, "calibrate", "calibrate a region threshold by simulation", opts, true, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : finestrat::cli::kExitSpec;
    }

    try {
        if (assign->parsed()) return finestrat::cli::cmd_assign(opts);
        if (estimate->parsed()) return finestrat::cli::cmd_estimate(opts);
        if (simulate->parsed()) return finestrat::cli::cmd_simulate(opts);
        if (calibrate->parsed()) return finestrat::cli::cmd_calibrate(opts);
    } catch (const finestrat::cli::SpecError& e) {
        std::cerr << "spec error: " << e.what() << '\n';
        return finestrat::cli::kExitSpec;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return finestrat::cli::kExitError;
    }
    return finestrat::cli::kExitError;
}
