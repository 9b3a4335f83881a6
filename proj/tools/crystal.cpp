// crystal: run one experiment and write its artifacts and manifest.
//
//   crystal <experiment> [--config FILE] [--seed S] [--out DIR] [--n N...]
//           [--beta B] [--t-final T] [--grid G] [--replicas R]
//
// Exit status: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "crystal/config.hpp"
#include "crystal/errors.hpp"
#include "crystal/experiments.hpp"
#include "crystal/io.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericalError = 3;
constexpr int kIoError = 4;

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::size_t> n;
    std::optional<double> beta;
    std::optional<double> t_final;
    std::optional<std::size_t> grid;
    std::optional<std::size_t> replicas;
    std::optional<unsigned> threads;
    bool gnuplot = false;
    bool quiet = false;
};

void add_common(CLI::App* sub, Overrides& o) {
    sub->add_option("--config,-c", o.config, "configuration file (INI/TOML sections or JSON, including a manifest)");
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out,-o", o.out, "output directory");
    sub->add_option("--n", o.n, "lattice sizes N")->delimiter(',');
    sub->add_option("--beta", o.beta, "inverse temperature");
    sub->add_option("--t-final", o.t_final, "final macroscopic time");
    sub->add_option("--grid", o.grid, "PDE grid points");
    sub->add_option("--replicas", o.replicas, "lattice replicas per N");
    sub->add_option("--threads", o.threads, "worker threads for replicas (0 = all cores)");
    sub->add_flag("--gnuplot", o.gnuplot, "also write gnuplot column files");
    sub->add_flag("--quiet,-q", o.quiet, "no progress messages");
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace crystal;
    CLI::App app{"Crystal surface simulations: lattice KMC, exponential PDE, gradient flows"};
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", io::kVersion);
    Overrides o;
    const std::vector<std::string> names{"kmc", "pde", "mm", "compare", "rates", "wetting", "selfsim", "decay", "gibbs-table"};
    const std::map<std::string, std::string> help{
        {"kmc", "lattice replicas, rescaled mean profiles"},
        {"pde", "evolve the exponential PDE"},
        {"mm", "minimizing movement (backward Euler) trajectory"},
        {"compare", "lattice vs PDE gaps and rate averages over several N"},
        {"rates", "time-averaged rates vs local Gibbs expectations"},
        {"wetting", "spreading of a compactly supported bump"},
        {"selfsim", "evolve-and-renormalize fixed point iteration"},
        {"decay", "energy, slope and norm decay diagnostics"},
        {"gibbs-table", "tabulate exponential moments and Z"}};
    for (const auto& name : names) add_common(app.add_subcommand(name, help.at(name)), o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }
    const std::string which = app.get_subcommands().front()->get_name();
    auto log = [&](const std::string& m) {
        if (!o.quiet) std::cerr << "[crystal] " << m << "\n";
    };

    ExperimentConfig cfg;
    try {
        const Experiment e = parse_experiment(which);
        ConfigSections sections;
        if (!o.config.empty()) sections = read_config_file(o.config);
        cfg = resolve_config(e, sections);
        if (o.seed) cfg.seed = *o.seed;
        if (o.out) cfg.out = *o.out;
        if (!o.n.empty()) cfg.n = o.n;
        if (o.beta) cfg.beta = *o.beta;
        if (o.t_final) {
            cfg.t_final = *o.t_final;
            // report times outside the new horizon are dropped rather than rejected
            std::vector<double> kept;
            for (double t : cfg.times) {
                if (t <= cfg.t_final) kept.push_back(t);
            }
            cfg.times = kept;
        }
        if (o.grid) cfg.grid = *o.grid;
        if (o.replicas) cfg.replicas = *o.replicas;
        if (o.threads) cfg.threads = *o.threads;
        if (o.gnuplot) cfg.gnuplot = true;
        validate(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "crystal: configuration error: " << e.what() << "\n";
        return kConfigError;
    } catch (const IoError& e) {
        std::cerr << "crystal: " << e.what() << "\n";
        return kIoError;
    }

    std::optional<io::RunDirectory> dir;
    try {
        dir.emplace(cfg.out);
    } catch (const IoError& e) {
        std::cerr << "crystal: " << e.what() << "\n";
        return kIoError;
    }

    json manifest = harness::manifest_for(cfg);
    manifest["started"] = utc_now();
    manifest["conventions"] = harness::conventions(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    int code = kOk;
    try {
        log(which + " -> " + dir->root().string());
        manifest["summary"] = harness::run_experiment(cfg, &*dir, log);
        manifest["status"] = "ok";
    } catch (const IoError& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        code = kIoError;
    } catch (const ConfigError& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        code = kConfigError;
    } catch (const pde::SolverFailure& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        manifest["last_good_time"] = e.last_state.time;
        code = kNumericalError;
    } catch (const NumericalError& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        code = kNumericalError;
    } catch (const std::filesystem::filesystem_error& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        code = kIoError;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest["wall_clock_seconds"] = wall;
    json files = json::array();
    for (const auto& f : dir->written()) files.push_back(f.filename().string());
    manifest["files"] = files;
    if (code != kOk) dir->cleanup_partial();
    try {
        dir->write_json("manifest.json", manifest);
    } catch (const IoError& e) {
        std::cerr << "crystal: " << e.what() << "\n";
        return kIoError;
    }
    if (code != kOk) {
        std::cerr << "crystal: " << manifest["error"].get<std::string>() << "\n";
    } else {
        log("done in " + io::format_double(wall) + " s");
    }
    return code;
}
