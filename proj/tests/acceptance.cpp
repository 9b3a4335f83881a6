// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance            run all eleven
//   acceptance 3 5 7      run a subset by number

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "crystal/experiments.hpp"
#include "crystal/gibbs.hpp"
#include "crystal/gradient_flow.hpp"
#include "crystal/lattice.hpp"
#include "crystal/pde.hpp"
#include "support/gibbs_oracle.hpp"

using namespace crystal;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::abs(b); }

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

// ---------------------------------------------------------------- 1

Outcome detailed_balance() {
    std::mt19937_64 g(2024);
    std::uniform_int_distribution<std::size_t> size(3, 16);
    std::uniform_int_distribution<Height> slope(-5, 5);
    const double betas[3] = {0.01, 0.25, 1.0};
    double worst = 0.0;
    int states = 0;
    while (states < 10000) {
        const std::size_t n = size(g);
        // slopes in [-5, 5] that close up around the ring
        std::vector<Height> z(n);
        Height sum = 0;
        for (std::size_t i = 0; i + 1 < n; ++i) sum += (z[i] = slope(g));
        z[n - 1] = -sum;
        if (std::abs(z[n - 1]) > 5) continue;
        std::vector<Height> h(n, 0);
        for (std::size_t i = 1; i < n; ++i) h[i] = h[i - 1] + z[i - 1];
        const MicroState s(h);
        const double beta = betas[states % 3];
        const InverseTemperature b(beta);
        for (std::size_t i = 0; i < n; ++i) {
            for (const JumpEvent e : {JumpEvent::right(i, n), JumpEvent::left(i, n)}) {
                MicroState t = s;
                t.apply(e);
                // energies from scratch; the rates go through the local energy difference
                const double dh = static_cast<double>(MicroState::scratch_energy(t.heights()) - MicroState::scratch_energy(s.heights()));
                const double lhs = jump_rate(s, e, b);
                const double rhs = jump_rate(t, e.reversed(), b) * std::exp(-beta * dh);
                worst = std::max(worst, rel_err(lhs, rhs));
            }
        }
        ++states;
    }
    return {worst < 1e-12, "max relative error " + num(worst) + " over " + std::to_string(states) + " states"};
}

// ---------------------------------------------------------------- 2

Outcome gibbs_oracle() {
    double worst_moment = 0.0;
    int cells = 0;
    for (double beta : {0.01, 0.1, 0.25, 0.5}) {
        for (int k = -10; k <= 10; ++k) {
            const double lambda = 0.5 * k;
            for (int m = -3; m <= 3; ++m) {
                const double closed = gibbs::log_exp_moment({beta, lambda}, m);
                const double brute = static_cast<double>(oracle::brute_log_moment(beta, lambda, m));
                worst_moment = std::max(worst_moment, std::abs(std::expm1(closed - brute)));
                ++cells;
            }
        }
    }
    double worst_rate = 0.0;
    std::mt19937_64 g(7);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (double beta : {0.01, 0.1, 0.25, 0.5}) {
        gibbs::TiltField f{std::vector<double>(8), beta};
        for (double& l : f.lambdas) l = u(g);
        for (std::int64_t i = 0; i < 8; ++i) {
            const double lm = f[i - 1], l0 = f[i], lp = f[i + 1];
            const long double right = std::exp(-3.0L * beta + oracle::brute_log_moment(beta, lm, 1) +
                                               oracle::brute_log_moment(beta, l0, -2) + oracle::brute_log_moment(beta, lp, 1));
            const long double left = std::exp(-3.0L * beta + oracle::brute_log_moment(beta, lm, -1) +
                                              oracle::brute_log_moment(beta, l0, 2) + oracle::brute_log_moment(beta, lp, -1));
            worst_rate = std::max(worst_rate, rel_err(gibbs::expected_rate_right(f, i), static_cast<double>(right)));
            worst_rate = std::max(worst_rate, rel_err(gibbs::expected_rate_left(f, i), static_cast<double>(left)));
        }
    }
    bool monotone = true;
    double prev = INFINITY;
    std::string zs;
    for (double beta : {0.5, 0.1, 0.01, 0.001}) {
        const double d = std::abs(gibbs::partition_ratio_minus_one(beta, 0.3));
        if (!(d <= prev)) monotone = false;
        prev = d;
        zs += (zs.empty() ? "" : ", ") + num(d);
    }
    const bool pass = worst_moment < 1e-10 && worst_rate < 1e-10 && monotone;
    return {pass, "moment err " + num(worst_moment) + " over " + std::to_string(cells) + " cells, rate err " + num(worst_rate) +
                      ", |Z-1| at alpha=0.3: " + zs};
}

// ---------------------------------------------------------------- 3

Outcome current_closed_form() {
    const MacroProfile h = MacroProfile::sample([](double x) { return 0.1 * std::sin(2 * M_PI * x); }, 64);
    const auto closed = gibbs::expected_current(h, 0.25);
    const auto exact = gibbs::expected_current_exact(h, 0.25);
    const double scale = max_abs(closed);
    double worst = 0.0;
    bool ok = true;
    for (std::size_t j = 0; j < closed.size(); ++j) {
        const double d = std::abs(exact[j] - closed[j]);
        if (d > 0.02 * std::abs(closed[j]) + 1e-12 * scale) ok = false;
        if (std::abs(closed[j]) > 1e-9 * scale) worst = std::max(worst, d / std::abs(closed[j]));
    }
    return {ok, "max pointwise relative gap " + num(worst) + " (limit 0.02)"};
}

// ---------------------------------------------------------------- 4

Outcome conservation_dissipation() {
    struct Case {
        const char* name;
        pde::Form form;
        double beta;
        ProfileKind kind;
        double amp;
        std::size_t grid;
        double t;
    };
    const Case cases[] = {
        {"height sine b=0.01", pde::Form::height, 0.01, ProfileKind::sine, 0.1, 64, 1e-4},
        {"height sine b=0.25", pde::Form::height, 0.25, ProfileKind::sine, 0.1, 64, 1e-4},
        {"height sine b=1", pde::Form::height, 1.0, ProfileKind::sine, 0.05, 64, 1e-4},
        {"height two_bump b=0.25", pde::Form::height, 0.25, ProfileKind::two_bump, 0.1, 96, 2e-5},
        {"height bump b=0.05", pde::Form::height, 0.05, ProfileKind::compact_bump, 1.0, 64, 5e-10},
        {"slope sine", pde::Form::slope, 1.0, ProfileKind::sine, 0.05, 64, 2e-4},
        {"slope two_bump", pde::Form::slope, 1.0, ProfileKind::two_bump, 0.02, 64, 5e-5},
    };
    double worst_drift = 0.0;
    std::size_t steps = 0;
    std::string bad;
    for (const auto& c : cases) {
        InitialProfile p;
        p.kind = c.kind;
        p.amplitude = c.amp;
        MacroProfile h0 = sample_profile(p, c.grid);
        for (double& v : h0.values) v += 0.25;  // nonzero mean
        pde::SolverConfig sc;
        sc.form = c.form;
        sc.beta = c.beta;
        const auto r = harness::evolve_recorded(h0, c.t, sc, {});
        worst_drift = std::max(worst_drift, r.max_mean_drift);
        steps += r.stats.accepted;
        if (!r.energy_nonincreasing || r.max_mean_drift >= 1e-10) bad += std::string(bad.empty() ? "" : ", ") + c.name;
    }
    return {bad.empty(), std::to_string(std::size(cases)) + " runs, " + std::to_string(steps) + " accepted steps, max mean drift " +
                             num(worst_drift) + (bad.empty() ? "" : "; failing: " + bad)};
}

// ---------------------------------------------------------------- 5

Outcome linear_decay() {
    ExperimentConfig cfg = defaults_for(Experiment::decay);
    validate(cfg);
    const auto r = harness::run_decay(cfg, nullptr);
    const double target = flow::poincare_constant();
    const double ratio = r.l2_fit.rate / target;
    return {std::abs(ratio - 1.0) < 0.01, "fitted rate " + num(r.l2_fit.rate) + " vs (2 pi)^4 = " + num(target) + " (ratio " +
                                              num(ratio) + ")"};
}

// ---------------------------------------------------------------- 6

Outcome minimizing_movement() {
    const std::size_t grid = 64;
    const double t = 1e-5;
    MacroProfile h0 = MacroProfile::sample(
        [](double x) { return 0.01 * std::sin(2 * M_PI * x) + 0.001 * std::cos(4 * M_PI * x); }, grid);
    project_mean_zero(h0.values);
    pde::SolverConfig sc;
    sc.form = pde::Form::slope;
    sc.abs_tol = 1e-15;
    sc.rel_tol = 1e-11;
    const MacroProfile ref = pde::evolve(h0, t, sc).final_state;
    const double norm0 = l2_norm(h0.values, h0.dx());
    std::vector<double> gaps;
    bool decreasing = true;
    for (std::size_t n : {8u, 16u, 32u, 64u}) {
        const auto traj = flow::minimizing_movement(h0, t, n);
        gaps.push_back(l2_distance(traj.back().values, ref.values, h0.dx()));
        if (gaps.size() > 1 && !(gaps.back() < gaps[gaps.size() - 2])) decreasing = false;
    }
    const bool small = gaps.back() < 1e-4 * norm0;
    std::string d = "L2 gaps";
    for (double gp : gaps) d += " " + num(gp);
    d += "; final / ||h0|| = " + num(gaps.back() / norm0) + " (limit 1e-4)";
    return {decreasing && small, d};
}

// ---------------------------------------------------------------- 7

Outcome evi_and_decay() {
    pde::SolverConfig sc;
    sc.form = pde::Form::slope;
    sc.abs_tol = 1e-13;
    sc.rel_tol = 1e-9;
    struct Run {
        MacroProfile h0;
        double t;
    };
    std::vector<Run> runs;
    for (double amp : {1e-4, 0.01, 0.03}) {
        MacroProfile h = MacroProfile::sample(
            [=](double x) { return amp * (std::sin(2 * M_PI * x) + 0.5 * std::cos(4 * M_PI * x) + 0.2 * std::sin(6 * M_PI * x)); }, 48);
        project_mean_zero(h.values);
        runs.push_back({h, 5e-4});
    }
    double worst_evi = -INFINITY, worst_env = 0.0, worst_energy = 0.0;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        const auto traj = harness::sampled_trajectory(runs[k].h0, runs[k].t, 200, sc);
        const double lam = flow::discrete_poincare_constant(48);
        const auto tests = harness::evi_test_profiles(48, 1.0, 20, sup_norm(runs[k].h0.values), 100 + k);
        worst_evi = std::max(worst_evi, harness::evi_battery(traj, tests, lam).worst_ratio);
        const auto d = flow::decay_diagnostics(traj);
        worst_env = std::max(worst_env, d.envelope_max_increase);
        worst_energy = std::max(worst_energy, d.energy_bound_ratio);
    }
    const bool pass = worst_evi <= 1e-3 && worst_env <= 1e-3 && worst_energy <= 1.0 + 1e-9;
    return {pass, "EVI max residual/scale " + num(worst_evi) + " (20 profiles x 3 runs), envelope max increase " +
                      num(worst_env) + ", energy bound ratio " + num(worst_energy)};
}

// ---------------------------------------------------------------- 8, 9

const harness::ComparisonReport& compare_run() {
    static std::optional<harness::ComparisonReport> rep;
    if (!rep) {
        ExperimentConfig cfg = defaults_for(Experiment::compare);
        validate(cfg);
        rep = harness::run_compare(cfg, nullptr);
    }
    return *rep;
}

Outcome scaling_trend() {
    const auto& r = compare_run();
    bool trend = !r.gap_trend.empty();
    for (const auto& [t, ok] : r.gap_trend) trend = trend && ok;
    double final_gap = 0.0;
    std::string d = "sup gaps by N:";
    for (const auto& g : r.gaps) {
        d += " " + std::to_string(g.n) + ":" + num(g.sup_gap);
        final_gap = g.sup_gap;  // sorted by N, last is the largest
    }
    const double limit = 0.2 * defaults_for(Experiment::compare).profile.amplitude;
    d += "; nonincreasing " + std::string(trend ? "yes" : "no") + ", final " + num(final_gap) + " (limit " + num(limit) + ")";
    return {trend && final_gap < limit, d};
}

Outcome rate_averages() {
    const auto& small = compare_run();
    bool ok_small = !small.rates.empty();
    std::string d = "beta=0.01 within 3 se:";
    for (const auto& c : small.rates) {
        d += " " + std::to_string(c.n) + ":" + num(c.within_3sigma);
        if (c.within_3sigma < 0.97) ok_small = false;
    }
    ExperimentConfig cfg = defaults_for(Experiment::rates);
    validate(cfg);
    const auto big = harness::run_rates(cfg, nullptr);
    bool persistent = big.rates.size() >= 3;
    d += "; beta=0.25 mean relative residual:";
    for (const auto& c : big.rates) {
        d += " " + std::to_string(c.n) + ":" + num(c.mean_rel_residual) + "+-" + num(c.mean_rel_residual_se);
        if (std::abs(c.mean_rel_residual) <= 3.0 * c.mean_rel_residual_se) persistent = false;
    }
    if (persistent) {
        const double first = std::abs(big.rates.front().mean_rel_residual), last = std::abs(big.rates.back().mean_rel_residual);
        if (last < 0.5 * first) persistent = false;
    }
    d += persistent ? " (persists)" : " (does not persist)";
    return {ok_small && persistent, d};
}

// ---------------------------------------------------------------- 10

Outcome wetting() {
    ExperimentConfig cfg = defaults_for(Experiment::wetting);
    validate(cfg);
    const auto r = harness::run_wetting(cfg, nullptr);
    const bool pass = !r.failure && r.support_monotone && r.max_mass_drift < 1e-10 && r.dips_below_zero &&
                      r.support.back() > r.support.front();
    return {pass, "support " + num(r.support.front()) + " -> " + num(r.support.back()) +
                      (r.support_monotone ? " monotone" : " not monotone") + ", min " + num(r.min_value) + " at t=" +
                      num(r.min_time) + ", mass drift " + num(r.max_mass_drift) + (r.failure ? ", failed: " + *r.failure : "")};
}

// ---------------------------------------------------------------- 11

Outcome self_similarity() {
    ExperimentConfig cfg = defaults_for(Experiment::selfsim);
    validate(cfg);
    const auto plus = harness::run_selfsim(cfg, nullptr);
    cfg.profile.amplitude = -cfg.profile.amplitude;
    const auto minus = harness::run_selfsim(cfg, nullptr);
    double sym = 0.0;
    for (std::size_t j = 0; j < plus.profile.size(); ++j) {
        sym = std::max(sym, std::abs(plus.profile.values[j] + minus.profile.values[j]));
    }
    const bool pass = plus.converged && minus.converged && sym < 1e-6;
    return {pass, "iterations " + std::to_string(plus.iterations) + "/" + std::to_string(minus.iterations) + ", final gap " +
                      num(plus.gaps.back()) + ", |g(+sin) + g(-sin)| = " + num(sym)};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all{
        {1, "detailed balance", detailed_balance},
        {2, "gibbs closed forms vs brute force", gibbs_oracle},
        {3, "current closed form", current_closed_form},
        {4, "pde conservation and dissipation", conservation_dissipation},
        {5, "linearized decay rate", linear_decay},
        {6, "minimizing movement consistency", minimizing_movement},
        {7, "EVI and decay inequalities", evi_and_decay},
        {8, "scaling-limit trend", scaling_trend},
        {9, "rate averages vs local Gibbs", rate_averages},
        {10, "wetting", wetting},
        {11, "self-similarity", self_similarity},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failed;
        std::printf("%s %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
