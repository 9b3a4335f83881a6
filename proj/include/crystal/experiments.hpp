#pragma once

// Experiment drivers behind the `crystal` command: each takes a validated
// configuration, optionally writes its artifacts to a run directory, and
// returns a report that the tests inspect directly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crystal/config.hpp"
#include "crystal/errors.hpp"
#include "crystal/gibbs.hpp"
#include "crystal/gradient_flow.hpp"
#include "crystal/grid.hpp"
#include "crystal/io.hpp"
#include "crystal/kmc.hpp"
#include "crystal/lattice.hpp"
#include "crystal/pde.hpp"
#include "crystal/profiles.hpp"
#include "crystal/rng.hpp"

namespace crystal::harness {

using Log = std::function<void(const std::string&)>;

/// Per-site replica mean and standard error of rescaled lattice profiles.
struct ReplicaMean {
    double time = 0.0;
    std::vector<double> mean;
    std::vector<double> stderr_;
};

inline ReplicaMean replica_mean(const std::vector<kmc::Trajectory>& reps, std::size_t snapshot, double macro_time) {
    if (reps.empty()) throw ConfigError("no replicas to aggregate");
    const std::size_t n = reps.front().initial.size();
    const double inv3 = 1.0 / std::pow(static_cast<double>(n), 3);
    ReplicaMean out;
    out.time = macro_time;
    out.mean.assign(n, 0.0);
    out.stderr_.assign(n, 0.0);
    std::vector<double> m2(n, 0.0);
    double k = 0.0;
    for (const auto& tr : reps) {
        if (snapshot >= tr.snapshots.size()) throw NumericalError("replica is missing a requested snapshot");
        const auto& h = tr.snapshots[snapshot].heights;
        k += 1.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(h[j]) * inv3;
            const double d = v - out.mean[j];
            out.mean[j] += d / k;
            m2[j] += d * (v - out.mean[j]);
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        out.stderr_[j] = k > 1.0 ? std::sqrt(m2[j] / (k - 1.0) / k) : 0.0;
    }
    return out;
}

/// Values of a periodic grid profile at x = j / n, exact when n divides the grid.
inline std::vector<double> sample_on_lattice(const MacroProfile& p, std::size_t n) {
    std::vector<double> out(n);
    const std::size_t g = p.size();
    if (g % n == 0) {
        const std::size_t stride = g / n;
        for (std::size_t j = 0; j < n; ++j) out[j] = p.values[j * stride];
        return out;
    }
    std::vector<double> x(g);
    for (std::size_t j = 0; j < g; ++j) x[j] = p.x(j) / p.length;
    const TabulatedProfile tab(x, p.values, 1.0);
    for (std::size_t j = 0; j < n; ++j) out[j] = tab(static_cast<double>(j) / static_cast<double>(n));
    return out;
}

/// Manifest skeleton shared by every experiment.
inline json manifest_for(const ExperimentConfig& cfg) {
    json m;
    m["tool"] = "crystal";
    m["version"] = io::kVersion;
    m["experiment"] = to_string(cfg.experiment);
    m["config"] = to_json(cfg);
    m["seeds"] = {{"master", cfg.seed},
                  {"replicas", cfg.replicas},
                  {"streams", "mt19937_64 seeded by seed_seq(master, replica index)"}};
    return m;
}

// ---------------------------------------------------------------- pde

struct PdeReport {
    std::vector<MacroProfile> snapshots;
    MacroProfile final_state;
    std::vector<double> step_times;
    std::vector<double> energies;
    std::vector<double> means;
    double max_mean_drift = 0.0;
    bool energy_nonincreasing = true;
    pde::EvolveStats stats;

    json to_json() const {
        return {{"accepted_steps", stats.accepted},
                {"rejected_steps", stats.rejected},
                {"newton_failures", stats.newton_failures},
                {"smallest_step", stats.smallest_step},
                {"largest_step", stats.largest_step},
                {"max_mean_drift", max_mean_drift},
                {"energy_nonincreasing", energy_nonincreasing},
                {"final_energy", energies.empty() ? 0.0 : energies.back()}};
    }
};

/// Evolves a profile, recording energy and mean at every accepted step.
inline PdeReport evolve_recorded(const MacroProfile& h0, double t_end, const pde::SolverConfig& sc,
                                 const std::vector<double>& snapshot_times) {
    PdeReport r;
    pde::Integrator integ(sc, h0.size(), h0.length);
    const double m0 = h0.mean();
    double scale = 1e-300;
    for (double v : h0.values) scale = std::max(scale, std::abs(v));
    pde::EvolveOptions opts;
    opts.snapshot_times = snapshot_times;
    opts.observer = [&](const MacroProfile& p) {
        r.step_times.push_back(p.time);
        const double e = integ.op().energy(p.values);
        if (!r.energies.empty() && e > r.energies.back() * (1.0 + 1e-13) + 1e-300) r.energy_nonincreasing = false;
        r.energies.push_back(e);
        r.means.push_back(p.mean());
        r.max_mean_drift = std::max(r.max_mean_drift, std::abs(p.mean() - m0));
    };
    auto res = integ.evolve(h0, t_end, opts);
    r.snapshots = std::move(res.snapshots);
    r.final_state = std::move(res.final_state);
    r.stats = res.stats;
    return r;
}

inline PdeReport run_pde(const ExperimentConfig& cfg, io::RunDirectory* dir) {
    MacroProfile h0 = sample_profile(cfg.profile, cfg.grid, cfg.length);
    auto times = cfg.report_times();
    times.insert(times.begin(), 0.0);
    PdeReport r = evolve_recorded(h0, cfg.t_final, cfg.solver(), times);
    if (dir) {
        for (const auto& s : r.snapshots) dir->write_profile("pde", s);
        dir->write_series("energy.csv", r.step_times, r.energies);
        dir->write_series("mean.csv", r.step_times, r.means);
        if (cfg.gnuplot) {
            std::vector<std::vector<double>> cols{std::vector<double>(cfg.grid)};
            std::vector<std::string> heads{"x"};
            for (std::size_t j = 0; j < cfg.grid; ++j) cols[0][j] = h0.x(j);
            for (const auto& s : r.snapshots) {
                cols.push_back(s.values);
                heads.push_back("h(t=" + io::format_double(s.time) + ")");
            }
            dir->write_columns("pde.dat", heads, cols);
        }
    }
    return r;
}

// ---------------------------------------------------------------- kmc

struct KmcCell {
    std::size_t n = 0;
    std::vector<ReplicaMean> profiles;  // at 0 and each report time
    std::uint64_t min_events = 0;
    std::uint64_t max_events = 0;
    double mean_events = 0.0;
    std::int64_t mass_drift = 0;
};

struct KmcReport {
    std::vector<KmcCell> cells;
    json to_json() const {
        json a = json::array();
        for (const auto& c : cells) {
            a.push_back({{"n", c.n},
                         {"events_min", c.min_events},
                         {"events_max", c.max_events},
                         {"events_mean", c.mean_events},
                         {"mass_drift", c.mass_drift}});
        }
        return {{"cells", a}};
    }
};

inline std::int64_t total_mass(const std::vector<Height>& h) {
    std::int64_t s = 0;
    for (auto v : h) s += v;
    return s;
}

/// Replicas of one lattice size with snapshots at the given macroscopic times.
inline std::vector<kmc::Trajectory> run_lattice(const ExperimentConfig& cfg, std::size_t n,
                                                const std::vector<double>& macro_snapshots,
                                                const std::vector<double>& macro_checkpoints) {
    const MicroState s0 = kmc::init_microstate([&](double x) { return make_profile(cfg.profile, x); }, n);
    kmc::MetropolisModel model{InverseTemperature(cfg.beta)};
    kmc::RunSchedule sch;
    for (double t : macro_snapshots) sch.snapshot_times.push_back(kmc::micro_time(t, n));
    for (double t : macro_checkpoints) sch.checkpoint_times.push_back(kmc::micro_time(t, n));
    sch.max_events = cfg.max_events;
    return kmc::run_replicas(s0, model, kmc::micro_time(cfg.t_final, n), sch, cfg.seed ^ (static_cast<std::uint64_t>(n) << 40),
                             cfg.replicas, cfg.threads);
}

inline KmcCell summarize_cell(std::size_t n, const std::vector<kmc::Trajectory>& reps, const std::vector<double>& times) {
    KmcCell c;
    c.n = n;
    for (std::size_t k = 0; k < times.size(); ++k) c.profiles.push_back(replica_mean(reps, k, times[k]));
    c.min_events = UINT64_MAX;
    for (const auto& tr : reps) {
        c.min_events = std::min(c.min_events, tr.events);
        c.max_events = std::max(c.max_events, tr.events);
        c.mean_events += static_cast<double>(tr.events) / static_cast<double>(reps.size());
        const std::int64_t d = total_mass(std::vector<Height>(tr.final_state.heights().begin(), tr.final_state.heights().end())) -
                               total_mass(std::vector<Height>(tr.initial.heights().begin(), tr.initial.heights().end()));
        if (std::abs(d) > std::abs(c.mass_drift)) c.mass_drift = d;
    }
    return c;
}

inline void write_replica_mean(io::RunDirectory& dir, const std::string& tag, const ReplicaMean& m) {
    MacroProfile p(m.mean, 1.0, m.time);
    dir.write_profile(tag, p);
    std::vector<double> x(m.mean.size());
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = static_cast<double>(j) / static_cast<double>(x.size());
    dir.write_series(tag + "_stderr_t" + io::time_label(m.time) + ".csv", x, m.stderr_, "x,stderr");
}

inline KmcReport run_kmc(const ExperimentConfig& cfg, io::RunDirectory* dir, const Log& log = {}) {
    KmcReport r;
    auto times = cfg.report_times();
    times.insert(times.begin(), 0.0);
    for (std::size_t n : cfg.n) {
        if (log) log("kmc: N=" + std::to_string(n));
        const auto reps = run_lattice(cfg, n, times, {});
        r.cells.push_back(summarize_cell(n, reps, times));
        if (dir) {
            for (const auto& m : r.cells.back().profiles) write_replica_mean(*dir, "kmc_N" + std::to_string(n), m);
        }
    }
    return r;
}

// ---------------------------------------------------------------- compare / rates

struct GapCell {
    std::size_t n = 0;
    double time = 0.0;
    double sup_gap = 0.0;
    double l2_gap = 0.0;
    double change_sup_gap = 0.0;
    double change_l2_gap = 0.0;
    double max_stderr = 0.0;
    double within_3sigma = 0.0;  // fraction of sites with |kmc - pde| <= 3 stderr
};

/// Time-averaged lattice rates against local Gibbs expectations for one N.
struct RateCell {
    std::size_t n = 0;
    double center = 0.0;
    double window = 0.0;
    std::vector<double> avg_right, se_right, avg_left, se_left;
    std::vector<double> gibbs_right, gibbs_left;              // exact Z, fitted tilts
    std::vector<double> gibbs_small_right, gibbs_small_left;  // small-beta form, fitted tilts
    std::vector<double> gibbs_asym_right, gibbs_asym_left;    // exact Z, tilts 2 beta <z>
    double within_3sigma = 0.0;
    double chi2_per_dof = 0.0;
    /// Root-mean-square relative misfit with the sampling variance removed.
    double excess_rel_residual = 0.0;
    /// Replica mean and stderr of the site-averaged signed relative residual.
    double mean_rel_residual = 0.0;
    double mean_rel_residual_se = 0.0;
    /// Largest standardized residual.
    double max_abs_z = 0.0;
};

struct ComparisonReport {
    double pde_time_scale = 1.0;  // PDE time per unit lattice macro time
    std::vector<GapCell> gaps;
    std::vector<RateCell> rates;
    std::vector<KmcCell> cells;
    /// Per report time: sup gap nonincreasing in N (only with >= 3 sizes).
    std::vector<std::pair<double, bool>> gap_trend;

    json to_json() const {
        json g = json::array();
        for (const auto& c : gaps) {
            g.push_back({{"n", c.n},
                         {"t", c.time},
                         {"sup_gap", c.sup_gap},
                         {"l2_gap", c.l2_gap},
                         {"change_sup_gap", c.change_sup_gap},
                         {"change_l2_gap", c.change_l2_gap},
                         {"max_stderr", c.max_stderr},
                         {"within_3sigma", c.within_3sigma}});
        }
        json rr = json::array();
        for (const auto& c : rates) {
            rr.push_back({{"n", c.n},
                          {"center", c.center},
                          {"window", c.window},
                          {"within_3sigma", c.within_3sigma},
                          {"chi2_per_dof", c.chi2_per_dof},
                          {"excess_rel_residual", c.excess_rel_residual},
                          {"mean_rel_residual", c.mean_rel_residual},
                          {"mean_rel_residual_se", c.mean_rel_residual_se},
                          {"max_abs_z", c.max_abs_z}});
        }
        json tr = json::array();
        for (const auto& [t, ok] : gap_trend) tr.push_back({{"t", t}, {"sup_gap_nonincreasing", ok}});
        json ev = json::array();
        for (const auto& c : cells) ev.push_back({{"n", c.n}, {"events_mean", c.mean_events}, {"mass_drift", c.mass_drift}});
        return {{"pde_time_scale", pde_time_scale}, {"gaps", g}, {"rates", rr}, {"trend", tr}, {"events", ev}};
    }
};

inline RateCell rate_cell(const ExperimentConfig& cfg, std::size_t n, const std::vector<kmc::Trajectory>& reps,
                          const MacroProfile& pde_at_center) {
    RateCell c;
    c.n = n;
    c.center = cfg.resolved_rate_center();
    c.window = cfg.resolved_rate_window();
    const std::size_t k = reps.size();
    const double kd = static_cast<double>(k);
    std::vector<std::vector<double>> right(n, std::vector<double>(k)), left(n, std::vector<double>(k));
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t b = 0; b < n; ++b) {
            right[b][r] = kmc::time_averaged_rate(reps[r], b, c.center, c.window, Direction::right);
            left[b][r] = kmc::time_averaged_rate(reps[r], b, c.center, c.window, Direction::left);
        }
    }
    auto stats = [kd](const std::vector<double>& v, double& mean, double& se) {
        mean = 0.0;
        for (double x : v) mean += x;
        mean /= kd;
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        se = kd > 1.0 ? std::sqrt(ss / (kd - 1.0) / kd) : 0.0;
    };
    c.avg_right.resize(n);
    c.se_right.resize(n);
    c.avg_left.resize(n);
    c.se_left.resize(n);
    for (std::size_t b = 0; b < n; ++b) {
        stats(right[b], c.avg_right[b], c.se_right[b]);
        stats(left[b], c.avg_left[b], c.se_left[b]);
    }

    const auto sampled = sample_on_lattice(pde_at_center, n);
    const gibbs::TiltField tilts = gibbs::tilts_from_bond_slopes(sampled, cfg.beta);
    gibbs::TiltField asym = tilts;
    const double n3 = std::pow(static_cast<double>(n), 3);
    for (std::size_t b = 0; b < n; ++b) asym.lambdas[b] = 2.0 * cfg.beta * n3 * (sampled[(b + 1) % n] - sampled[b]);
    for (std::size_t b = 0; b < n; ++b) {
        const auto bi = static_cast<std::int64_t>(b);
        c.gibbs_right.push_back(gibbs::expected_rate_right(tilts, bi));
        c.gibbs_left.push_back(gibbs::expected_rate_left(tilts, bi));
        c.gibbs_small_right.push_back(gibbs::expected_rate_small_beta(tilts, bi, true));
        c.gibbs_small_left.push_back(gibbs::expected_rate_small_beta(tilts, bi, false));
        c.gibbs_asym_right.push_back(gibbs::expected_rate_right(asym, bi));
        c.gibbs_asym_left.push_back(gibbs::expected_rate_left(asym, bi));
    }

    std::size_t inside = 0, count = 0;
    double chi2 = 0.0, excess = 0.0;
    auto visit = [&](double avg, double se, double expect) {
        const double z = se > 0.0 ? (avg - expect) / se : (avg == expect ? 0.0 : INFINITY);
        if (std::abs(z) <= 3.0) ++inside;
        chi2 += z * z;
        c.max_abs_z = std::max(c.max_abs_z, std::abs(z));
        const double rel = (avg - expect) / expect, rse = se / expect;
        excess += rel * rel - rse * rse;
        ++count;
    };
    for (std::size_t b = 0; b < n; ++b) {
        visit(c.avg_right[b], c.se_right[b], c.gibbs_right[b]);
        visit(c.avg_left[b], c.se_left[b], c.gibbs_left[b]);
    }
    const double cd = static_cast<double>(count);
    c.within_3sigma = static_cast<double>(inside) / cd;
    c.chi2_per_dof = chi2 / cd;
    c.excess_rel_residual = std::sqrt(std::max(excess / cd, 0.0));

    std::vector<double> per_replica(k, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t b = 0; b < n; ++b) {
            per_replica[r] += (right[b][r] - c.gibbs_right[b]) / c.gibbs_right[b];
            per_replica[r] += (left[b][r] - c.gibbs_left[b]) / c.gibbs_left[b];
        }
        per_replica[r] /= 2.0 * static_cast<double>(n);
    }
    stats(per_replica, c.mean_rel_residual, c.mean_rel_residual_se);
    return c;
}

inline void write_rate_cell(io::RunDirectory& dir, const RateCell& c) {
    std::vector<double> bond(c.n), x(c.n);
    for (std::size_t b = 0; b < c.n; ++b) {
        bond[b] = static_cast<double>(b);
        x[b] = (static_cast<double>(b) + 0.5) / static_cast<double>(c.n);
    }
    dir.write_table("rates_N" + std::to_string(c.n) + ".csv",
                    {"bond", "x", "avg_right", "se_right", "avg_left", "se_left", "gibbs_right", "gibbs_left",
                     "gibbs_small_right", "gibbs_small_left", "gibbs_asym_right", "gibbs_asym_left"},
                    {bond, x, c.avg_right, c.se_right, c.avg_left, c.se_left, c.gibbs_right, c.gibbs_left,
                     c.gibbs_small_right, c.gibbs_small_left, c.gibbs_asym_right, c.gibbs_asym_left});
}

/// Lattice replicas for every N against one PDE run. The PDE omits the
/// exp(-3 beta/2) prefactor unless configured otherwise, and is evaluated
/// at exp(-3 beta/2) times the lattice macro time.
inline ComparisonReport run_compare(const ExperimentConfig& cfg, io::RunDirectory* dir, const Log& log = {},
                                    bool with_gaps = true) {
    ComparisonReport rep;
    rep.pde_time_scale = cfg.prefactor ? 1.0 : std::exp(-1.5 * cfg.beta);
    const MacroProfile h0 = sample_profile(cfg.profile, cfg.grid, cfg.length);
    std::vector<double> times = cfg.report_times();
    times.insert(times.begin(), 0.0);
    const double tc = cfg.resolved_rate_center(), delta = cfg.resolved_rate_window();

    std::vector<double> pde_times;
    for (double t : times) pde_times.push_back(t * rep.pde_time_scale);
    pde_times.push_back(tc * rep.pde_time_scale);
    pde::SolverConfig sc = cfg.solver();
    sc.form = pde::Form::height;
    if (log) log("compare: PDE on " + std::to_string(cfg.grid) + " points");
    auto pres = pde::evolve(h0, cfg.t_final * rep.pde_time_scale, sc, {pde_times, {}});
    auto pde_at = [&](double t) -> MacroProfile {
        for (const auto& s : pres.snapshots) {
            if (s.time == t * rep.pde_time_scale) return s;
        }
        throw NumericalError("PDE snapshot missing");
    };
    if (dir) {
        for (double t : times) {
            MacroProfile p = pde_at(t);
            p.time = t;
            dir->write_profile("pde", p);
            if (t > 0.0) {
                MacroProfile d = p;
                for (std::size_t j = 0; j < d.size(); ++j) d.values[j] -= h0.values[j];
                dir->write_profile("diff_pde", d);
            }
        }
    }

    std::vector<std::size_t> sizes = cfg.n;
    std::sort(sizes.begin(), sizes.end());
    for (std::size_t n : sizes) {
        if (log) log("compare: N=" + std::to_string(n) + ", " + std::to_string(cfg.replicas) + " replicas");
        const auto reps = run_lattice(cfg, n, times, {tc - delta, tc + delta});
        rep.cells.push_back(summarize_cell(n, reps, times));
        const KmcCell& cell = rep.cells.back();
        const double dxn = 1.0 / static_cast<double>(n);
        const auto base_pde = sample_on_lattice(pde_at(0.0), n);
        for (std::size_t k = 0; with_gaps && k < times.size(); ++k) {
            if (times[k] == 0.0) continue;
            const auto ref = sample_on_lattice(pde_at(times[k]), n);
            const auto& m = cell.profiles[k];
            GapCell g;
            g.n = n;
            g.time = times[k];
            g.sup_gap = sup_distance(m.mean, ref);
            g.l2_gap = l2_distance(m.mean, ref, dxn);
            std::vector<double> dk(n), dp(n);
            std::size_t inside = 0;
            for (std::size_t j = 0; j < n; ++j) {
                dk[j] = m.mean[j] - cell.profiles[0].mean[j];
                dp[j] = ref[j] - base_pde[j];
                if (std::abs(m.mean[j] - ref[j]) <= 3.0 * m.stderr_[j]) ++inside;
            }
            g.change_sup_gap = sup_distance(dk, dp);
            g.change_l2_gap = l2_distance(dk, dp, dxn);
            g.max_stderr = sup_norm(m.stderr_);
            g.within_3sigma = static_cast<double>(inside) / static_cast<double>(n);
            rep.gaps.push_back(g);
            if (dir) {
                write_replica_mean(*dir, "kmc_N" + std::to_string(n), m);
                MacroProfile d(dk, 1.0, times[k]);
                dir->write_profile("diff_kmc_N" + std::to_string(n), d);
                if (cfg.gnuplot) {
                    std::vector<double> x(n);
                    for (std::size_t j = 0; j < n; ++j) x[j] = static_cast<double>(j) * dxn;
                    dir->write_columns("compare_N" + std::to_string(n) + "_t" + io::time_label(times[k]) + ".dat",
                                       {"x", "pde", "kmc_mean", "kmc_stderr", "pde_change", "kmc_change"},
                                       {x, ref, m.mean, m.stderr_, dp, dk});
                }
            }
        }
        rep.rates.push_back(rate_cell(cfg, n, reps, pde_at(tc)));
        if (dir) {
            write_rate_cell(*dir, rep.rates.back());
            // keep partial results current in case a later N fails
            dir->write_json("report.json", rep.to_json());
        }
    }
    if (with_gaps && sizes.size() >= 3) {
        for (double t : times) {
            if (t == 0.0) continue;
            bool ok = true;
            double prev = INFINITY;
            for (const auto& g : rep.gaps) {
                if (g.time != t) continue;
                if (g.sup_gap > prev) ok = false;
                prev = g.sup_gap;
            }
            rep.gap_trend.emplace_back(t, ok);
        }
    }
    if (dir) {
        if (with_gaps) {
            std::vector<double> ns, ts, sg, lg, csg, clg, se;
            for (const auto& g : rep.gaps) {
                ns.push_back(static_cast<double>(g.n));
                ts.push_back(g.time);
                sg.push_back(g.sup_gap);
                lg.push_back(g.l2_gap);
                csg.push_back(g.change_sup_gap);
                clg.push_back(g.change_l2_gap);
                se.push_back(g.max_stderr);
            }
            dir->write_table("gaps.csv", {"n", "t", "sup_gap", "l2_gap", "change_sup_gap", "change_l2_gap", "max_stderr"},
                             {ns, ts, sg, lg, csg, clg, se});
        }
        dir->write_json("report.json", rep.to_json());
    }
    return rep;
}

inline ComparisonReport run_rates(const ExperimentConfig& cfg, io::RunDirectory* dir, const Log& log = {}) {
    return run_compare(cfg, dir, log, false);
}

// ---------------------------------------------------------------- wetting

struct WettingReport {
    std::vector<MacroProfile> snapshots;
    std::vector<double> times;          // every accepted step
    std::vector<double> support;        // width where |h| > threshold * max|h0|
    std::vector<double> minimum;
    std::vector<double> mass;
    double snapshot_support_min_step = 0.0;  // smallest change of support between snapshots
    bool support_monotone = true;
    double min_value = 0.0;
    double min_time = 0.0;
    double final_min = 0.0;
    double max_mass_drift = 0.0;
    bool dips_below_zero = false;
    bool levels_off = false;
    std::optional<std::string> failure;

    json to_json() const {
        json j{{"support_initial", support.empty() ? 0.0 : support.front()},
               {"support_final", support.empty() ? 0.0 : support.back()},
               {"support_monotone", support_monotone},
               {"min_value", min_value},
               {"min_time", min_time},
               {"final_min", final_min},
               {"dips_below_zero", dips_below_zero},
               {"levels_off", levels_off},
               {"max_mass_drift", max_mass_drift},
               {"accepted_steps", times.size()}};
        if (failure) j["failure"] = *failure;
        return j;
    }
};

inline double support_width(const MacroProfile& p, double cut) {
    std::size_t c = 0;
    for (double v : p.values) {
        if (std::abs(v) > cut) ++c;
    }
    return static_cast<double>(c) * p.dx();
}

inline WettingReport run_wetting(const ExperimentConfig& cfg, io::RunDirectory* dir) {
    WettingReport r;
    const MacroProfile h0 = sample_profile(cfg.profile, cfg.grid, cfg.length);
    const double cut = cfg.threshold * sup_norm(h0.values);
    const double m0 = h0.mean() * cfg.length;
    std::vector<double> snaps(cfg.snapshots + 1);
    for (std::size_t k = 0; k <= cfg.snapshots; ++k) {
        snaps[k] = cfg.t_final * static_cast<double>(k) / static_cast<double>(cfg.snapshots);
    }
    pde::SolverConfig sc = cfg.solver();
    sc.form = pde::Form::height;
    pde::EvolveOptions opts;
    opts.snapshot_times = snaps;
    opts.observer = [&](const MacroProfile& p) {
        r.times.push_back(p.time);
        r.support.push_back(support_width(p, cut));
        double mn = INFINITY;
        for (double v : p.values) mn = std::min(mn, v);
        r.minimum.push_back(mn);
        const double mass = p.mean() * p.length;
        r.mass.push_back(mass);
        r.max_mass_drift = std::max(r.max_mass_drift, std::abs(mass - m0));
    };
    MacroProfile last = h0;
    try {
        auto res = pde::evolve(h0, cfg.t_final, sc, opts);
        r.snapshots = std::move(res.snapshots);
        last = res.final_state;
    } catch (const pde::SolverFailure& f) {
        r.failure = f.what();
        last = f.last_state;
        if (dir) dir->write_profile("wetting_last_good", last);
    }
    double prev = -INFINITY;
    r.snapshot_support_min_step = INFINITY;
    for (const auto& s : r.snapshots) {
        const double w = support_width(s, cut);
        if (prev > -INFINITY) r.snapshot_support_min_step = std::min(r.snapshot_support_min_step, w - prev);
        if (w < prev) r.support_monotone = false;
        prev = w;
    }
    r.min_value = INFINITY;
    for (std::size_t k = 0; k < r.minimum.size(); ++k) {
        if (r.minimum[k] < r.min_value) {
            r.min_value = r.minimum[k];
            r.min_time = r.times[k];
        }
    }
    r.final_min = r.minimum.empty() ? 0.0 : r.minimum.back();
    r.dips_below_zero = r.min_value < 0.0;
    r.levels_off = r.dips_below_zero && r.final_min > r.min_value;
    if (dir) {
        for (const auto& s : r.snapshots) dir->write_profile("wetting", s);
        dir->write_series("support.csv", r.times, r.support);
        dir->write_series("min.csv", r.times, r.minimum);
        dir->write_series("mass.csv", r.times, r.mass);
        if (cfg.gnuplot && !r.snapshots.empty()) {
            std::vector<std::vector<double>> cols{std::vector<double>(h0.size())};
            std::vector<std::string> heads{"x"};
            for (std::size_t j = 0; j < h0.size(); ++j) cols[0][j] = h0.x(j) >= 0.5 ? h0.x(j) - 1.0 : h0.x(j);
            for (const auto& s : r.snapshots) {
                cols.push_back(s.values);
                heads.push_back("h(t=" + io::format_double(s.time) + ")");
            }
            dir->write_columns("wetting.dat", heads, cols);
        }
    }
    return r;
}

// ---------------------------------------------------------------- selfsim

struct SelfSimReport {
    std::vector<double> gaps;    // sup distance between successive normalized iterates
    std::vector<double> scales;  // max |h| of each pre-rescale iterate
    std::vector<MacroProfile> last_two;  // pre-rescale, most recent last
    MacroProfile profile;                // converged normalized g
    std::size_t iterations = 0;
    bool converged = false;
    double max_second_difference = 0.0;
    /// Grid-scale roughness of D2 g relative to its size; small for a smooth profile.
    double kink_indicator = 0.0;

    json to_json() const {
        return {{"converged", converged},
                {"iterations", iterations},
                {"final_gap", gaps.empty() ? INFINITY : gaps.back()},
                {"last_scale", scales.empty() ? 0.0 : scales.back()},
                {"max_second_difference", max_second_difference},
                {"kink_indicator", kink_indicator}};
    }
};

inline SelfSimReport run_selfsim(const ExperimentConfig& cfg, io::RunDirectory* dir, const Log& log = {}) {
    SelfSimReport r;
    MacroProfile g = sample_profile(cfg.profile, cfg.grid, cfg.length);
    const double s0 = sup_norm(g.values);
    if (!(s0 > 0.0)) throw ConfigError("self-similarity needs a nonzero initial profile");
    for (double& v : g.values) v /= s0;
    pde::SolverConfig sc = cfg.solver();
    sc.form = pde::Form::height;
    pde::Integrator integ(sc, g.size(), g.length);
    for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
        // autonomous flow: each interval restarts the clock so the step floor stays at 1e-300
        g.time = 0.0;
        auto res = integ.evolve(g, cfg.interval);
        MacroProfile pre = std::move(res.final_state);
        const double s = sup_norm(pre.values);
        if (!(s > 0.0) || !std::isfinite(s)) throw NumericalError("self-similar iterate collapsed to zero");
        MacroProfile next = pre;
        for (double& v : next.values) v /= s;
        r.gaps.push_back(sup_distance(next.values, g.values));
        r.scales.push_back(s);
        r.last_two.push_back(pre);
        if (r.last_two.size() > 2) r.last_two.erase(r.last_two.begin());
        g = std::move(next);
        r.iterations = it;
        if (log && (it % 10 == 0)) log("selfsim: iteration " + std::to_string(it) + " gap " + io::format_double(r.gaps.back()));
        if (r.gaps.back() < cfg.tol) {
            r.converged = true;
            break;
        }
    }
    r.profile = g;
    const auto d2 = second_difference(g.values, 1.0);
    r.max_second_difference = sup_norm(d2);
    double rough = 0.0;
    for (std::size_t j = 0; j < d2.size(); ++j) {
        const double nb = 0.5 * (d2[(j + 1) % d2.size()] + d2[(j + d2.size() - 1) % d2.size()]);
        rough = std::max(rough, std::abs(d2[j] - nb));
    }
    r.kink_indicator = r.max_second_difference > 0.0 ? rough / r.max_second_difference : 0.0;
    if (dir) {
        for (std::size_t k = 0; k < r.last_two.size(); ++k) {
            const std::size_t idx = r.iterations + 1 - r.last_two.size() + k;
            dir->write_profile("selfsim_iter" + std::to_string(idx), r.last_two[k]);
        }
        dir->write_profile("selfsim_g", r.profile);
        std::vector<double> its(r.gaps.size());
        for (std::size_t k = 0; k < its.size(); ++k) its[k] = static_cast<double>(k + 1);
        dir->write_series("gaps.csv", its, r.gaps, "iteration,value");
        dir->write_series("scales.csv", its, r.scales, "iteration,value");
        if (cfg.gnuplot && r.last_two.size() == 2) {
            std::vector<double> x(g.size());
            for (std::size_t j = 0; j < x.size(); ++j) x[j] = g.x(j);
            dir->write_columns("selfsim.dat", {"x", "previous", "last"}, {x, r.last_two[0].values, r.last_two[1].values});
        }
    }
    if (!r.converged && log) log("selfsim: no convergence after " + std::to_string(cfg.max_iter) + " iterations");
    return r;
}

// ---------------------------------------------------------------- decay / mm

inline json to_json(const flow::RateFit& f) {
    return {{"rate", f.rate}, {"ci_low", f.ci_low}, {"ci_high", f.ci_high}, {"points", f.points},
            {"t_begin", f.t_begin}, {"t_end", f.t_end}};
}

inline json to_json(const flow::DecayReport& r) {
    json j{{"lambda", r.lambda},
           {"lambda_discrete", r.lambda_discrete},
           {"phi_fit", to_json(r.phi_fit)},
           {"slope_fit", to_json(r.slope_fit)},
           {"l2_fit", to_json(r.l2_fit)},
           {"phi_rate_ok", r.phi_rate_ok},
           {"slope_rate_ok", r.slope_rate_ok},
           {"l2_rate_ok", r.l2_rate_ok},
           {"envelope_max_increase", r.envelope_max_increase},
           {"energy_bound_ratio", r.energy_bound_ratio}};
    j["onset"] = r.onset ? json(*r.onset) : json(nullptr);
    j["times"] = r.times;
    j["phi_values"] = r.phi_values;
    j["slope_norms"] = r.slope_norms;
    j["l2_norms"] = r.l2_norms;
    return j;
}

/// Slope-form trajectory sampled at `count` + 1 equally spaced times.
inline std::vector<MacroProfile> sampled_trajectory(const MacroProfile& h0, double t_end, std::size_t count,
                                                    const pde::SolverConfig& sc) {
    std::vector<double> ts(count + 1);
    for (std::size_t k = 0; k <= count; ++k) ts[k] = h0.time + t_end * static_cast<double>(k) / static_cast<double>(count);
    return pde::evolve(h0, h0.time + t_end, sc, {ts, {}}).snapshots;
}

/// Smooth mean-zero test profiles: modes 1..4 with Gaussian coefficients of size amplitude / k^2,
/// the overall amplitude log-uniform in [amplitude / 10, 2 amplitude].
inline std::vector<MacroProfile> evi_test_profiles(std::size_t n, double length, std::size_t count, double amplitude,
                                                   std::uint64_t seed) {
    std::vector<MacroProfile> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        ReplicaRng rng(seed, i);
        std::mt19937_64 eng(rng.raw());
        std::normal_distribution<double> gauss;
        const double amp = amplitude * 0.1 * std::pow(20.0, rng.uniform());
        double a[5] = {}, b[5] = {};
        for (int k = 1; k <= 4; ++k) {
            a[k] = amp * gauss(eng) / (k * k);
            b[k] = amp * gauss(eng) / (k * k);
        }
        MacroProfile v = MacroProfile::sample(
            [&](double x) {
                double s = 0.0;
                for (int k = 1; k <= 4; ++k) {
                    const double w = 2.0 * std::numbers::pi * k * x / length;
                    s += a[k] * std::sin(w) + b[k] * std::cos(w);
                }
                return s;
            },
            n, length);
        project_mean_zero(v.values);
        out.push_back(std::move(v));
    }
    return out;
}

struct EviBattery {
    std::size_t profiles = 0;
    std::size_t points = 0;
    /// max over profiles and times of residual / scale
    double worst_ratio = -INFINITY;
    std::size_t worst_profile = 0;
    double worst_time = 0.0;

    bool holds(double tol = 1e-3) const { return worst_ratio <= tol; }

    json to_json() const {
        return {{"profiles", profiles}, {"points", points}, {"worst_ratio", worst_ratio},
                {"worst_profile", worst_profile}, {"worst_time", worst_time}};
    }
};

inline EviBattery evi_battery(std::span<const MacroProfile> traj, std::span<const MacroProfile> tests, double lambda) {
    EviBattery b;
    b.profiles = tests.size();
    for (std::size_t i = 0; i < tests.size(); ++i) {
        for (const auto& e : flow::evi_residual(traj, tests[i], lambda)) {
            ++b.points;
            if (!(e.scale > 0.0)) continue;
            const double r = e.residual / e.scale;
            if (r > b.worst_ratio) {
                b.worst_ratio = r;
                b.worst_profile = i;
                b.worst_time = e.time;
            }
        }
    }
    return b;
}

inline flow::DecayReport run_decay(const ExperimentConfig& cfg, io::RunDirectory* dir) {
    MacroProfile h0 = sample_profile(cfg.profile, cfg.grid, cfg.length);
    project_mean_zero(h0.values);
    pde::SolverConfig sc = cfg.solver();
    sc.form = pde::Form::slope;
    const auto traj = sampled_trajectory(h0, cfg.t_final, cfg.snapshots, sc);
    flow::DecayReport r = flow::decay_diagnostics(traj);
    if (dir) {
        dir->write_series("phi.csv", r.times, r.phi_values);
        dir->write_series("slope.csv", r.times, r.slope_norms);
        dir->write_series("l2.csv", r.times, r.l2_norms);
        MacroProfile zero(std::vector<double>(h0.size(), 0.0), h0.length);
        const auto evi = flow::evi_residual(traj, zero, r.lambda_discrete);
        std::vector<double> et, ev;
        for (const auto& e : evi) {
            et.push_back(e.time);
            ev.push_back(e.residual);
        }
        dir->write_series("evi_zero.csv", et, ev);
        const auto tests = evi_test_profiles(h0.size(), h0.length, 20, std::max(sup_norm(h0.values), 1e-12), cfg.seed);
        dir->write_json("evi_battery.json", evi_battery(traj, tests, r.lambda_discrete).to_json());
        dir->write_profile("decay", traj.front());
        dir->write_profile("decay", traj.back());
        dir->write_json("decay_report.json", to_json(r));
        if (cfg.gnuplot) dir->write_columns("decay.dat", {"t", "phi", "slope", "l2"}, {r.times, r.phi_values, r.slope_norms, r.l2_norms});
    }
    return r;
}

struct MmReport {
    std::vector<MacroProfile> iterates;
    std::vector<double> phi_values;
    bool phi_nonincreasing = true;
    double max_abs_mean = 0.0;
    double l2_gap_to_pde = 0.0;

    json to_json() const {
        return {{"steps", iterates.empty() ? 0 : iterates.size() - 1},
                {"phi_nonincreasing", phi_nonincreasing},
                {"max_abs_mean", max_abs_mean},
                {"l2_gap_to_pde", l2_gap_to_pde}};
    }
};

inline MmReport run_mm(const ExperimentConfig& cfg, io::RunDirectory* dir) {
    MmReport r;
    MacroProfile h0 = sample_profile(cfg.profile, cfg.grid, cfg.length);
    project_mean_zero(h0.values);
    r.iterates = flow::minimizing_movement(h0, cfg.t_final, cfg.steps);
    std::vector<double> ts;
    for (const auto& p : r.iterates) {
        ts.push_back(p.time);
        r.phi_values.push_back(flow::phi(p));
        r.max_abs_mean = std::max(r.max_abs_mean, std::abs(p.mean()));
        if (r.phi_values.size() > 1 && r.phi_values.back() > r.phi_values[r.phi_values.size() - 2]) r.phi_nonincreasing = false;
    }
    pde::SolverConfig sc = cfg.solver();
    sc.form = pde::Form::slope;
    const auto ref = pde::evolve(h0, cfg.t_final, sc).final_state;
    r.l2_gap_to_pde = l2_distance(r.iterates.back().values, ref.values, h0.dx());
    if (dir) {
        dir->write_profile("mm", r.iterates.front());
        dir->write_profile("mm", r.iterates.back());
        dir->write_profile("mm_pde", ref);
        dir->write_series("phi.csv", ts, r.phi_values);
    }
    return r;
}

// ---------------------------------------------------------------- gibbs table

struct GibbsRow {
    double beta, lambda;
    std::int64_t m;
    double moment, z;
};

inline std::vector<GibbsRow> gibbs_table(const ExperimentConfig& cfg, io::RunDirectory* dir) {
    std::vector<GibbsRow> rows;
    for (double b : cfg.betas) {
        for (double l : cfg.lambdas) {
            for (auto m : cfg.moments) {
                const gibbs::GibbsTilt t{b, l};
                rows.push_back({b, l, m, gibbs::exp_moment(t, m), gibbs::partition_ratio(b, l / (2.0 * b))});
            }
        }
    }
    if (dir) {
        std::string s = "beta,lambda,m,moment,Z\n";
        for (const auto& r : rows) {
            s += io::format_double(r.beta) + "," + io::format_double(r.lambda) + "," + std::to_string(r.m) + "," +
                 io::format_double(r.moment) + "," + io::format_double(r.z) + "\n";
        }
        dir->write_text("gibbs_table.csv", s);
    }
    return rows;
}

// ---------------------------------------------------------------- dispatch

/// Conventions recorded in the manifest.
inline json conventions(const ExperimentConfig& cfg) {
    json c;
    c["pde_prefactor"] = cfg.prefactor ? "exp(-3 beta/2) included" : "omitted (time unit absorbed)";
    if (cfg.experiment == Experiment::compare || cfg.experiment == Experiment::rates) {
        c["time_mapping"] = cfg.prefactor ? "PDE time equals lattice macro time"
                                          : "PDE evaluated at exp(-3 beta/2) times the lattice macro time";
        c["tilts"] = "fitted to lattice bond slopes N^3 (h((b+1)/N) - h(b/N)) of the PDE profile";
        c["rate_window"] = {cfg.resolved_rate_center() - cfg.resolved_rate_window(),
                            cfg.resolved_rate_center() + cfg.resolved_rate_window()};
    }
    if (cfg.experiment == Experiment::wetting) c["support_threshold"] = cfg.threshold;
    return c;
}

/// Runs the configured experiment and returns its summary.
inline json run_experiment(const ExperimentConfig& cfg, io::RunDirectory* dir, const Log& log = {}) {
    switch (cfg.experiment) {
        case Experiment::pde: return run_pde(cfg, dir).to_json();
        case Experiment::kmc: return run_kmc(cfg, dir, log).to_json();
        case Experiment::mm: return run_mm(cfg, dir).to_json();
        case Experiment::compare: return run_compare(cfg, dir, log).to_json();
        case Experiment::rates: return run_rates(cfg, dir, log).to_json();
        case Experiment::wetting: {
            auto r = run_wetting(cfg, dir);
            if (r.failure) throw pde::SolverFailure(*r.failure, r.snapshots.empty() ? MacroProfile{} : r.snapshots.back());
            return r.to_json();
        }
        case Experiment::selfsim: return run_selfsim(cfg, dir, log).to_json();
        case Experiment::decay: {
            auto j = to_json(run_decay(cfg, dir));
            for (const char* k : {"times", "phi_values", "slope_norms", "l2_norms"}) j.erase(k);
            return j;
        }
        case Experiment::gibbs_table: return {{"rows", gibbs_table(cfg, dir).size()}};
    }
    throw ConfigError("unknown experiment");
}

}  // namespace crystal::harness
