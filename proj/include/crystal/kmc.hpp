#pragma once

// Continuous-time kinetic Monte Carlo for the surface jump process, with
// exact piecewise-constant rate integrals and the N^-3 height / N^4 time
// rescaling to macroscopic profiles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/lattice.hpp"
#include "crystal/rng.hpp"
#include "crystal/sum_tree.hpp"

namespace crystal::kmc {

/// Metropolis rates exp(-beta dH / 2), tabulated over a window of integer dH.
class MetropolisModel {
public:
    explicit MetropolisModel(InverseTemperature beta, Height table_half_width = 4096)
        : rate_(beta), half_(table_half_width) {
        table_.resize(static_cast<std::size_t>(2 * half_ + 1));
        for (Height d = -half_; d <= half_; ++d) {
            const double x = -0.5 * rate_.beta * static_cast<double>(d);
            table_[static_cast<std::size_t>(d + half_)] =
                x > kExponentGuard ? -1.0 : rate_(d);
        }
    }

    double beta() const noexcept { return rate_.beta; }

    double operator()(const MicroState& s, const JumpEvent& e) const {
        const Height d = delta_energy(s, e);
        if (d >= -half_ && d <= half_) {
            const double r = table_[static_cast<std::size_t>(d + half_)];
            if (r >= 0.0) return r;
        }
        return rate_(d);
    }

    /// Right and left hop rates across bond b from one curvature lookup.
    std::pair<double, double> bond_rates(const MicroState& s, std::size_t b) const {
        const auto i = static_cast<std::int64_t>(b);
        const Height c = s.slope(i - 1) - 2 * s.slope(i) + s.slope(i + 1);
        return {lookup(6 - 2 * c), lookup(6 + 2 * c)};
    }

private:
    double lookup(Height d) const {
        if (d >= -half_ && d <= half_) {
            const double r = table_[static_cast<std::size_t>(d + half_)];
            if (r >= 0.0) return r;
        }
        return rate_(d);
    }

    MetropolisRate rate_;
    Height half_;
    std::vector<double> table_;
};

/// heights[j] = round(N^3 h0(j/N)), rounding half away from zero.
template <class Profile>
MicroState init_microstate(Profile&& h0, std::size_t n) {
    if (n < 4) throw ConfigError("microscopic lattice needs N >= 4, got " + std::to_string(n));
    const double scale = std::pow(static_cast<double>(n), 3);
    std::vector<Height> h(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double x = static_cast<double>(j) / static_cast<double>(n);
        h[j] = static_cast<Height>(std::llround(scale * h0(x)));
    }
    return MicroState(std::move(h));
}

struct RescaledProfile {
    std::vector<double> x;
    std::vector<double> values;
    double macro_time = 0.0;
};

/// x_j = j/N, values = N^-3 heights, macro_time = N^-4 clock.
inline RescaledProfile rescale(std::span<const Height> heights, double clock) {
    const std::size_t n = heights.size();
    const double nd = static_cast<double>(n);
    RescaledProfile out;
    out.x.resize(n);
    out.values.resize(n);
    const double inv3 = 1.0 / (nd * nd * nd);
    for (std::size_t j = 0; j < n; ++j) {
        out.x[j] = static_cast<double>(j) / nd;
        out.values[j] = static_cast<double>(heights[j]) * inv3;
    }
    out.macro_time = clock / (nd * nd * nd * nd);
    return out;
}

inline double micro_time(double macro_time, std::size_t n) {
    const double nd = static_cast<double>(n);
    return macro_time * nd * nd * nd * nd;
}

/// Right and left hop rates for every bond; entry 2b is r^{b,b+1}, entry 2b+1 is r^{b+1,b}.
class RateTable {
public:
    RateTable() = default;

    template <class Model>
    RateTable(const MicroState& s, const Model& model) {
        rebuild(s, model);
    }

    template <class Model>
    void rebuild(const MicroState& s, const Model& model) {
        const std::size_t n = s.size();
        std::vector<double> w(2 * n);
        for (std::size_t b = 0; b < n; ++b) {
            w[2 * b] = model(s, JumpEvent::across(b, Direction::right, n));
            w[2 * b + 1] = model(s, JumpEvent::across(b, Direction::left, n));
        }
        tree_ = SumTree<double>(std::span<const double>(w));
    }

    /// A hop across bond b changes slopes b-1..b+1, so only bonds b-2..b+2 need new rates.
    template <class Model, class OnChange>
    void refresh_around(std::size_t bond, const MicroState& s, const Model& model, OnChange&& on_change) {
        const std::size_t n = s.size();
        const std::size_t span = std::min<std::size_t>(5, n);
        const std::size_t first = wrap_index(static_cast<std::int64_t>(bond) - 2, n);
        for (std::size_t k = 0; k < span; ++k) {
            const std::size_t b = wrap_index(static_cast<std::int64_t>(first + k), n);
            on_change(b);
            if constexpr (requires { model.bond_rates(s, b); }) {
                const auto [r, l] = model.bond_rates(s, b);
                tree_.assign(2 * b, r);
                tree_.assign(2 * b + 1, l);
            } else {
                tree_.assign(2 * b, model(s, JumpEvent::across(b, Direction::right, n)));
                tree_.assign(2 * b + 1, model(s, JumpEvent::across(b, Direction::left, n)));
            }
        }
        const std::size_t last = first + span - 1;
        if (last < n) {
            tree_.repair(2 * first, 2 * last + 1);
        } else {
            tree_.repair(2 * first, 2 * n - 1);
            tree_.repair(0, 2 * (last - n) + 1);
        }
    }

    std::size_t bonds() const noexcept { return tree_.size() / 2; }
    double total() const noexcept { return tree_.total(); }
    double right(std::size_t b) const { return tree_.weight(2 * b); }
    double left(std::size_t b) const { return tree_.weight(2 * b + 1); }
    double entry(std::size_t k) const { return tree_.weight(k); }

    /// Entry index drawn with probability rate/total from u in [0, 1).
    std::size_t select(double u) const { return tree_.find(u * tree_.total()); }

    JumpEvent event(std::size_t entry) const {
        return JumpEvent::across(entry / 2, entry % 2 == 0 ? Direction::right : Direction::left, bonds());
    }

    /// Sum of the entries, added up from scratch.
    double recomputed_total() const { return tree_.prefix(tree_.size()); }

private:
    SumTree<double> tree_;
};

struct RunSchedule {
    std::vector<double> snapshot_times;    // microscopic
    std::vector<double> checkpoint_times;  // microscopic; rate integrals recorded here
    std::vector<std::size_t> tracked_bonds;  // full rate history kept for these bonds
    std::uint64_t max_events = 4'000'000'000ULL;
    std::uint64_t rebuild_interval = 1'000'000ULL;
};

struct Snapshot {
    double time = 0.0;
    std::vector<Height> heights;
};

/// Rate integrals from time 0 up to `time`, per bond.
struct RateCheckpoint {
    double time = 0.0;
    std::vector<double> right;
    std::vector<double> left;
};

/// Piecewise-constant rates: value k holds on [times[k], times[k+1]).
struct RateHistory {
    std::vector<double> times;
    std::vector<double> right;
    std::vector<double> left;
};

struct Trajectory {
    MicroState initial;
    MicroState final_state;
    std::uint64_t events = 0;
    double start_clock = 0.0;
    double clock = 0.0;
    std::vector<Snapshot> snapshots;
    std::vector<double> right_integral;
    std::vector<double> left_integral;
    std::vector<RateCheckpoint> checkpoints;
    std::map<std::size_t, RateHistory> histories;
};

struct StepResult {
    JumpEvent event;
    double waiting_time = 0.0;
};

template <class Model = MetropolisModel>
class Engine {
public:
    Engine(MicroState state, Model model, std::uint64_t seed, std::uint64_t replica = 0)
        : state_(std::move(state)), model_(std::move(model)), rng_(seed, replica) {
        table_.rebuild(state_, model_);
        const std::size_t n = state_.size();
        acc_right_.assign(n, 0.0);
        acc_left_.assign(n, 0.0);
        last_touch_.assign(n, 0.0);
    }

    const MicroState& state() const noexcept { return state_; }
    const RateTable& table() const noexcept { return table_; }
    const Model& model() const noexcept { return model_; }
    double clock() const noexcept { return clock_; }
    std::uint64_t events() const noexcept { return events_; }

    /// Draws a holding time and an event, applies it and advances the clock.
    StepResult step() {
        const double dt = draw_waiting_time();
        clock_ += dt;
        const JumpEvent e = draw_event();
        apply(e);
        return {e, dt};
    }

    double draw_waiting_time() {
        const double total = table_.total();
        if (!(total > 0.0)) throw NumericalError("total jump rate is zero; the process is frozen");
        return rng_.exponential(total);
    }

    JumpEvent draw_event() { return table_.event(table_.select(rng_.uniform())); }

    /// Largest relative entrywise gap between the incremental table and a fresh rebuild.
    double table_drift() const {
        RateTable fresh(state_, model_);
        double worst = 0.0;
        for (std::size_t k = 0; k < 2 * state_.size(); ++k) {
            const double a = table_.entry(k), b = fresh.entry(k);
            const double scale = std::max(std::abs(b), 1e-300);
            worst = std::max(worst, std::abs(a - b) / scale);
        }
        return worst;
    }

    /// Simulates up to microscopic time t_end. The holding interval that
    /// straddles t_end is cut there and its event is not applied.
    Trajectory run_until(double t_end, const RunSchedule& schedule = {}) {
        if (!(t_end >= 0.0)) throw ConfigError("t_end must be nonnegative");
        const std::size_t n = state_.size();
        Trajectory traj;
        traj.initial = state_;
        traj.start_clock = clock_;
        for (std::size_t b : schedule.tracked_bonds) {
            if (b >= n) throw ConfigError("tracked bond out of range");
            auto& h = traj.histories[b];
            h.times.push_back(clock_);
            h.right.push_back(table_.right(b));
            h.left.push_back(table_.left(b));
        }
        std::vector<double> snaps = sorted(schedule.snapshot_times);
        std::vector<double> checks = sorted(schedule.checkpoint_times);
        std::size_t next_snap = 0, next_check = 0;
        while (next_snap < snaps.size() && snaps[next_snap] < clock_) ++next_snap;
        while (next_check < checks.size() && checks[next_check] < clock_) ++next_check;
        const std::uint64_t start_events = events_;

        while (true) {
            const double t_next = clock_ + draw_waiting_time();
            for (; next_snap < snaps.size() && snaps[next_snap] < t_next && snaps[next_snap] <= t_end; ++next_snap) {
                traj.snapshots.push_back({snaps[next_snap], std::vector<Height>(state_.heights().begin(), state_.heights().end())});
            }
            for (; next_check < checks.size() && checks[next_check] < t_next && checks[next_check] <= t_end; ++next_check) {
                traj.checkpoints.push_back(checkpoint(checks[next_check]));
            }
            if (t_next > t_end) {
                clock_ = std::max(clock_, t_end);
                break;
            }
            clock_ = t_next;
            const JumpEvent e = draw_event();
            const std::size_t b = e.bond(n);
            apply(e);
            for (std::size_t k = 0; k < 5 && k < n && !traj.histories.empty(); ++k) {
                const std::size_t bb = wrap_index(static_cast<std::int64_t>(b) - 2 + static_cast<std::int64_t>(k), n);
                auto it = traj.histories.find(bb);
                if (it == traj.histories.end()) continue;
                it->second.times.push_back(clock_);
                it->second.right.push_back(table_.right(bb));
                it->second.left.push_back(table_.left(bb));
            }
            if (schedule.rebuild_interval > 0 && events_ % schedule.rebuild_interval == 0) {
                table_.rebuild(state_, model_);
            }
            if (events_ - start_events >= schedule.max_events) {
                std::ostringstream msg;
                msg << "event cap of " << schedule.max_events << " reached at clock " << clock_
                    << " before t_end " << t_end << " (total rate " << table_.total() << ")";
                throw RunawaySimulationError(msg.str());
            }
        }
        const RateCheckpoint fin = checkpoint(clock_);
        traj.right_integral = fin.right;
        traj.left_integral = fin.left;
        traj.final_state = state_;
        traj.events = events_ - start_events;
        traj.clock = clock_;
        return traj;
    }

    /// Rate integrals from construction up to time t >= every event so far.
    RateCheckpoint checkpoint(double t) {
        const std::size_t n = state_.size();
        for (std::size_t b = 0; b < n; ++b) settle(b, t);
        return {t, acc_right_, acc_left_};
    }

private:
    static std::vector<double> sorted(std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v;
    }

    void settle(std::size_t b, double t) {
        const double dt = t - last_touch_[b];
        acc_right_[b] += table_.right(b) * dt;
        acc_left_[b] += table_.left(b) * dt;
        last_touch_[b] = t;
    }

    void apply(const JumpEvent& e) {
        state_.apply(e);
        table_.refresh_around(e.bond(state_.size()), state_, model_,
                              [this](std::size_t b) { settle(b, clock_); });
        ++events_;
    }

    MicroState state_;
    Model model_;
    ReplicaRng rng_;
    RateTable table_;
    double clock_ = 0.0;
    std::uint64_t events_ = 0;
    std::vector<double> acc_right_;
    std::vector<double> acc_left_;
    std::vector<double> last_touch_;
};

/// Time average (1/(2 N^4 delta)) * integral of the bond-b hop rate over
/// the microscopic window [N^4 (T - delta), N^4 (T + delta)].
inline double time_averaged_rate(const Trajectory& traj, std::size_t bond, double t_center, double delta,
                                 Direction dir = Direction::right) {
    const std::size_t n = traj.initial.size();
    if (bond >= n) throw ConfigError("bond index out of range");
    if (!(delta > 0.0)) throw ConfigError("averaging half-width must be positive");
    const double a = micro_time(t_center - delta, n);
    const double b = micro_time(t_center + delta, n);
    if (a < traj.start_clock || b > traj.clock * (1.0 + 1e-12)) {
        throw ConfigError("averaging window lies outside the simulated time interval");
    }
    const double width = b - a;

    if (auto it = traj.histories.find(bond); it != traj.histories.end()) {
        const RateHistory& h = it->second;
        const auto& vals = dir == Direction::right ? h.right : h.left;
        double integral = 0.0;
        for (std::size_t k = 0; k < h.times.size(); ++k) {
            const double lo = std::max(a, h.times[k]);
            const double hi = std::min(b, k + 1 < h.times.size() ? h.times[k + 1] : traj.clock);
            if (hi > lo) integral += vals[k] * (hi - lo);
        }
        return integral / width;
    }

    auto at = [&](double t) -> double {
        const auto close = [t](double s) { return std::abs(s - t) <= 1e-12 * std::max(1.0, std::abs(t)); };
        if (close(traj.clock) && bond < traj.right_integral.size()) {
            return (dir == Direction::right ? traj.right_integral : traj.left_integral)[bond];
        }
        if (close(traj.start_clock) && traj.checkpoints.empty()) return 0.0;
        for (const auto& c : traj.checkpoints) {
            if (close(c.time)) return (dir == Direction::right ? c.right : c.left)[bond];
        }
        throw ConfigError("no rate history or checkpoint covers the averaging window for bond " +
                          std::to_string(bond));
    };
    return (at(b) - at(a)) / width;
}

/// Runs `replicas` independent copies from the same initial state. Replica k
/// uses stream (seed, k), so the result does not depend on `threads`.
template <class Model>
std::vector<Trajectory> run_replicas(const MicroState& initial, const Model& model, double t_end,
                                     const RunSchedule& schedule, std::uint64_t seed, std::size_t replicas,
                                     unsigned threads = 0) {
    std::vector<Trajectory> out(replicas);
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(replicas, 1)));
    std::vector<std::exception_ptr> errors(threads);
    auto work = [&](unsigned w) {
        try {
            for (std::size_t k = w; k < replicas; k += threads) {
                Engine<Model> engine(initial, model, seed, k);
                out[k] = engine.run_until(t_end, schedule);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

}  // namespace crystal::kmc
