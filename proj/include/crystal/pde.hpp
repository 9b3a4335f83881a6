#pragma once

// Method-of-lines solver for the exponential surface PDE on a periodic grid.
//
//   height form:  h_t = d_x ( exp(-beta h_xxx) - exp(beta h_xxx) )
//   slope form:   h_t = -d_xx sinh(beta h_xx)
//
// Both are discretised in conservative form, so the grid sum of the right
// hand side telescopes to zero. Time stepping is the two-stage, stiffly
// accurate, L-stable SDIRK method of order 2 with a first-order embedded
// estimate, full Newton on the cyclic pentadiagonal Jacobian per stage.

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/grid.hpp"

namespace crystal::pde {

enum class Form { height, slope };

inline const char* to_string(Form f) { return f == Form::height ? "height" : "slope"; }

/// |beta D^k h| beyond the exponent guard somewhere on the grid.
class StiffnessOverflowError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// The integrator gave up; the last accepted state is attached.
class SolverFailure : public NumericalError {
public:
    SolverFailure(const std::string& what, MacroProfile last) : NumericalError(what), last_state(std::move(last)) {}
    MacroProfile last_state;
};

struct SolverConfig {
    double beta = 1.0;
    double abs_tol = 1e-10;
    double rel_tol = 1e-8;
    double dt_init = 0.0;  // 0 picks a starting step from the initial slope
    double dt_max = std::numeric_limits<double>::infinity();
    double newton_tol = 1e-3;  // in units of the error weights
    int newton_max_iter = 12;
    Form form = Form::height;
    /// Multiply the right hand side by exp(-3 beta / 2).
    bool gibbs_prefactor = false;
    std::size_t max_steps = 5'000'000;
    /// Grids larger than this solve the Newton systems iteratively.
    std::size_t direct_solver_limit = 2048;

    void validate() const {
        if (!(beta > 0.0)) throw ConfigError("solver beta must be positive");
        if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) throw ConfigError("solver tolerances must be positive");
        if (!(newton_tol > 0.0) || newton_max_iter < 1) throw ConfigError("invalid Newton controls");
        if (dt_init < 0.0 || !(dt_max > 0.0)) throw ConfigError("invalid step bounds");
    }

    double prefactor() const { return gibbs_prefactor ? std::exp(-1.5 * beta) : 1.0; }
};

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Right hand side, Jacobian and Lyapunov functional of one spatial discretisation.
class Operator {
public:
    Operator(Form form, double beta, double prefactor, std::size_t n, double length)
        : form_(form), beta_(beta), scale_(prefactor), n_(n), dx_(length / static_cast<double>(n)) {
        require_grid(n, 5);
    }

    static Operator from(const SolverConfig& cfg, const MacroProfile& p) {
        return Operator(cfg.form, cfg.beta, cfg.prefactor(), p.size(), p.length);
    }

    Form form() const noexcept { return form_; }
    std::size_t size() const noexcept { return n_; }
    double dx() const noexcept { return dx_; }

    /// Inner derivative D h: half-point third difference (height) or nodal second difference (slope).
    std::vector<double> inner_derivative(std::span<const double> h) const {
        return form_ == Form::height ? third_difference_half(h, dx_) : second_difference(h, dx_);
    }

    void rhs(std::span<const double> h, std::vector<double>& f) const {
        const auto d = inner_derivative(h);
        std::vector<double> s(n_);
        for (std::size_t j = 0; j < n_; ++j) s[j] = guarded_sinh(beta_ * d[j]);
        f.resize(n_);
        if (form_ == Form::height) {
            // F_{j+1/2} = -2 sinh(beta D3 h_{j+1/2}); h_t = (F_{j+1/2} - F_{j-1/2}) / dx
            const double c = -2.0 * scale_ / dx_;
            for (std::size_t j = 0; j < n_; ++j) f[j] = c * (s[j] - s[(j + n_ - 1) % n_]);
        } else {
            const double c = -scale_ / (dx_ * dx_);
            for (std::size_t j = 0; j < n_; ++j) f[j] = c * (s[(j + 1) % n_] - 2.0 * s[j] + s[(j + n_ - 1) % n_]);
        }
    }

    std::vector<double> rhs(std::span<const double> h) const {
        std::vector<double> f;
        rhs(h, f);
        return f;
    }

    /// Analytic Jacobian of rhs; five nonzeros per row, wrapping at the corners.
    SparseMatrix jacobian(std::span<const double> h) const {
        const auto d = inner_derivative(h);
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(5 * n_ * 3);
        const auto idx = [this](std::ptrdiff_t j) {
            const auto n = static_cast<std::ptrdiff_t>(n_);
            return static_cast<int>(((j % n) + n) % n);
        };
        if (form_ == Form::height) {
            // dF_{k+1/2}/dh_m = -2 beta cosh(beta D3_{k+1/2}) * c_m / dx^3 for m = k-1..k+2
            const double stencil[4] = {-1.0, 3.0, -3.0, 1.0};
            const double inv3 = 1.0 / (dx_ * dx_ * dx_);
            for (std::size_t k = 0; k < n_; ++k) {
                const double g = -2.0 * scale_ * beta_ * std::cosh(beta_ * d[k]) * inv3 / dx_;
                const auto kk = static_cast<std::ptrdiff_t>(k);
                for (int m = 0; m < 4; ++m) {
                    const int col = idx(kk - 1 + m);
                    trip.emplace_back(idx(kk), col, g * stencil[m]);       // row k gets +F_{k+1/2}
                    trip.emplace_back(idx(kk + 1), col, -g * stencil[m]);  // row k+1 gets -F_{k+1/2}
                }
            }
        } else {
            // f = -D2 diag(beta cosh(beta D2 h)) D2
            const double inv2 = 1.0 / (dx_ * dx_);
            for (std::size_t k = 0; k < n_; ++k) {
                const double g = -scale_ * beta_ * std::cosh(beta_ * d[k]) * inv2 * inv2;
                const auto kk = static_cast<std::ptrdiff_t>(k);
                const double outer[3] = {1.0, -2.0, 1.0};
                for (int r = -1; r <= 1; ++r) {
                    for (int m = -1; m <= 1; ++m) {
                        trip.emplace_back(idx(kk + r), idx(kk + m), g * outer[r + 1] * outer[m + 1]);
                    }
                }
            }
        }
        SparseMatrix jac(static_cast<int>(n_), static_cast<int>(n_));
        jac.setFromTriplets(trip.begin(), trip.end());
        return jac;
    }

    /// Lyapunov functional dx * sum cosh(beta D h) / beta; at beta = 1 in slope form this is
    /// the midpoint rule for integral cosh(h_xx).
    double energy(std::span<const double> h) const {
        const auto d = inner_derivative(h);
        double s = 0.0;
        for (double v : d) s += guarded_cosh(beta_ * v);
        return s * dx_ / beta_;
    }

    /// L2 gradient of energy(): D^T sinh(beta D h).
    std::vector<double> energy_gradient(std::span<const double> h) const {
        const auto d = inner_derivative(h);
        std::vector<double> s(n_), g(n_);
        for (std::size_t j = 0; j < n_; ++j) s[j] = guarded_sinh(beta_ * d[j]);
        if (form_ == Form::height) {
            // D3^T = D2 (delta^+)^T; (delta^+)^T s at j = (s_{j-1} - s_j) / dx
            std::vector<double> t(n_);
            for (std::size_t j = 0; j < n_; ++j) t[j] = (s[(j + n_ - 1) % n_] - s[j]) / dx_;
            g = second_difference(t, dx_);
        } else {
            g = second_difference(s, dx_);
        }
        return g;
    }

    /// -d(energy)/dt along the semi-discrete flow.
    double dissipation(std::span<const double> h) const {
        return -inner(energy_gradient(h), rhs(h), dx_);
    }

private:
    static double guarded_sinh(double x) {
        if (!(std::abs(x) <= kExponentGuard)) {
            throw StiffnessOverflowError("sinh argument " + std::to_string(x) + " exceeds the overflow guard");
        }
        return std::sinh(x);
    }
    static double guarded_cosh(double x) {
        if (!(std::abs(x) <= kExponentGuard)) {
            throw StiffnessOverflowError("cosh argument " + std::to_string(x) + " exceeds the overflow guard");
        }
        return std::cosh(x);
    }

    Form form_;
    double beta_;
    double scale_;
    std::size_t n_;
    double dx_;
};

/// Time derivative of the height form: (F_{j+1/2} - F_{j-1/2}) / dx with F = -2 sinh(beta D3 h).
inline std::vector<double> rhs_height(const MacroProfile& p, double beta, double prefactor = 1.0) {
    return Operator(Form::height, beta, prefactor, p.size(), p.length).rhs(p.values);
}

/// Time derivative of the slope form: -D2 sinh(beta D2 h).
inline std::vector<double> rhs_slope(const MacroProfile& p, double beta = 1.0) {
    return Operator(Form::slope, beta, 1.0, p.size(), p.length).rhs(p.values);
}

/// phi(h) = integral cosh(h_xx), midpoint rule on the nodal second difference.
inline double energy(const MacroProfile& p, Form form = Form::slope, double beta = 1.0) {
    return Operator(form, beta, 1.0, p.size(), p.length).energy(p.values);
}

inline double dissipation(const MacroProfile& p, Form form = Form::slope, double beta = 1.0) {
    return Operator(form, beta, 1.0, p.size(), p.length).dissipation(p.values);
}

/// Factorises I - c J and solves against it.
class NewtonSystem {
public:
    explicit NewtonSystem(std::size_t n, std::size_t direct_limit) : iterative_(n > direct_limit) {}

    bool factorize(const SparseMatrix& jac, double c) {
        SparseMatrix id(jac.rows(), jac.cols());
        id.setIdentity();
        m_ = id - c * jac;
        m_.makeCompressed();
        if (iterative_) {
            it_.preconditioner().setDroptol(1e-12);
            it_.setTolerance(1e-14);
            it_.compute(m_);
            return it_.info() == Eigen::Success;
        }
        if (!analyzed_) {
            lu_.analyzePattern(m_);
            analyzed_ = true;
        }
        lu_.factorize(m_);
        return lu_.info() == Eigen::Success;
    }

    bool solve(const Eigen::VectorXd& rhs, Eigen::VectorXd& x) {
        if (iterative_) {
            x = it_.solve(rhs);
            return it_.info() == Eigen::Success;
        }
        x = lu_.solve(rhs);
        return lu_.info() == Eigen::Success && x.allFinite();
    }

private:
    bool iterative_;
    bool analyzed_ = false;
    SparseMatrix m_;
    Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu_;
    Eigen::BiCGSTAB<SparseMatrix, Eigen::IncompleteLUT<double>> it_;
};

struct EvolveOptions {
    /// Output times; the integrator lands on each exactly.
    std::vector<double> snapshot_times;
    /// Called with every accepted state, starting with the initial one.
    std::function<void(const MacroProfile&)> observer;
};

struct EvolveStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t newton_failures = 0;
    double smallest_step = std::numeric_limits<double>::infinity();
    double largest_step = 0.0;
};

struct EvolveResult {
    MacroProfile final_state;
    std::vector<MacroProfile> snapshots;
    EvolveStats stats;
};

namespace detail {

struct Weights {
    std::vector<double> w;
    Weights(std::span<const double> a, std::span<const double> b, const SolverConfig& cfg) : w(a.size()) {
        for (std::size_t j = 0; j < a.size(); ++j) {
            w[j] = cfg.abs_tol + cfg.rel_tol * std::max(std::abs(a[j]), std::abs(b[j]));
        }
    }
    template <class V>
    double norm(const V& v) const {
        double s = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double r = v[j] / w[j];
            s += r * r;
        }
        return std::sqrt(s / static_cast<double>(w.size()));
    }
};

}  // namespace detail

/// Adaptive stiff integration of the profile to t_end.
class Integrator {
public:
    static constexpr double gamma = 1.0 - 0.70710678118654752440;  // 1 - 1/sqrt(2)

    Integrator(const SolverConfig& cfg, std::size_t n, double length)
        : cfg_(cfg), op_(cfg.form, cfg.beta, cfg.prefactor(), n, length), sys_(n, cfg.direct_solver_limit) {
        cfg_.validate();
    }

    const Operator& op() const noexcept { return op_; }

    EvolveResult evolve(const MacroProfile& start, double t_end, const EvolveOptions& opts = {}) {
        if (!(t_end >= start.time)) throw ConfigError("t_end precedes the profile time");
        EvolveResult res;
        MacroProfile cur = start;
        if (opts.observer) opts.observer(cur);
        std::vector<double> outs = opts.snapshot_times;
        std::sort(outs.begin(), outs.end());
        std::size_t next_out = 0;
        auto emit_due = [&](double t) {
            for (; next_out < outs.size() && outs[next_out] <= t * (1.0 + 4e-16) + 1e-300; ++next_out) {
                if (outs[next_out] >= start.time) {
                    MacroProfile snap = cur;
                    snap.time = outs[next_out];
                    res.snapshots.push_back(std::move(snap));
                }
            }
        };
        emit_due(cur.time);
        if (t_end == start.time) {
            res.final_state = cur;
            return res;
        }

        const std::size_t n = op_.size();
        std::vector<double> f0;
        double h = cfg_.dt_init;
        if (h <= 0.0) {
            try {
                op_.rhs(cur.values, f0);
            } catch (const NumericalError& e) {
                throw SolverFailure(std::string("initial state is outside the overflow guard: ") + e.what(), cur);
            }
            detail::Weights w(cur.values, cur.values, cfg_);
            const double d0 = w.norm(cur.values), d1 = w.norm(f0);
            h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 * (t_end - start.time) : 0.01 * d0 / d1;
        }
        h = std::min({h, cfg_.dt_max, t_end - cur.time});
        bool last_rejected = false;

        std::vector<double> y1, y2, k1(n), k2(n);
        while (cur.time < t_end) {
            if (res.stats.accepted + res.stats.rejected >= cfg_.max_steps) {
                throw SolverFailure("step budget exhausted at t=" + std::to_string(cur.time), cur);
            }
            const double t = cur.time;
            double next_stop = t_end;
            if (next_out < outs.size() && outs[next_out] > t && outs[next_out] < next_stop) next_stop = outs[next_out];
            const double min_step = std::max(16.0 * std::numeric_limits<double>::epsilon() * std::abs(t), 1e-300);
            if (next_stop - t <= min_step) {
                // a stop point within rounding of the current time counts as reached
                cur.time = next_stop;
                emit_due(cur.time);
                continue;
            }
            bool lands = false;
            if (t + h >= next_stop || t + 1.01 * h >= next_stop) {
                h = next_stop - t;
                lands = true;
            }
            if (h < min_step) {
                throw SolverFailure("step size underflow (dt=" + std::to_string(h) + ") at t=" + std::to_string(t), cur);
            }

            double err = INFINITY;
            const bool ok = attempt(cur.values, h, y1, y2, k1, k2, err);
            if (!ok) {
                ++res.stats.newton_failures;
                ++res.stats.rejected;
                h *= 0.25;
                last_rejected = true;
                continue;
            }
            if (err > 1.0) {
                ++res.stats.rejected;
                h *= std::max(0.1, 0.9 / std::sqrt(err));
                last_rejected = true;
                continue;
            }
            cur.values = y2;
            cur.time = lands ? next_stop : t + h;
            ++res.stats.accepted;
            res.stats.smallest_step = std::min(res.stats.smallest_step, h);
            res.stats.largest_step = std::max(res.stats.largest_step, h);
            if (opts.observer) opts.observer(cur);
            emit_due(cur.time);
            double grow = err > 0.0 ? 0.9 / std::sqrt(err) : 5.0;
            grow = std::clamp(grow, 0.2, last_rejected ? 1.0 : 5.0);
            last_rejected = false;
            h = std::min(h * grow, cfg_.dt_max);
        }
        res.final_state = cur;
        return res;
    }

private:
    /// Solves y = c + h gamma f(y) by Newton from `guess`.
    bool newton(std::span<const double> c, double hg, std::vector<double>& y, const detail::Weights& w) {
        const std::size_t n = op_.size();
        Eigen::VectorXd g(static_cast<Eigen::Index>(n)), delta;
        std::vector<double> f;
        double prev = INFINITY;
        for (int it = 0; it < cfg_.newton_max_iter; ++it) {
            try {
                op_.rhs(y, f);
                if (!sys_.factorize(op_.jacobian(y), hg)) return false;
            } catch (const NumericalError&) {
                return false;
            }
            for (std::size_t j = 0; j < n; ++j) g[static_cast<Eigen::Index>(j)] = -(y[j] - c[j] - hg * f[j]);
            if (!sys_.solve(g, delta)) return false;
            for (std::size_t j = 0; j < n; ++j) y[j] += delta[static_cast<Eigen::Index>(j)];
            const double dn = w.norm(delta);
            if (!std::isfinite(dn)) return false;
            if (dn <= cfg_.newton_tol) return true;
            if (it >= 2 && dn > prev) return false;
            prev = dn;
        }
        return false;
    }

    bool attempt(std::span<const double> y0, double h, std::vector<double>& y1, std::vector<double>& y2,
                 std::vector<double>& k1, std::vector<double>& k2, double& err) {
        const std::size_t n = op_.size();
        const double hg = h * gamma;
        detail::Weights w0(y0, y0, cfg_);

        y1.assign(y0.begin(), y0.end());
        if (!newton(y0, hg, y1, w0)) return false;
        for (std::size_t j = 0; j < n; ++j) k1[j] = (y1[j] - y0[j]) / hg;

        std::vector<double> c2(n);
        for (std::size_t j = 0; j < n; ++j) c2[j] = y0[j] + h * (1.0 - gamma) * k1[j];
        y2.resize(n);
        for (std::size_t j = 0; j < n; ++j) y2[j] = y0[j] + h * k1[j];
        if (!newton(c2, hg, y2, w0)) return false;
        for (std::size_t j = 0; j < n; ++j) k2[j] = (y2[j] - c2[j]) / hg;

        // Embedded first-order solution y0 + h k1; difference h gamma (k2 - k1),
        // filtered through (I - h gamma J)^{-1} to keep it bounded on stiff modes.
        Eigen::VectorXd e(static_cast<Eigen::Index>(n)), ef;
        for (std::size_t j = 0; j < n; ++j) e[static_cast<Eigen::Index>(j)] = hg * (k2[j] - k1[j]);
        if (!sys_.solve(e, ef)) return false;
        detail::Weights w(y0, y2, cfg_);
        err = w.norm(ef);
        return std::isfinite(err);
    }

    SolverConfig cfg_;
    Operator op_;
    NewtonSystem sys_;
};

/// Integrates `profile` from profile.time to t_end.
inline EvolveResult evolve(const MacroProfile& profile, double t_end, const SolverConfig& cfg,
                           const EvolveOptions& opts = {}) {
    Integrator integ(cfg, profile.size(), profile.length);
    return integ.evolve(profile, t_end, opts);
}

}  // namespace crystal::pde
