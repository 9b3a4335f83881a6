#pragma once

// Discrete gradient-flow machinery for phi(v) = dx sum cosh(D2 v) on
// mean-zero periodic grid functions: proximal (backward Euler) steps,
// minimizing movements, EVI residuals and exponential decay diagnostics.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/grid.hpp"
#include "crystal/pde.hpp"

namespace crystal::flow {

/// (2 pi / L)^4, the continuum convexity constant.
inline double poincare_constant(double length = 1.0) {
    const double k = 2.0 * std::numbers::pi / length;
    return k * k * k * k;
}

/// Smallest nonzero eigenvalue of D2^2 on n periodic points, (4/dx^2 sin^2(pi/n))^2.
inline double discrete_poincare_constant(std::size_t n, double length = 1.0) {
    require_grid(n, 3);
    const double dx = length / static_cast<double>(n);
    const double s = std::sin(std::numbers::pi / static_cast<double>(n));
    const double mu = 4.0 * s * s / (dx * dx);
    return mu * mu;
}

/// phi(v) = dx sum cosh(D2 v).
inline double phi(const MacroProfile& v) { return pde::energy(v, pde::Form::slope, 1.0); }

/// L2 gradient D2 sinh(D2 v) of phi.
inline std::vector<double> phi_gradient(const MacroProfile& v) {
    return pde::Operator(pde::Form::slope, 1.0, 1.0, v.size(), v.length).energy_gradient(v.values);
}

/// |d phi|(h) = || D2 sinh(D2 h) ||, the L2 norm of the Frechet differential.
inline double local_slope(const MacroProfile& h) { return l2_norm(pde::rhs_slope(h, 1.0), h.dx()); }

inline void require_mean_zero(const MacroProfile& p, const char* what) {
    double scale = 1.0;
    for (double v : p.values) scale = std::max(scale, std::abs(v));
    if (std::abs(p.mean()) > 1e-9 * scale) {
        throw ConfigError(std::string(what) + " must have zero mean (mean " + std::to_string(p.mean()) + ")");
    }
}

struct ProximalProblem {
    MacroProfile anchor;
    double tau = 1e-5;
    /// Stop when || grad Phi || <= tol * (|| grad phi(anchor) || + || anchor || / tau) or below abs floor.
    double tol = 1e-12;
    int max_iter = 200;
};

struct ProxResult {
    MacroProfile minimizer;
    int iterations = 0;
    double gradient_norm = 0.0;
};

/// Phi(v) = phi(v) + ||v - a||^2 / (2 tau).
inline double proximal_objective(const ProximalProblem& pb, const MacroProfile& v) {
    const double d = l2_distance(v.values, pb.anchor.values, v.dx());
    return phi(v) + d * d / (2.0 * pb.tau);
}

/// Newton with backtracking on the strictly convex Phi; iterates projected to mean zero.
inline ProxResult prox_solve(const ProximalProblem& pb, std::optional<MacroProfile> guess = std::nullopt) {
    if (!(pb.tau > 0.0) || !std::isfinite(pb.tau)) throw ConfigError("proximal step tau must be positive");
    require_mean_zero(pb.anchor, "proximal anchor");
    const std::size_t n = pb.anchor.size();
    require_grid(n, 5);
    const double dx = pb.anchor.dx();
    const double inv_tau = 1.0 / pb.tau;
    const pde::Operator op(pde::Form::slope, 1.0, 1.0, n, pb.anchor.length);

    MacroProfile v = guess ? *guess : pb.anchor;
    v.time = pb.anchor.time + pb.tau;
    project_mean_zero(v.values);

    const double ref = l2_norm(op.energy_gradient(pb.anchor.values), dx) + l2_norm(pb.anchor.values, dx) * inv_tau;
    const double target = std::max(pb.tol * ref, 1e-300);

    auto gradient = [&](const MacroProfile& u) {
        auto g = op.energy_gradient(u.values);
        for (std::size_t j = 0; j < n; ++j) g[j] += (u.values[j] - pb.anchor.values[j]) * inv_tau;
        return g;
    };

    const auto idx = [n](std::ptrdiff_t j) {
        const auto nn = static_cast<std::ptrdiff_t>(n);
        return static_cast<int>(((j % nn) + nn) % nn);
    };
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    bool analyzed = false;
    double prev_obj = proximal_objective(pb, v);
    int it = 0;
    for (; it < pb.max_iter; ++it) {
        auto g = gradient(v);
        const double gn = l2_norm(g, dx);
        if (gn <= target) return {v, it, gn};

        // Hessian D2 diag(cosh(D2 v)) D2 + I / tau
        const auto d2 = second_difference(v.values, dx);
        const double inv4 = 1.0 / (dx * dx * dx * dx);
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(10 * n);
        const double outer[3] = {1.0, -2.0, 1.0};
        for (std::size_t k = 0; k < n; ++k) {
            const double c = std::cosh(d2[k]) * inv4;
            const auto kk = static_cast<std::ptrdiff_t>(k);
            for (int r = -1; r <= 1; ++r)
                for (int m = -1; m <= 1; ++m) trip.emplace_back(idx(kk + r), idx(kk + m), c * outer[r + 1] * outer[m + 1]);
            trip.emplace_back(static_cast<int>(k), static_cast<int>(k), inv_tau);
        }
        Eigen::SparseMatrix<double> hess(static_cast<int>(n), static_cast<int>(n));
        hess.setFromTriplets(trip.begin(), trip.end());
        if (!analyzed) {
            ldlt.analyzePattern(hess);
            analyzed = true;
        }
        ldlt.factorize(hess);
        if (ldlt.info() != Eigen::Success) throw ConvergenceError("proximal Hessian factorisation failed");
        Eigen::Map<const Eigen::VectorXd> gv(g.data(), static_cast<Eigen::Index>(n));
        Eigen::VectorXd step = -ldlt.solve(gv);
        const double slope0 = gv.dot(step) * dx;

        double alpha = 1.0;
        MacroProfile trial = v;
        bool accepted = false;
        const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(prev_obj);
        for (int ls = 0; ls < 60 && !accepted; ++ls) {
            for (std::size_t j = 0; j < n; ++j) trial.values[j] = v.values[j] + alpha * step[static_cast<Eigen::Index>(j)];
            project_mean_zero(trial.values);
            try {
                const double obj = proximal_objective(pb, trial);
                if (obj <= prev_obj + 1e-4 * alpha * slope0) {
                    accepted = true;
                } else if (obj <= prev_obj + noise && l2_norm(gradient(trial), dx) < gn) {
                    // decrease below the resolution of Phi; the gradient still certifies progress
                    accepted = true;
                }
                if (accepted) prev_obj = obj;
            } catch (const NumericalError&) {
            }
            if (!accepted) alpha *= 0.5;
        }
        if (!accepted) {
            if (gn <= 1e3 * target) return {v, it, gn};
            throw ConvergenceError("proximal line search stalled at gradient norm " + std::to_string(gn));
        }
        v.values = trial.values;
    }
    const double gn = l2_norm(gradient(v), dx);
    if (gn <= target) return {v, it, gn};
    throw ConvergenceError("proximal Newton did not converge in " + std::to_string(pb.max_iter) +
                           " iterations (gradient norm " + std::to_string(gn) + ")");
}

/// argmin_v phi(v) + ||v - anchor||^2 / (2 tau) over mean-zero grid functions.
inline MacroProfile prox_step(const ProximalProblem& pb) { return prox_solve(pb).minimizer; }

/// n_steps proximal steps of size t_end / n_steps; returns every iterate including h0.
inline std::vector<MacroProfile> minimizing_movement(const MacroProfile& h0, double t_end, std::size_t n_steps,
                                                     double tol = 1e-12) {
    if (n_steps == 0) throw ConfigError("minimizing movement needs at least one step");
    if (!(t_end > 0.0)) throw ConfigError("minimizing movement horizon must be positive");
    std::vector<MacroProfile> out;
    out.reserve(n_steps + 1);
    out.push_back(h0);
    const double tau = t_end / static_cast<double>(n_steps);
    for (std::size_t k = 0; k < n_steps; ++k) {
        ProximalProblem pb{out.back(), tau, tol};
        MacroProfile next = prox_step(pb);
        next.time = h0.time + tau * static_cast<double>(k + 1);
        out.push_back(std::move(next));
    }
    return out;
}

/// d/dt of a sampled series at interior index k, second-order on nonuniform times.
inline double time_derivative(std::span<const double> t, std::span<const double> y, std::size_t k) {
    const double h1 = t[k] - t[k - 1], h2 = t[k + 1] - t[k];
    return (-h2 / (h1 * (h1 + h2))) * y[k - 1] + ((h2 - h1) / (h1 * h2)) * y[k] + (h1 / (h2 * (h1 + h2))) * y[k + 1];
}

struct EviPoint {
    double time = 0.0;
    /// 1/2 d/dt ||h - v||^2 + lambda/2 ||h - v||^2 - (phi(v) - phi(h))
    double residual = 0.0;
    /// Largest magnitude among the three terms, for relative tolerances.
    double scale = 0.0;
};

/// EVI residual at each interior time of a trajectory.
inline std::vector<EviPoint> evi_residual(std::span<const MacroProfile> traj, const MacroProfile& v,
                                          std::optional<double> lambda = std::nullopt) {
    if (traj.size() < 3) throw ConfigError("EVI residual needs at least three trajectory points");
    require_mean_zero(v, "EVI test profile");
    const double lam = lambda ? *lambda : poincare_constant(v.length);
    const double dx = v.dx();
    const double phi_v = phi(v);
    std::vector<double> t(traj.size()), d2(traj.size());
    for (std::size_t k = 0; k < traj.size(); ++k) {
        t[k] = traj[k].time;
        const double d = l2_distance(traj[k].values, v.values, dx);
        d2[k] = d * d;
    }
    std::vector<EviPoint> out;
    for (std::size_t k = 1; k + 1 < traj.size(); ++k) {
        const double a = 0.5 * time_derivative(t, d2, k);
        const double b = 0.5 * lam * d2[k];
        const double c = phi_v - phi(traj[k]);
        out.push_back({t[k], a + b - c, std::max({std::abs(a), std::abs(b), std::abs(c)})});
    }
    return out;
}

struct RateFit {
    /// Decay rate r in y ~ C exp(-r t).
    double rate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t points = 0;
    double t_begin = 0.0;
    double t_end = 0.0;
};

namespace detail {

/// Two-sided 97.5% Student t quantile (Cornish-Fisher expansion around the normal).
inline double t_quantile_975(double df) {
    const double z = 1.959963984540054;
    const double z3 = z * z * z, z5 = z3 * z * z, z7 = z5 * z * z;
    return z + (z3 + z) / (4.0 * df) + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df) +
           (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * df * df * df);
}

}  // namespace detail

/// Least-squares fit of log y against t over the final `window` fraction of the samples.
/// Nonpositive samples are skipped.
inline RateFit fit_decay_rate(std::span<const double> t, std::span<const double> y, double window = 0.5) {
    if (t.size() != y.size()) throw ConfigError("fit series lengths differ");
    if (t.empty()) throw ConfigError("series too short to fit");
    const double t0 = t.back() - window * (t.back() - t.front());
    std::vector<double> xs, ls;
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (t[k] >= t0 && y[k] > 0.0 && std::isfinite(y[k])) {
            xs.push_back(t[k]);
            ls.push_back(std::log(y[k]));
        }
    }
    const std::size_t m = xs.size();
    if (m < 3) throw ConfigError("series too short to fit (" + std::to_string(m) + " usable points)");
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        mx += xs[k];
        my += ls[k];
    }
    mx /= static_cast<double>(m);
    my /= static_cast<double>(m);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        sxx += (xs[k] - mx) * (xs[k] - mx);
        sxy += (xs[k] - mx) * (ls[k] - my);
    }
    if (!(sxx > 0.0)) throw ConfigError("fit window has no time spread");
    const double slope = sxy / sxx;
    double rss = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        const double r = ls[k] - (my + slope * (xs[k] - mx));
        rss += r * r;
    }
    const double df = static_cast<double>(m - 2);
    const double se = df > 0.0 ? std::sqrt(rss / df / sxx) : 0.0;
    const double half = df > 0.0 ? detail::t_quantile_975(df) * se : 0.0;
    return {-slope, -slope - half, -slope + half, m, xs.front(), xs.back()};
}

struct DecayReport {
    std::vector<double> times;
    std::vector<double> phi_values;
    std::vector<double> slope_norms;
    std::vector<double> l2_norms;
    double lambda = 0.0;           // continuum (2 pi / L)^4
    double lambda_discrete = 0.0;  // grid constant used for the bounds
    RateFit phi_fit;
    RateFit slope_fit;
    RateFit l2_fit;
    /// Fitted rates at least the predicted 2 lambda, lambda, lambda (upper CI, discrete lambda).
    bool phi_rate_ok = false;
    bool slope_rate_ok = false;
    bool l2_rate_ok = false;
    /// Largest relative increase of exp(lambda t) |d phi| between consecutive samples.
    double envelope_max_increase = 0.0;
    /// max_t (phi(t) - L) / ((phi(0) - L) exp(-2 lambda t)); at most 1 when the energy bound holds.
    double energy_bound_ratio = 0.0;
    /// First time after which the fitted phi decay rate is attained, if ever.
    std::optional<double> onset;
};

/// Decay of phi - L, |d phi| and ||h|| along a trajectory approaching zero.
inline DecayReport decay_diagnostics(std::span<const MacroProfile> traj, double window = 0.5) {
    if (traj.size() < 6) throw ConfigError("series too short to fit");
    DecayReport r;
    const double len = traj.front().length;
    r.lambda = poincare_constant(len);
    r.lambda_discrete = discrete_poincare_constant(traj.front().size(), len);
    const double lam = r.lambda_discrete;
    std::vector<double> excess;
    for (const auto& p : traj) {
        r.times.push_back(p.time);
        const double ph = phi(p);
        r.phi_values.push_back(ph);
        excess.push_back(ph - len);
        r.slope_norms.push_back(local_slope(p));
        r.l2_norms.push_back(l2_norm(p.values, p.dx()));
    }
    r.phi_fit = fit_decay_rate(r.times, excess, window);
    r.slope_fit = fit_decay_rate(r.times, r.slope_norms, window);
    r.l2_fit = fit_decay_rate(r.times, r.l2_norms, window);
    const double slack = 1e-3;
    r.phi_rate_ok = r.phi_fit.ci_high >= 2.0 * lam * (1.0 - slack);
    r.slope_rate_ok = r.slope_fit.ci_high >= lam * (1.0 - slack);
    r.l2_rate_ok = r.l2_fit.ci_high >= lam * (1.0 - slack);

    const double t0 = r.times.front();
    for (std::size_t k = 1; k < traj.size(); ++k) {
        const double a = std::exp(lam * (r.times[k - 1] - t0)) * r.slope_norms[k - 1];
        const double b = std::exp(lam * (r.times[k] - t0)) * r.slope_norms[k];
        if (a > 0.0) r.envelope_max_increase = std::max(r.envelope_max_increase, (b - a) / a);
    }
    if (excess.front() > 0.0) {
        for (std::size_t k = 0; k < traj.size(); ++k) {
            const double bound = excess.front() * std::exp(-2.0 * lam * (r.times[k] - t0));
            if (bound > 0.0) r.energy_bound_ratio = std::max(r.energy_bound_ratio, excess[k] / bound);
        }
    }
    // Onset: earliest sample from which the local log-slope of phi - L stays within 10% of the fit.
    for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
        bool ok = true;
        for (std::size_t j = k; j + 1 < traj.size() && ok; ++j) {
            if (!(excess[j] > 0.0 && excess[j + 1] > 0.0)) {
                ok = false;
                break;
            }
            const double local = -std::log(excess[j + 1] / excess[j]) / (r.times[j + 1] - r.times[j]);
            ok = std::abs(local - r.phi_fit.rate) <= 0.1 * std::abs(r.phi_fit.rate);
        }
        if (ok) {
            r.onset = r.times[k];
            break;
        }
    }
    return r;
}

}  // namespace crystal::flow
