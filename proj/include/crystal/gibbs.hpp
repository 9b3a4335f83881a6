#pragma once

// One-site tilted discrete Gaussian p_lambda(n) ~ exp(-beta n^2 + lambda n)
// on the integers: exponential moments, the odd-moment correction factor
// Z(beta, alpha), tilt inversion and the expected hop rates and current
// under the product (local Gibbs) measure.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/grid.hpp"

namespace crystal::gibbs {

struct SeriesControl {
    /// Bound on the discarded tail, relative to the sum.
    double tol = 1e-22;
    std::int64_t max_terms = 10'000'000;
};

struct GibbsTilt {
    double beta = 1.0;
    double lambda = 0.0;
    SeriesControl series{};
};

namespace detail {

inline void check_beta(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw ConfigError("beta must be positive and finite, got " + std::to_string(beta));
    }
}

/// Half-width M such that the Gaussian tail beyond the M terms nearest the
/// centre is below tol relative to the leading term.
inline std::int64_t gaussian_half_width(double beta, const SeriesControl& ctl) {
    auto m = static_cast<std::int64_t>(std::ceil(std::sqrt(50.0 / beta)));
    m = std::max<std::int64_t>(m, 2);
    // Terms beyond M are at most exp(-beta (j - 1/2)^2), j > M, with ratio exp(-2 beta j).
    auto tail = [beta](std::int64_t mm) {
        const double x = static_cast<double>(mm) + 0.5;
        return 2.0 * std::exp(-beta * x * x + beta / 4.0) / -std::expm1(-2.0 * beta * (x + 0.5));
    };
    while (tail(m) > ctl.tol) {
        m *= 2;
        if (m > ctl.max_terms) {
            throw TruncationError("Gaussian series needs more than " + std::to_string(ctl.max_terms) +
                                  " terms at beta=" + std::to_string(beta));
        }
    }
    return m;
}

struct GaussianSums {
    double s0 = 0.0;  // sum w_n
    double s1 = 0.0;  // sum (n - n0) w_n
    double s2 = 0.0;  // sum (n - n0)^2 w_n
    double n0 = 0.0;
};

/// Sums of exp(-beta (n - c)^2) over the integers, centred at round(c).
inline GaussianSums gaussian_sums(double beta, double c, const SeriesControl& ctl) {
    const std::int64_t m = gaussian_half_width(beta, ctl);
    GaussianSums s;
    s.n0 = std::round(c);
    const double off = s.n0 - c;
    for (std::int64_t k = -m; k <= m; ++k) {
        const double kd = static_cast<double>(k);
        const double d = kd + off;
        const double w = std::exp(-beta * d * d);
        s.s0 += w;
        s.s1 += kd * w;
        s.s2 += kd * kd * w;
    }
    return s;
}

/// Number of dual-series terms so that exp(-pi^2 k^2 / beta) is below tol.
inline std::int64_t dual_terms(double beta, const SeriesControl& ctl) {
    const double pi2 = std::numbers::pi * std::numbers::pi;
    const auto k = static_cast<std::int64_t>(std::ceil(std::sqrt(beta * -std::log(ctl.tol) / pi2))) + 1;
    if (k > ctl.max_terms) throw TruncationError("dual theta series does not converge within the term cap");
    return k;
}

}  // namespace detail

/// Z(beta, alpha) - 1, accurate even when Z is within rounding of 1.
///
/// For beta < pi the sums are rewritten with Poisson summation,
///   sum_n exp(-beta (n - c)^2) = sqrt(pi / beta) (1 + 2 sum_k q^{k^2} cos(2 pi k c)),
/// q = exp(-pi^2 / beta), which converges fast exactly where the direct
/// series is slow. Otherwise the direct sums are used.
inline double partition_ratio_minus_one(double beta, double alpha, const SeriesControl& ctl = {}) {
    detail::check_beta(beta);
    if (beta < std::numbers::pi) {
        const std::int64_t kmax = detail::dual_terms(beta, ctl);
        const double pi = std::numbers::pi;
        double even = 0.0, odd = 0.0;  // sums over even / odd k of q^{k^2} cos(2 pi k alpha)
        const double frac = alpha - std::floor(alpha);
        for (std::int64_t k = 1; k <= kmax; ++k) {
            const double kd = static_cast<double>(k);
            const double term = std::exp(-pi * pi * kd * kd / beta) * std::cos(2.0 * pi * kd * frac);
            (k % 2 == 0 ? even : odd) += term;
        }
        // numerator 1 + 2(even - odd), denominator 1 + 2(even + odd)
        return -4.0 * odd / (1.0 + 2.0 * (even + odd));
    }
    const auto num = detail::gaussian_sums(beta, alpha + 0.5, ctl);
    const auto den = detail::gaussian_sums(beta, alpha, ctl);
    return num.s0 / den.s0 - 1.0;
}

/// Z(beta, alpha) = sum_n exp(-beta (n - alpha - 1/2)^2) / sum_n exp(-beta (n - alpha)^2).
inline double partition_ratio(double beta, double alpha, const SeriesControl& ctl = {}) {
    return 1.0 + partition_ratio_minus_one(beta, alpha, ctl);
}

/// log <exp(m beta z)>_lambda = beta m^2/4 + lambda m/2 (+ log Z(beta, lambda/2beta) for odd m).
inline double log_exp_moment(const GibbsTilt& t, std::int64_t m) {
    detail::check_beta(t.beta);
    const double md = static_cast<double>(m);
    double v = t.beta * md * md / 4.0 + t.lambda * md / 2.0;
    if (m % 2 != 0) v += std::log1p(partition_ratio_minus_one(t.beta, t.lambda / (2.0 * t.beta), t.series));
    return v;
}

inline double guarded_exp(double x, const char* what) {
    if (x > kExponentGuard) throw RateOverflowError(std::string(what) + " exponent exceeds the overflow guard", x);
    return std::exp(x);
}

/// <exp(m beta z)>_lambda in closed form.
inline double exp_moment(const GibbsTilt& t, std::int64_t m) {
    return guarded_exp(log_exp_moment(t, m), "exponential moment");
}

struct TiltMoments {
    double mean = 0.0;
    double variance = 0.0;
};

inline TiltMoments tilt_moments(double beta, double lambda, const SeriesControl& ctl = {}) {
    detail::check_beta(beta);
    const auto s = detail::gaussian_sums(beta, lambda / (2.0 * beta), ctl);
    const double m1 = s.s1 / s.s0;
    return {s.n0 + m1, std::max(s.s2 / s.s0 - m1 * m1, 0.0)};
}

/// lambda with <z>_lambda = target_mean, by safeguarded Newton (d mean / d lambda = variance).
inline double invert_tilt(double beta, double target_mean, const SeriesControl& ctl = {}, double tol = 1e-11,
                          int max_iter = 100) {
    detail::check_beta(beta);
    if (!std::isfinite(target_mean)) throw ConfigError("tilt target must be finite");
    if (target_mean == 0.0) return 0.0;
    double lambda = 2.0 * beta * target_mean;
    double lo = -INFINITY, hi = INFINITY;
    for (int it = 0; it < max_iter; ++it) {
        const auto mo = tilt_moments(beta, lambda, ctl);
        const double r = mo.mean - target_mean;
        if (std::abs(r) <= tol * std::max(1.0, std::abs(target_mean))) return lambda;
        if (r < 0.0) lo = std::max(lo, lambda);
        else hi = std::min(hi, lambda);
        double next = lambda - r / std::max(mo.variance, 1e-300);
        if (!(next > lo && next < hi)) {
            if (std::isfinite(lo) && std::isfinite(hi)) next = 0.5 * (lo + hi);
            else next = r < 0.0 ? lambda + 2.0 * beta * std::max(1.0, std::abs(r)) : lambda - 2.0 * beta * std::max(1.0, std::abs(r));
        }
        lambda = next;
    }
    throw ConvergenceError("tilt inversion did not converge for target " + std::to_string(target_mean));
}

/// Per-bond tilts lambda^i of the product measure on slopes.
struct TiltField {
    std::vector<double> lambdas;
    double beta = 1.0;
    SeriesControl series{};

    std::size_t size() const noexcept { return lambdas.size(); }
    double operator[](std::int64_t i) const {
        const auto n = static_cast<std::int64_t>(lambdas.size());
        return lambdas[static_cast<std::size_t>(((i % n) + n) % n)];
    }
    GibbsTilt tilt(std::int64_t i) const { return {beta, (*this)[i], series}; }
};

/// log of e^{-3 beta} <e^{beta z}>_{i-1} <e^{-2 beta z}>_i <e^{beta z}>_{i+1} (right hop across bond i),
/// or the mirrored product for the left hop.
inline double log_expected_rate(const TiltField& f, std::int64_t i, bool right) {
    const std::int64_t s = right ? 1 : -1;
    return -3.0 * f.beta + log_exp_moment(f.tilt(i - 1), s) + log_exp_moment(f.tilt(i), -2 * s) +
           log_exp_moment(f.tilt(i + 1), s);
}

/// <r^{i,i+1}> under the local Gibbs measure, including both Z factors.
inline double expected_rate_right(const TiltField& f, std::int64_t i) {
    return guarded_exp(log_expected_rate(f, i, true), "expected rate");
}

/// <r^{i+1,i}> under the local Gibbs measure.
inline double expected_rate_left(const TiltField& f, std::int64_t i) {
    return guarded_exp(log_expected_rate(f, i, false), "expected rate");
}

/// Small-beta form e^{-3 beta/2} exp(+-(lambda^{i-1} - 2 lambda^i + lambda^{i+1})/2), Z factors dropped.
inline double expected_rate_small_beta(const TiltField& f, std::int64_t i, bool right) {
    const double d2 = f[i - 1] - 2.0 * f[i] + f[i + 1];
    return guarded_exp(-1.5 * f.beta + (right ? 0.5 : -0.5) * d2, "expected rate");
}

/// Tilts matching mean slopes N^2 h_x(i/N), with h_x the centred difference of the grid profile.
inline TiltField tilts_from_profile(const MacroProfile& h, double beta, const SeriesControl& ctl = {}) {
    const std::size_t n = h.size();
    const double nn = static_cast<double>(n);
    const double dx = h.dx();
    TiltField f{std::vector<double>(n), beta, ctl};
    for (std::size_t i = 0; i < n; ++i) {
        const double hx = (h.at(static_cast<std::int64_t>(i) + 1) - h.at(static_cast<std::int64_t>(i) - 1)) / (2.0 * dx);
        f.lambdas[i] = invert_tilt(beta, nn * nn * hx, ctl);
    }
    return f;
}

/// Tilts matching the lattice slopes of a profile sampled at j/N:
/// <z^b> = N^3 (h((b+1)/N) - h(b/N)).
inline TiltField tilts_from_bond_slopes(std::span<const double> sampled, double beta, const SeriesControl& ctl = {}) {
    const std::size_t n = sampled.size();
    const double n3 = std::pow(static_cast<double>(n), 3);
    TiltField f{std::vector<double>(n), beta, ctl};
    for (std::size_t b = 0; b < n; ++b) {
        f.lambdas[b] = invert_tilt(beta, n3 * (sampled[(b + 1) % n] - sampled[b]), ctl);
    }
    return f;
}

/// Closed-form flux e^{-3 beta/2} (e^{beta h_xxx} - e^{-beta h_xxx}) = 2 e^{-3 beta/2} sinh(beta h_xxx).
inline double current_closed_form(double beta, double hxxx) {
    const double x = beta * hxxx;
    if (std::abs(x) > kExponentGuard) throw RateOverflowError("current argument exceeds the overflow guard", x);
    return 2.0 * std::exp(-1.5 * beta) * std::sinh(x);
}

/// Closed-form expected current at every grid node, h_xxx from the centred nodal stencil.
inline std::vector<double> expected_current(const MacroProfile& h, double beta) {
    const auto d3 = third_derivative_nodal(h);
    std::vector<double> out(d3.size());
    for (std::size_t i = 0; i < d3.size(); ++i) out[i] = current_closed_form(beta, d3[i]);
    return out;
}

inline double expected_current(const MacroProfile& h, double beta, std::size_t node) {
    return current_closed_form(beta, third_derivative_nodal(h)[node]);
}

/// <r^{i,i+1}> - <r^{i+1,i}> with exact Z factors, tilts from tilts_from_profile.
inline std::vector<double> expected_current_exact(const MacroProfile& h, double beta, const SeriesControl& ctl = {}) {
    const TiltField f = tilts_from_profile(h, beta, ctl);
    std::vector<double> out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        const auto ii = static_cast<std::int64_t>(i);
        out[i] = expected_rate_right(f, ii) - expected_rate_left(f, ii);
    }
    return out;
}

}  // namespace crystal::gibbs
