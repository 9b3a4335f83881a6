#pragma once

// Periodic uniform grid functions and the finite-difference stencils shared
// by the PDE solver, the gradient-flow machinery and the Gibbs module.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crystal/errors.hpp"

namespace crystal {

/// Real height profile on a periodic grid x_j = j L / n.
struct MacroProfile {
    std::vector<double> values;
    double length = 1.0;
    double time = 0.0;

    MacroProfile() = default;
    explicit MacroProfile(std::vector<double> v, double len = 1.0, double t = 0.0)
        : values(std::move(v)), length(len), time(t) {}

    template <class F>
    static MacroProfile sample(F&& f, std::size_t n, double len = 1.0) {
        std::vector<double> v(n);
        for (std::size_t j = 0; j < n; ++j) v[j] = f(len * static_cast<double>(j) / static_cast<double>(n));
        return MacroProfile(std::move(v), len);
    }

    std::size_t size() const noexcept { return values.size(); }
    double dx() const noexcept { return length / static_cast<double>(values.size()); }
    double x(std::size_t j) const noexcept { return length * static_cast<double>(j) / static_cast<double>(values.size()); }

    double at(std::int64_t j) const {
        const auto n = static_cast<std::int64_t>(values.size());
        return values[static_cast<std::size_t>(((j % n) + n) % n)];
    }

    double mean() const {
        return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    }

    MacroProfile operator-() const {
        MacroProfile out = *this;
        for (double& v : out.values) v = -v;
        return out;
    }
};

inline void require_grid(std::size_t n, std::size_t min_points) {
    if (n < min_points) {
        throw ConfigError("grid needs at least " + std::to_string(min_points) + " points, got " + std::to_string(n));
    }
}

/// (h_{j+1} - 2 h_j + h_{j-1}) / dx^2 at every node.
inline std::vector<double> second_difference(std::span<const double> h, double dx) {
    const std::size_t n = h.size();
    std::vector<double> out(n);
    const double s = 1.0 / (dx * dx);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = (h[(j + 1) % n] - 2.0 * h[j] + h[(j + n - 1) % n]) * s;
    }
    return out;
}

inline std::vector<double> second_difference(const MacroProfile& p) { return second_difference(p.values, p.dx()); }

/// Compact third difference at half points; entry j is located at x_{j+1/2}:
/// (h_{j+2} - 3 h_{j+1} + 3 h_j - h_{j-1}) / dx^3.
inline std::vector<double> third_difference_half(std::span<const double> h, double dx) {
    const std::size_t n = h.size();
    std::vector<double> out(n);
    const double s = 1.0 / (dx * dx * dx);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = (h[(j + 2) % n] - 3.0 * h[(j + 1) % n] + 3.0 * h[j] - h[(j + n - 1) % n]) * s;
    }
    return out;
}

/// Third derivative at half points with the compact centred stencil.
inline std::vector<double> third_derivative(const MacroProfile& p) {
    require_grid(p.size(), 5);
    return third_difference_half(p.values, p.dx());
}

/// Centred nodal third derivative (h_{j+2} - 2 h_{j+1} + 2 h_{j-1} - h_{j-2}) / (2 dx^3).
inline std::vector<double> third_derivative_nodal(const MacroProfile& p) {
    require_grid(p.size(), 5);
    const std::size_t n = p.size();
    const double dx = p.dx();
    const double s = 0.5 / (dx * dx * dx);
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = (p.values[(j + 2) % n] - 2.0 * p.values[(j + 1) % n] + 2.0 * p.values[(j + n - 1) % n] -
                  p.values[(j + n - 2) % n]) *
                 s;
    }
    return out;
}

/// Discrete L2 inner product sum u_j v_j dx.
inline double inner(std::span<const double> u, std::span<const double> v, double dx) {
    double s = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) s += u[j] * v[j];
    return s * dx;
}

inline double l2_norm(std::span<const double> u, double dx) { return std::sqrt(inner(u, u, dx)); }

inline double l2_distance(std::span<const double> u, std::span<const double> v, double dx) {
    double s = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) s += (u[j] - v[j]) * (u[j] - v[j]);
    return std::sqrt(s * dx);
}

inline double sup_norm(std::span<const double> u) {
    double m = 0.0;
    for (double v : u) m = std::max(m, std::abs(v));
    return m;
}

inline double sup_distance(std::span<const double> u, std::span<const double> v) {
    double m = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) m = std::max(m, std::abs(u[j] - v[j]));
    return m;
}

/// Subtracts the mean in place.
inline void project_mean_zero(std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x -= m;
}

}  // namespace crystal
