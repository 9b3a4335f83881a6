#pragma once

// Microscopic solid-on-solid surface on a periodic 1-D lattice: integer
// column heights, the quadratic slope Hamiltonian, single-particle jumps
// between neighbouring columns and their Metropolis-type rates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crystal/errors.hpp"

namespace crystal {

using Height = std::int64_t;

inline std::size_t wrap_index(std::int64_t i, std::size_t n) {
    const auto m = static_cast<std::int64_t>(n);
    // hot path: neighbours of a valid index
    if (i >= 0 && i < m) return static_cast<std::size_t>(i);
    if (i < 0 && i >= -m) return static_cast<std::size_t>(i + m);
    if (i >= m && i < 2 * m) return static_cast<std::size_t>(i - m);
    const std::int64_t r = i % m;
    return static_cast<std::size_t>(r < 0 ? r + m : r);
}

/// Inverse temperature; always strictly positive.
class InverseTemperature {
public:
    explicit InverseTemperature(double beta) : beta_(beta) {
        if (!(beta > 0.0) || !std::isfinite(beta)) {
            throw ConfigError("inverse temperature must be positive and finite, got " +
                              std::to_string(beta));
        }
    }
    double value() const noexcept { return beta_; }

private:
    double beta_;
};

enum class Direction { right, left };

/// A particle hop from `from` to the adjacent site `to` (indices mod N).
struct JumpEvent {
    std::size_t from = 0;
    std::size_t to = 0;

    static JumpEvent right(std::size_t site, std::size_t n) {
        if (site >= n) site %= n;
        return {site, site + 1 == n ? 0 : site + 1};
    }
    static JumpEvent left(std::size_t site, std::size_t n) {
        if (site >= n) site %= n;
        return {site, site == 0 ? n - 1 : site - 1};
    }

    /// Hop across bond `b` (between sites b and b+1) in the given direction.
    static JumpEvent across(std::size_t bond, Direction dir, std::size_t n) {
        const JumpEvent r = right(bond, n);
        return dir == Direction::right ? r : r.reversed();
    }

    Direction direction(std::size_t n) const {
        if (from < n && to < n) {
            if (to == (from + 1 == n ? 0 : from + 1)) return Direction::right;
            if (to == (from == 0 ? n - 1 : from - 1)) return Direction::left;
        }
        throw InvalidEventError("sites " + std::to_string(from) + " and " + std::to_string(to) +
                                " are not adjacent on a ring of " + std::to_string(n));
    }

    /// Bond index b such that the hop crosses the bond between b and b+1.
    std::size_t bond(std::size_t n) const {
        return direction(n) == Direction::right ? from : to;
    }

    JumpEvent reversed() const { return {to, from}; }

    friend bool operator==(const JumpEvent&, const JumpEvent&) = default;
};

/// Integer height profile h^0..h^{N-1} with cached slopes z^i = h^{i+1} - h^i
/// and energy H = sum (z^i)^2, both maintained incrementally.
class MicroState {
public:
    MicroState() = default;

    explicit MicroState(std::vector<Height> heights) : heights_(std::move(heights)) {
        if (heights_.size() < 3) {
            throw ConfigError("a lattice needs at least 3 sites, got " +
                              std::to_string(heights_.size()));
        }
        recompute();
    }

    std::size_t size() const noexcept { return heights_.size(); }
    std::span<const Height> heights() const noexcept { return heights_; }
    std::span<const Height> slopes() const noexcept { return slopes_; }
    Height energy() const noexcept { return energy_; }

    Height height(std::int64_t i) const { return heights_[wrap_index(i, size())]; }
    Height slope(std::int64_t i) const { return slopes_[wrap_index(i, size())]; }

    Height total_mass() const {
        Height s = 0;
        for (Height h : heights_) s += h;
        return s;
    }

    /// Moves one particle. Touches two heights, three slopes and the energy.
    void apply(const JumpEvent& e) {
        const std::size_t n = size();
        if (e.from >= n || e.to >= n) throw InvalidEventError("jump site out of range");
        const Direction dir = e.direction(n);
        const auto b = static_cast<std::int64_t>(e.bond(n));
        // Right hop across bond b: z^{b-1} -= 1, z^b += 2, z^{b+1} -= 1; left hop is the negation.
        const Height s = dir == Direction::right ? 1 : -1;
        heights_[e.from] -= 1;
        heights_[e.to] += 1;
        bump_slope(b - 1, -s);
        bump_slope(b, 2 * s);
        bump_slope(b + 1, -s);
    }

    static Height scratch_energy(std::span<const Height> heights) {
        const std::size_t n = heights.size();
        Height e = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Height z = heights[(i + 1) % n] - heights[i];
            e += z * z;
        }
        return e;
    }

    /// True when the cached slopes and energy agree with the heights.
    bool consistent() const {
        const std::size_t n = size();
        Height sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (slopes_[i] != heights_[(i + 1) % n] - heights_[i]) return false;
            sum += slopes_[i];
        }
        return sum == 0 && energy_ == scratch_energy(heights_);
    }

    friend bool operator==(const MicroState& a, const MicroState& b) {
        return a.heights_ == b.heights_;
    }

private:
    void recompute() {
        const std::size_t n = size();
        slopes_.resize(n);
        for (std::size_t i = 0; i < n; ++i) slopes_[i] = heights_[(i + 1) % n] - heights_[i];
        energy_ = scratch_energy(heights_);
    }

    void bump_slope(std::int64_t i, Height d) {
        Height& z = slopes_[wrap_index(i, size())];
        energy_ += d * (2 * z + d);
        z += d;
    }

    std::vector<Height> heights_;
    std::vector<Height> slopes_;
    Height energy_ = 0;
};

/// H(J h) - H(h) from the three slopes around the crossed bond.
/// Right hop across b: 6 + 4 z^b - 2 z^{b-1} - 2 z^{b+1}; left hop flips the sign of the slope terms.
inline Height delta_energy(const MicroState& state, const JumpEvent& e) {
    const std::size_t n = state.size();
    if (e.from >= n || e.to >= n) throw InvalidEventError("jump site out of range");
    const Direction dir = e.direction(n);
    const auto b = static_cast<std::int64_t>(e.bond(n));
    const Height curvature = state.slope(b - 1) - 2 * state.slope(b) + state.slope(b + 1);
    return dir == Direction::right ? 6 - 2 * curvature : 6 + 2 * curvature;
}

/// exp(-beta * dH / 2) with the exponent guarded against overflow.
struct MetropolisRate {
    double beta = 1.0;
    /// Exponents below -guard are clamped; above +guard they raise.
    bool clamp = true;

    explicit MetropolisRate(InverseTemperature b, bool clamp_exponent = true)
        : beta(b.value()), clamp(clamp_exponent) {}

    double operator()(Height d_energy) const {
        double x = -0.5 * beta * static_cast<double>(d_energy);
        if (clamp) {
            if (x > kExponentGuard) {
                throw RateOverflowError("jump rate exponent " + std::to_string(x) +
                                            " exceeds the overflow guard",
                                        x);
            }
            if (x < -kExponentGuard) x = -kExponentGuard;
        }
        return std::exp(x);
    }
};

inline double jump_rate(const MicroState& state, const JumpEvent& e, InverseTemperature beta) {
    return MetropolisRate{beta}(delta_energy(state, e));
}

/// Net rate r^{i,i+1} - r^{i+1,i} across bond i.
inline double local_current(const MicroState& state, std::size_t i, InverseTemperature beta) {
    const std::size_t n = state.size();
    return jump_rate(state, JumpEvent::across(i, Direction::right, n), beta) -
           jump_rate(state, JumpEvent::across(i, Direction::left, n), beta);
}

inline MicroState negate(const MicroState& state) {
    std::vector<Height> h(state.heights().begin(), state.heights().end());
    for (Height& v : h) v = -v;
    return MicroState(std::move(h));
}

}  // namespace crystal
