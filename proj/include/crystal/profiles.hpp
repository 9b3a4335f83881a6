#pragma once

// Named initial data on the unit torus and tabulated profiles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/grid.hpp"

namespace crystal {

enum class ProfileKind { sine, two_bump, compact_bump, custom };

inline const char* to_string(ProfileKind k) {
    switch (k) {
        case ProfileKind::sine: return "sine";
        case ProfileKind::two_bump: return "two_bump";
        case ProfileKind::compact_bump: return "compact_bump";
        case ProfileKind::custom: return "custom";
    }
    return "?";
}

inline ProfileKind parse_profile_kind(const std::string& s) {
    if (s == "sine") return ProfileKind::sine;
    if (s == "two_bump") return ProfileKind::two_bump;
    if (s == "compact_bump") return ProfileKind::compact_bump;
    if (s == "custom") return ProfileKind::custom;
    throw ConfigError("unknown profile kind '" + s + "' (expected sine, two_bump, compact_bump or custom)");
}

/// Periodic piecewise-linear interpolant of tabulated (x, h) pairs on [0, length).
class TabulatedProfile {
public:
    TabulatedProfile() = default;
    TabulatedProfile(std::vector<double> x, std::vector<double> h, double length = 1.0)
        : x_(std::move(x)), h_(std::move(h)), length_(length) {
        if (x_.size() != h_.size() || x_.empty()) throw ConfigError("tabulated profile needs matching nonempty columns");
        for (std::size_t k = 0; k < x_.size(); ++k) {
            if (!std::isfinite(x_[k]) || !std::isfinite(h_[k])) throw ConfigError("tabulated profile has non-finite entries");
            if (k > 0 && !(x_[k] > x_[k - 1])) throw ConfigError("tabulated x must be strictly increasing");
        }
        if (x_.front() < 0.0 || x_.back() >= length_) throw ConfigError("tabulated x must lie in [0, length)");
    }

    /// Reads a CSV with header `x,h`.
    static TabulatedProfile load_csv(const std::string& path, double length = 1.0) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open profile table " + path);
        std::string line;
        if (!std::getline(in, line)) throw ConfigError("profile table " + path + " is empty");
        if (line.rfind("x,h", 0) != 0) throw ConfigError("profile table " + path + " must start with header x,h");
        std::vector<double> x, h;
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string a, b;
            if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',')) {
                throw ConfigError(path + ":" + std::to_string(row) + ": expected two columns");
            }
            try {
                x.push_back(std::stod(a));
                h.push_back(std::stod(b));
            } catch (const std::exception&) {
                throw ConfigError(path + ":" + std::to_string(row) + ": not a number");
            }
        }
        return TabulatedProfile(std::move(x), std::move(h), length);
    }

    std::size_t size() const noexcept { return x_.size(); }
    const std::vector<double>& x() const noexcept { return x_; }
    const std::vector<double>& h() const noexcept { return h_; }

    double operator()(double x) const {
        const double y = x - length_ * std::floor(x / length_);
        if (x_.size() == 1) return h_[0];
        auto it = std::upper_bound(x_.begin(), x_.end(), y);
        std::size_t hi = static_cast<std::size_t>(it - x_.begin());
        double x0, x1, h0, h1;
        if (hi == 0 || hi == x_.size()) {
            // wrap segment between the last and first nodes
            x0 = x_.back();
            h0 = h_.back();
            x1 = x_.front() + length_;
            h1 = h_.front();
            const double yy = hi == 0 ? y + length_ : y;
            return h0 + (h1 - h0) * (yy - x0) / (x1 - x0);
        }
        x0 = x_[hi - 1];
        x1 = x_[hi];
        h0 = h_[hi - 1];
        h1 = h_[hi];
        return h0 + (h1 - h0) * (y - x0) / (x1 - x0);
    }

private:
    std::vector<double> x_;
    std::vector<double> h_;
    double length_ = 1.0;
};

struct InitialProfile {
    ProfileKind kind = ProfileKind::sine;
    double amplitude = 0.1;
    double shift = 0.0;
    /// Source table for kind == custom.
    std::string table;
    TabulatedProfile tabulated{};
};

/// exp(8 - 1/x - 1/(1/2 - x)) on (0, 1/2), zero elsewhere; equals 1 at x = 1/4.
inline double unit_bump(double x) {
    if (!(x > 0.0 && x < 0.5)) return 0.0;
    const double e = 8.0 - 1.0 / x - 1.0 / (0.5 - x);
    return std::exp(e);
}

inline double wrap_unit(double x) { return x - std::floor(x); }

/// Value of the profile at x on the unit torus.
inline double make_profile(const InitialProfile& p, double x) {
    const double y = wrap_unit(x - p.shift);
    switch (p.kind) {
        case ProfileKind::sine:
            return p.amplitude * std::sin(2.0 * std::numbers::pi * y);
        case ProfileKind::two_bump:
            return p.amplitude * (unit_bump(y) + unit_bump(wrap_unit(y + 0.2)));
        case ProfileKind::compact_bump: {
            // centred at x = 0 on [-1/2, 1/2): nonzero for 0 < |x| < 1/2
            const double r = std::abs(y >= 0.5 ? y - 1.0 : y);
            return p.amplitude * unit_bump(r);
        }
        case ProfileKind::custom:
            if (p.tabulated.size() == 0) throw ConfigError("custom profile has no table loaded");
            return p.amplitude * p.tabulated(y);
    }
    throw ConfigError("unknown profile kind");
}

inline MacroProfile sample_profile(const InitialProfile& p, std::size_t n, double length = 1.0) {
    return MacroProfile::sample([&](double x) { return make_profile(p, x / length); }, n, length);
}

}  // namespace crystal
