#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace crystal {

/// One independent random stream per (master seed, replica index) pair.
/// Output is fully determined by the pair, whatever thread runs the replica.
class ReplicaRng {
public:
    ReplicaRng(std::uint64_t master_seed, std::uint64_t replica) {
        std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                          static_cast<std::uint32_t>(master_seed >> 32),
                          static_cast<std::uint32_t>(replica),
                          static_cast<std::uint32_t>(replica >> 32), 0x63727973u};
        engine_.seed(seq);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Exp(rate) sample; a raw draw of exactly zero is discarded and redrawn.
    double exponential(double rate) {
        double u = uniform();
        while (u == 0.0) u = uniform();
        return -std::log(u) / rate;
    }

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace crystal
