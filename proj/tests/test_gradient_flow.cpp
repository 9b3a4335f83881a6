#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "crystal/experiments.hpp"
#include "crystal/gradient_flow.hpp"

using namespace crystal;
using namespace crystal::flow;

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

MacroProfile mixed(std::size_t n, double amp) {
    MacroProfile p = MacroProfile::sample(
        [=](double x) { return amp * (std::sin(kTwoPi * x) + 0.5 * std::cos(2 * kTwoPi * x) + 0.2 * std::sin(3 * kTwoPi * x)); }, n);
    project_mean_zero(p.values);
    return p;
}

// mean-zero white noise; amplitude chosen so that D2 v is O(1) on the grid
MacroProfile noise(std::size_t n, double amp, std::mt19937_64& g) {
    std::uniform_real_distribution<double> u(-amp, amp);
    MacroProfile p{std::vector<double>(n)};
    for (double& v : p.values) v = u(g);
    project_mean_zero(p.values);
    return p;
}

MacroProfile combine(const MacroProfile& u, const MacroProfile& v, double t) {
    MacroProfile w = u;
    for (std::size_t j = 0; j < w.size(); ++j) w.values[j] = (1 - t) * u.values[j] + t * v.values[j];
    return w;
}

double dist(const MacroProfile& a, const MacroProfile& b) { return l2_distance(a.values, b.values, a.dx()); }

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double sup_gap(const MacroProfile& a, const MacroProfile& b) {
    double m = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a.values[j] - b.values[j]));
    return m;
}

pde::SolverConfig slope_solver() {
    pde::SolverConfig c;
    c.form = pde::Form::slope;
    c.abs_tol = 1e-13;
    c.rel_tol = 1e-9;
    return c;
}

}  // namespace

TEST(Constants, ContinuumAndDiscrete) {
    EXPECT_NEAR(poincare_constant(), 1558.5454565440389, 1e-9);
    EXPECT_NEAR(poincare_constant(2.0), poincare_constant() / 16, 1e-12);
    double prev = 0.0;
    for (std::size_t n : {8u, 16u, 32u, 64u, 128u, 1024u}) {
        const double d = discrete_poincare_constant(n);
        EXPECT_LT(d, poincare_constant());
        EXPECT_GT(d, prev);
        prev = d;
    }
    EXPECT_NEAR(discrete_poincare_constant(1024) / poincare_constant(), 1.0, 1e-5);
}

TEST(Constants, DiscreteValueIsSmallestEigenvalue) {
    // Rayleigh quotient of D2^2 on the k = 1 mode equals the constant exactly
    const std::size_t n = 24;
    const MacroProfile s = MacroProfile::sample([](double x) { return std::sin(kTwoPi * x); }, n);
    const auto d2 = second_difference(s);
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        num += d2[j] * d2[j];
        den += s.values[j] * s.values[j];
    }
    EXPECT_NEAR(num / den, discrete_poincare_constant(n), 1e-9 * discrete_poincare_constant(n));
}

TEST(LocalSlope, ZeroAndLinearization) {
    EXPECT_EQ(local_slope(MacroProfile(std::vector<double>(32, 0.0))), 0.0);
    const double eps = 1e-4;
    const MacroProfile s = MacroProfile::sample([=](double x) { return eps * std::sin(kTwoPi * x); }, 128);
    EXPECT_NEAR(local_slope(s) / (eps * std::pow(kTwoPi, 4) / std::sqrt(2.0)), 1.0, 0.01);
    EXPECT_DOUBLE_EQ(local_slope(s), l2_norm(pde::rhs_slope(s), s.dx()));
}

TEST(Convexity, DiscreteLambdaInequality) {
    std::mt19937_64 g(11);
    const std::size_t n = 32;
    const double lam = discrete_poincare_constant(n);
    for (int trial = 0; trial < 200; ++trial) {
        const double amp = trial % 2 == 0 ? 2e-4 : 2e-3;
        const MacroProfile u = noise(n, amp, g), v = noise(n, amp, g);
        const double d = dist(u, v);
        for (double t : {0.25, 0.5, 0.75}) {
            const double lhs = phi(combine(u, v, t));
            const double rhs = (1 - t) * phi(u) + t * phi(v) - 0.5 * lam * t * (1 - t) * d * d;
            EXPECT_LE(lhs, rhs + 1e-13 * rhs) << trial << " " << t;
        }
    }
}

TEST(Convexity, DiscreteLambdaIsSharp) {
    // near zero along the k = 1 mode phi is quadratic with exactly this constant
    const std::size_t n = 32;
    const double lam = discrete_poincare_constant(n);
    const MacroProfile u(std::vector<double>(n, 0.0));
    const MacroProfile v = MacroProfile::sample([](double x) { return 1e-4 * std::sin(kTwoPi * x); }, n);
    const double d = dist(u, v);
    const double lhs = phi(combine(u, v, 0.5));
    const double rhs = 0.5 * phi(u) + 0.5 * phi(v) - 0.5 * 1.01 * lam * 0.25 * d * d;
    EXPECT_GT(lhs, rhs);
}

TEST(Prox, ZeroAnchorIsFixed) {
    const ProximalProblem pb{MacroProfile(std::vector<double>(32, 0.0)), 1e-4};
    for (double v : prox_step(pb).values) EXPECT_EQ(v, 0.0);
}

TEST(Prox, MinimizerProperties) {
    for (double tau : {1e-7, 1e-5, 1e-3}) {
        const ProximalProblem pb{mixed(48, 0.05), tau};
        const ProxResult r = prox_solve(pb);
        EXPECT_LE(proximal_objective(pb, r.minimizer), proximal_objective(pb, pb.anchor));
        EXPECT_LE(phi(r.minimizer) + dist(r.minimizer, pb.anchor) * dist(r.minimizer, pb.anchor) / (2 * tau), phi(pb.anchor));
        EXPECT_LT(std::abs(r.minimizer.mean()), 1e-12);
        // the certificate: gradient of Phi vanishes
        auto grad = phi_gradient(r.minimizer);
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += (r.minimizer.values[j] - pb.anchor.values[j]) / tau;
        const double ref = local_slope(pb.anchor) + l2_norm(pb.anchor.values, pb.anchor.dx()) / tau;
        EXPECT_LE(l2_norm(grad, pb.anchor.dx()), 1e-10 * ref);
        EXPECT_NEAR(r.minimizer.time, tau, 1e-20);
    }
}

TEST(Prox, SmallStepFollowsNegativeGradient) {
    const MacroProfile a = mixed(48, 0.01);
    const double tau = 1e-8;
    const MacroProfile x = prox_step({a, tau});
    const auto grad = phi_gradient(a);
    std::vector<double> diff(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) diff[j] = (x.values[j] - a.values[j]) / tau + grad[j];
    EXPECT_LT(l2_norm(diff, a.dx()), 0.05 * l2_norm(grad, a.dx()));
}

TEST(Prox, ContractionAtRateOnePlusTauLambda) {
    std::mt19937_64 g(5);
    const std::size_t n = 32;
    const double lam = discrete_poincare_constant(n);
    for (double tau : {1e-6, 1e-5, 1e-4}) {
        for (int trial = 0; trial < 6; ++trial) {
            MacroProfile a = mixed(n, 0.02), b = noise(n, 2e-4, g);
            for (std::size_t j = 0; j < n; ++j) b.values[j] += a.values[j];
            const double before = dist(a, b);
            const double after = dist(prox_step({a, tau}), prox_step({b, tau}));
            EXPECT_LE(after, before / (1 + tau * lam) + 1e-12) << tau << " " << trial;
        }
    }
}

TEST(Prox, RejectsBadProblems) {
    EXPECT_THROW(prox_step({mixed(16, 0.01), 0.0}), ConfigError);
    EXPECT_THROW(prox_step({mixed(16, 0.01), -1e-3}), ConfigError);
    MacroProfile shifted = mixed(16, 0.01);
    for (double& v : shifted.values) v += 0.1;
    EXPECT_THROW(prox_step({shifted, 1e-5}), ConfigError);
    ProximalProblem capped{mixed(16, 0.05), 1e-3};
    capped.max_iter = 1;
    EXPECT_THROW(prox_step(capped), ConvergenceError);
}

TEST(MinimizingMovement, ZeroStaysZero) {
    const auto traj = minimizing_movement(MacroProfile(std::vector<double>(16, 0.0)), 1e-4, 5);
    ASSERT_EQ(traj.size(), 6u);
    for (const auto& p : traj)
        for (double v : p.values) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(traj.back().time, 1e-4, 1e-18);
}

TEST(MinimizingMovement, MonotoneConservativeAndEnergyInequality) {
    const MacroProfile h0 = mixed(32, 0.05);
    const double t = 1e-4;
    const auto traj = minimizing_movement(h0, t, 20);
    for (std::size_t k = 1; k < traj.size(); ++k) {
        EXPECT_LE(phi(traj[k]), phi(traj[k - 1]));
        EXPECT_LT(std::abs(traj[k].mean()), 1e-12);
    }
    const MacroProfile zero(std::vector<double>(32, 0.0));
    for (const MacroProfile* v : {&h0, &zero}) {
        const double d = dist(*v, h0);
        EXPECT_LE(phi(traj.back()), phi(*v) + d * d / (2 * t));
    }
}

TEST(MinimizingMovement, ConvergesToPdeUnderRefinement) {
    const MacroProfile h0 = mixed(32, 0.01);
    const double t = 3e-5;
    const MacroProfile ref = pde::evolve(h0, t, slope_solver()).final_state;
    double prev = INFINITY;
    for (std::size_t steps : {8u, 16u, 32u, 64u}) {
        const double gap = sup_gap(minimizing_movement(h0, t, steps).back(), ref);
        EXPECT_LT(gap, prev) << steps;
        prev = gap;
    }
    EXPECT_LT(prev, 0.05 * max_abs(h0.values));
}

TEST(MinimizingMovement, RejectsBadArguments) {
    EXPECT_THROW(minimizing_movement(mixed(16, 0.01), 1e-4, 0), ConfigError);
    EXPECT_THROW(minimizing_movement(mixed(16, 0.01), 0.0, 4), ConfigError);
}

TEST(TimeDerivative, ExactForQuadraticsOnUnevenTimes) {
    const std::vector<double> t{0.0, 0.3, 1.0, 1.2};
    std::vector<double> y;
    for (double s : t) y.push_back(2.0 - 3.0 * s + 0.7 * s * s);
    for (std::size_t k : {1u, 2u}) EXPECT_NEAR(time_derivative(t, y, k), -3.0 + 1.4 * t[k], 1e-12);
}

TEST(Evi, ZeroTestProfileAlongPdeTrajectory) {
    const MacroProfile h0 = mixed(48, 0.03);
    const auto traj = harness::sampled_trajectory(h0, 5e-4, 200, slope_solver());
    const MacroProfile zero(std::vector<double>(48, 0.0));
    for (const auto& e : evi_residual(traj, zero, discrete_poincare_constant(48))) EXPECT_LE(e.residual, 1e-3 * e.scale) << e.time;
}

TEST(Evi, TestProfileOnTheTrajectory) {
    const MacroProfile h0 = mixed(48, 0.03);
    const auto traj = harness::sampled_trajectory(h0, 2e-4, 200, slope_solver());
    const std::size_t k = 100;
    MacroProfile v = traj[k];
    project_mean_zero(v.values);
    const auto res = evi_residual(traj, v, discrete_poincare_constant(48));
    // at t_k the distance has a double zero, so every term vanishes
    EXPECT_NEAR(res[k - 1].residual, 0.0, 1e-6 * res.front().scale);
}

TEST(Evi, RandomBattery) {
    const MacroProfile h0 = mixed(48, 0.03);
    const auto traj = harness::sampled_trajectory(h0, 5e-4, 200, slope_solver());
    const auto tests = harness::evi_test_profiles(48, 1.0, 20, 0.03, 3);
    ASSERT_EQ(tests.size(), 20u);
    for (const auto& v : tests) EXPECT_LT(std::abs(v.mean()), 1e-15);
    const auto b = harness::evi_battery(traj, tests, discrete_poincare_constant(48));
    EXPECT_EQ(b.points, 20u * 199u);
    EXPECT_TRUE(b.holds(1e-3)) << b.worst_ratio;
}

TEST(Evi, RejectsShortTrajectories) {
    const MacroProfile h0 = mixed(16, 0.01);
    const std::vector<MacroProfile> two{h0, h0};
    EXPECT_THROW(evi_residual(two, h0), ConfigError);
}

TEST(DecayFit, ExactExponential) {
    std::vector<double> t, y;
    for (int k = 0; k <= 40; ++k) {
        t.push_back(1e-4 * k);
        y.push_back(3.0 * std::exp(-2500.0 * t.back()));
    }
    y[3] = -1.0;  // skipped
    const RateFit f = fit_decay_rate(t, y);
    EXPECT_NEAR(f.rate, 2500.0, 1e-8);
    EXPECT_LE(f.ci_low, f.rate);
    EXPECT_GE(f.ci_high, f.rate);
    EXPECT_LT(f.ci_high - f.ci_low, 1e-6);
    EXPECT_EQ(f.points, 21u);
    EXPECT_NEAR(f.t_begin, 2e-3, 1e-15);
    EXPECT_THROW(fit_decay_rate(std::vector<double>{0.0, 1.0}, std::vector<double>{1.0, 0.5}), ConfigError);
    EXPECT_THROW(fit_decay_rate(std::vector<double>{0.0, 1.0}, std::vector<double>{1.0}), ConfigError);
}

TEST(DecayFit, StudentQuantile) {
    EXPECT_NEAR(detail::t_quantile_975(10), 2.228139, 1e-3);
    EXPECT_NEAR(detail::t_quantile_975(30), 2.042272, 1e-4);
    EXPECT_NEAR(detail::t_quantile_975(1e6), 1.959966, 1e-5);
}

TEST(Decay, SmallAmplitudeSineSaturatesBound) {
    const MacroProfile h0 = MacroProfile::sample([](double x) { return 1e-4 * std::sin(kTwoPi * x); }, 64);
    const auto traj = harness::sampled_trajectory(h0, 1e-3, 50, slope_solver());
    const DecayReport r = decay_diagnostics(traj);
    EXPECT_NEAR(r.lambda, 1558.5454565440389, 1e-9);
    EXPECT_NEAR(r.phi_fit.rate / (2 * poincare_constant()), 1.0, 0.05);
    EXPECT_TRUE(r.phi_rate_ok);
    EXPECT_TRUE(r.slope_rate_ok);
    EXPECT_TRUE(r.l2_rate_ok);
    EXPECT_LE(r.envelope_max_increase, 1e-3);
    EXPECT_LE(r.energy_bound_ratio, 1.0 + 1e-6);
    ASSERT_TRUE(r.onset.has_value());
    EXPECT_EQ(r.times.size(), 51u);
}

TEST(Decay, LargerAmplitudeDecaysFasterThanBound) {
    const auto traj = harness::sampled_trajectory(mixed(48, 0.05), 1e-3, 60, slope_solver());
    const DecayReport r = decay_diagnostics(traj);
    EXPECT_TRUE(r.phi_rate_ok);
    EXPECT_LE(r.envelope_max_increase, 1e-3);
    EXPECT_LE(r.energy_bound_ratio, 1.0 + 1e-9);
    for (std::size_t k = 1; k < r.phi_values.size(); ++k) EXPECT_LE(r.phi_values[k], r.phi_values[k - 1]);
}

TEST(Decay, TooShort) {
    const MacroProfile h0 = mixed(16, 0.01);
    EXPECT_THROW(decay_diagnostics(std::vector<MacroProfile>(3, h0)), ConfigError);
}
