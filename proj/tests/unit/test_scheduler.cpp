#include <doctest.h>

#include <cmath>

#include "wncs/scheduler.hpp"

using namespace wncs;
using namespace wncs::scheduler;

namespace {

errmodel::ErrorPolyCoeffs coeffs(double a0, double a1, double a2 = 0, double a3 = 0, double a4 = 0) {
    errmodel::ErrorPolyCoeffs c;
    c.degree = 2;
    c.alpha = (Vec(5) << a0, a1, a2, a3, a4).finished();
    return c;
}

SchedulerState state(double Q_a, double beta, double p_b, double x_norm = 0.0) {
    SchedulerState s;
    s.Q_a = Q_a;
    s.beta = beta;
    s.p_b = p_b;
    s.x_last = Vec::Zero(4);
    s.x_last[0] = x_norm;
    return s;
}

}  // namespace

TEST_CASE("state updates") {
    CHECK(aoi_update(3, 0) == 4);
    CHECK(aoi_update(7, 1) == 1);
    CHECK(aoi_update(0, 0) == 1);
    CHECK(queue_update(5, 0, 1) == 4);
    CHECK(queue_update(0, 1, 0) == 1);
    CHECK(queue_update(0.3, 0, 1) == 0);
    CHECK(battery_update(1, 1, 0.05, 1e-5, 0, 0, 1) == doctest::Approx(0.94999).epsilon(1e-14));
    CHECK(battery_update(0.01, 1, 0.05, 1e-5, 0, 0, 1) == 0.0);
    CHECK(battery_update(0.2, 1, 0.05, 1e-5, 9, 10, 1) == 1.0);
    CHECK(battery_update(0.2, 1, 0.05, 1e-5, 8, 10, 1) == doctest::Approx(0.14999));
}

TEST_CASE("drift-plus-penalty objective") {
    SchedulerConfig cfg;
    const auto s = state(0, 20, 1);
    CHECK(drift_penalty_objective(s, 1, 1, cfg, 0.05) == doctest::Approx(9.94999).epsilon(1e-14));
    CHECK(drift_penalty_objective(s, 0, 0, cfg, 0.05) == doctest::Approx(20.0 - 1e-5).epsilon(1e-14));
    const auto dead = state(0, 7, 0);
    CHECK(drift_penalty_objective(dead, 0, 0, cfg, 0.05) == 7.0);
    const auto q = state(3.5, 2, 0.4);
    const double base = drift_penalty_objective(q, 0, 0, cfg, 0.05);
    for (double g : {0.25, 0.5, 1.0})
        CHECK(drift_penalty_objective(q, 0, g, cfg, 0.05) - base == doctest::Approx((cfg.V - q.Q_a) * g));
}

TEST_CASE("skipping feasibility") {
    const Vec x = Vec::Zero(4);
    CHECK(a0_feasible(coeffs(1, 1), x, 50, 1e9));
    CHECK_FALSE(a0_feasible(coeffs(0, 1), x, 5, 0.3));
    CHECK(a0_feasible(coeffs(0, 0.1), x, 2, 0.3 + 1e-15));
    CHECK(a0_feasible(coeffs(0, 0.25), x, 0, 0.25));
}

TEST_CASE("decision rule") {
    SchedulerConfig cfg;
    const auto small = coeffs(0.01, 0.001);
    SUBCASE("fresh state skips") {
        const auto d = decide(state(0, 1, 1), cfg, small, 0.05);
        CHECK(d.a == 0);
        CHECK(d.gamma == 0.0);
        CHECK(d.a0_feasible);
        CHECK_FALSE(d.starvation);
    }
    SUBCASE("stale state must schedule") {
        const auto d = decide(state(0, 5, 1), cfg, coeffs(0, 1), 0.05);
        CHECK(d.a == 1);
        CHECK(d.gamma == 1.0);
        CHECK_FALSE(d.a0_feasible);
    }
    SUBCASE("staleness beyond V schedules voluntarily") {
        const auto d = decide(state(0, 20, 1), cfg, coeffs(0, 0), 0.05);
        CHECK(d.a == 1);
        CHECK(d.objective == doctest::Approx(9.94999));
    }
    SUBCASE("large queue picks gamma = 1 when skipping") {
        const auto d = decide(state(15, 1, 1), cfg, small, 0.05);
        CHECK(d.a == 0);
        CHECK(d.gamma == 1.0);
    }
    SUBCASE("starvation") {
        const auto d = decide(state(0, 5, 0.01), cfg, coeffs(0, 1), 0.05);
        CHECK(d.starvation);
        CHECK(d.a == 0);
        CHECK(d.gamma == 0.0);
        CHECK_FALSE(d.battery_ok);
    }
    SUBCASE("constraint coefficients") {
        const auto c = coeffs(0.2, 0.05, 0.0, 0.01, 0.03);
        const auto s = state(0, 6, 1, 0.4);
        const auto d = decide(s, cfg, c, 0.05);
        for (double a : {0.0, 0.3, 1.0}) {
            const double direct = errmodel::eval_raw(c, 0.4, 1 + (1 - a) * 6) - cfg.delta;
            CHECK(d.c1 * a * a + d.c2 * a + d.c3 == doctest::Approx(direct).epsilon(1e-12));
        }
    }
}

TEST_CASE("vertex enumeration equals grid search") {
    Rng rng(42);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    SchedulerConfig cfg;
    for (int i = 0; i < 1000; ++i) {
        cfg.V = 30 * U(rng);
        const auto s = state(25 * U(rng), std::floor(30 * U(rng)), 1.2 * U(rng), 0.5 * U(rng));
        const auto c = coeffs(U(rng) * 0.2, U(rng) * 0.05, U(rng) * 0.1, U(rng) * 0.002, U(rng) * 0.02);
        const double p_sc = 0.2 * U(rng);
        const auto v = decide(s, cfg, c, p_sc);
        const auto g = decide_grid(s, cfg, c, p_sc);
        CHECK(v.objective == doctest::Approx(g.objective).epsilon(1e-12));
        CHECK(v.starvation == g.starvation);
        if (v.a != g.a) CHECK(drift_penalty_objective(s, g.a, g.gamma, cfg, p_sc) == doctest::Approx(v.objective));
    }
}

TEST_CASE("episode-level scheduler invariants") {
    // a synthetic slot loop with a lossy link and a state norm that drifts
    const auto c = coeffs(0.05, 0.02, 0.1, 0.0005, 0.01);
    const double p_sc = 0.003;
    auto run = [&](double V, std::vector<int>* as) {
        SchedulerConfig cfg;
        cfg.V = V;
        cfg.recharge_period = 300;
        auto s = initial_state(cfg, Vec::Zero(4));
        Rng rng(5);
        std::bernoulli_distribution lost(0.2);
        std::normal_distribution<double> N(0.0, 0.05);
        Vec x = Vec::Zero(4);
        double sum_a = 0, sum_g = 0, used = 0;
        int transmissions = 0;
        for (std::size_t t = 0; t < 1000; ++t) {
            const auto d = decide(s, cfg, c, p_sc);
            if (d.a == 0 && !d.starvation) CHECK(d.epsilon <= cfg.delta);
            const bool drop = lost(rng);
            const bool delivered = d.a == 1 && !drop;
            for (int i = 0; i < 4; ++i) x[i] = N(rng);
            const double before = s.p_b;
            advance(s, d, delivered, x, cfg, p_sc);
            CHECK(s.p_b >= 0.0);
            CHECK(s.Q_a >= 0.0);
            if ((t + 1) % cfg.recharge_period != 0) used += before - s.p_b;
            else used = 0;
            CHECK(used <= cfg.p_b0 + 1e-12);
            sum_a += d.a;
            sum_g += d.gamma;
            transmissions += d.a;
            if (as) as->push_back(d.a);
            CHECK(sum_a <= sum_g + s.Q_a + 1e-9);
        }
        return transmissions;
    };
    int prev = 1 << 30;
    for (double V : {0.0, 2.0, 10.0, 20.0, 50.0}) {
        const int n = run(V, nullptr);
        CHECK(n <= prev);
        prev = n;
    }
}
