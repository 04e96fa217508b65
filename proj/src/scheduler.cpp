#include "wncs/scheduler.hpp"

#include <algorithm>
#include <cmath>

namespace wncs::scheduler {

void SchedulerConfig::validate() const {
    if (!(V >= 0.0)) throw Error("scheduler: V must be >= 0");
    if (!(delta > 0.0)) throw Error("scheduler: delta must be > 0");
    if (!(p_s >= 0.0)) throw Error("scheduler: p_s must be >= 0");
    if (!(p_b0 >= 0.0)) throw Error("scheduler: p_b0 must be >= 0");
}

SchedulerState initial_state(const SchedulerConfig& cfg, const Vec& x_last) {
    SchedulerState s;
    s.p_b = cfg.p_b0;
    s.x_last = x_last;
    return s;
}

double aoi_update(double beta_prev, int a) { return 1.0 + (1 - a) * beta_prev; }

double queue_update(double Q_a, double a, double gamma) { return std::max(Q_a - gamma, 0.0) + a; }

double battery_update(double p_b, double a, double p_sc, double p_s, std::size_t t,
                      std::size_t recharge_period, double p_b0) {
    if (recharge_period > 0 && (t + 1) % recharge_period == 0) return p_b0;
    return std::max(p_b - a * p_sc - p_s, 0.0);
}

double drift_penalty_objective(const SchedulerState& s, double a, double gamma,
                               const SchedulerConfig& cfg, double p_sc) {
    return cfg.V * gamma + s.Q_a * (a - gamma) - s.p_b * (a * p_sc + cfg.p_s) +
           s.beta * (1.0 - a);
}

bool a0_feasible(const errmodel::ErrorPolyCoeffs& c, const Vec& x_last, double beta_prev,
                 double delta) {
    return errmodel::eval_error(c, x_last.norm(), 1.0 + beta_prev) <= delta;
}

namespace {

Decision feasibility(const SchedulerState& s, const SchedulerConfig& cfg,
                     const errmodel::ErrorPolyCoeffs& c, double p_sc) {
    Decision d;
    const double n = s.x_last.norm();
    d.epsilon = errmodel::eval_error(c, n, 1.0 + s.beta);
    d.a0_feasible = d.epsilon <= cfg.delta;
    d.battery_ok = s.p_b >= p_sc + cfg.p_s;
    // quadratic in a through beta = 1 + (1 - a) beta_prev; exact for degree <= 2
    auto g = [&](double a) { return errmodel::eval_raw(c, n, 1.0 + (1.0 - a) * s.beta) - cfg.delta; };
    const double g0 = g(0.0), gh = g(0.5), g1 = g(1.0);
    d.c3 = g0;
    d.c1 = 2.0 * g1 - 4.0 * gh + 2.0 * g0;
    d.c2 = g1 - g0 - d.c1;
    return d;
}

}  // namespace

Decision decide(const SchedulerState& s, const SchedulerConfig& cfg,
                const errmodel::ErrorPolyCoeffs& c, double p_sc) {
    Decision d = feasibility(s, cfg, c, p_sc);
    struct Vertex {
        int a;
        double gamma;
    };
    static constexpr Vertex vertices[] = {{0, 0.0}, {0, 1.0}, {1, 1.0}};
    bool found = false;
    for (const auto& v : vertices) {
        if (v.a == 0 && !d.a0_feasible) continue;
        if (v.a == 1 && !d.battery_ok) continue;
        const double obj = drift_penalty_objective(s, v.a, v.gamma, cfg, p_sc);
        if (!found || obj < d.objective) {
            d.a = v.a;
            d.gamma = v.gamma;
            d.objective = obj;
            found = true;
        }
    }
    if (!found) {
        d.a = 0;
        d.gamma = 0.0;
        d.starvation = true;
        d.objective = drift_penalty_objective(s, 0, 0.0, cfg, p_sc);
    }
    return d;
}

Decision decide_grid(const SchedulerState& s, const SchedulerConfig& cfg,
                     const errmodel::ErrorPolyCoeffs& c, double p_sc) {
    Decision d = feasibility(s, cfg, c, p_sc);
    bool found = false;
    for (int a = 0; a <= 1; ++a) {
        if (a == 0 && !d.a0_feasible) continue;
        if (a == 1 && !d.battery_ok) continue;
        for (int g = 0; g <= 100; ++g) {
            const double gamma = g / 100.0;
            if (a > gamma) continue;
            const double obj = drift_penalty_objective(s, a, gamma, cfg, p_sc);
            if (!found || obj < d.objective) {
                d.a = a;
                d.gamma = gamma;
                d.objective = obj;
                found = true;
            }
        }
    }
    if (!found) {
        d.starvation = true;
        d.objective = drift_penalty_objective(s, 0, 0.0, cfg, p_sc);
    }
    return d;
}

void advance(SchedulerState& s, const Decision& d, bool delivered, const Vec& x_now,
             const SchedulerConfig& cfg, double p_sc) {
    s.Q_a = queue_update(s.Q_a, d.a, d.gamma);
    s.p_b = battery_update(s.p_b, d.a, p_sc, cfg.p_s, s.t, cfg.recharge_period, cfg.p_b0);
    s.beta = aoi_update(s.beta, delivered ? 1 : 0);
    if (delivered) s.x_last = x_now;
    ++s.t;
}

}  // namespace wncs::scheduler
