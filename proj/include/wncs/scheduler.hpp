#pragma once

// Drift-plus-penalty sensor scheduling with an age-of-information driven
// prediction-error constraint, a virtual transmission queue and a battery.

#include "wncs/errmodel.hpp"

namespace wncs::scheduler {

struct SchedulerConfig {
    double V = 10.0;
    double lambda = 1.0;
    double delta = 0.3;
    double p_s = 1e-5;          // sensing power per slot, W
    double p_b0 = 1.0;          // initial battery, W
    std::size_t recharge_period = 0;  // T'; 0 disables recharging

    void validate() const;
};

struct SchedulerState {
    double Q_a = 0.0;
    double beta = 0.0;  // AoI after the previous slot
    double p_b = 1.0;
    Vec x_last;
    std::size_t t = 0;
};

SchedulerState initial_state(const SchedulerConfig& cfg, const Vec& x_last);

double aoi_update(double beta_prev, int a);
double queue_update(double Q_a, double a, double gamma);
double battery_update(double p_b, double a, double p_sc, double p_s, std::size_t t,
                      std::size_t recharge_period, double p_b0);

double drift_penalty_objective(const SchedulerState& s, double a, double gamma,
                               const SchedulerConfig& cfg, double p_sc);

bool a0_feasible(const errmodel::ErrorPolyCoeffs& c, const Vec& x_last, double beta_prev, double delta);

struct Decision {
    int a = 0;
    double gamma = 0.0;
    bool a0_feasible = false;
    bool battery_ok = false;
    bool starvation = false;
    double epsilon = 0.0;  // eval_error at (|x_last|, 1 + beta_prev)
    double objective = 0.0;
    // eps(|x_last|, 1 + (1 - a) beta_prev) - delta = c1 a^2 + c2 a + c3
    double c1 = 0.0, c2 = 0.0, c3 = 0.0;
};

// Vertex enumeration over (a, gamma) in {(0,0), (0,1), (1,1)}.
Decision decide(const SchedulerState& s, const SchedulerConfig& cfg,
                const errmodel::ErrorPolyCoeffs& c, double p_sc);

// Exhaustive search over gamma in {0, 0.01, ..., 1} for each admissible binary a
// with a <= gamma, under the same feasibility rules as decide().
Decision decide_grid(const SchedulerState& s, const SchedulerConfig& cfg,
                     const errmodel::ErrorPolyCoeffs& c, double p_sc);

// Applies the slot outcome: `delivered` is a && SC success.
void advance(SchedulerState& s, const Decision& d, bool delivered, const Vec& x_now,
             const SchedulerConfig& cfg, double p_sc);

}  // namespace wncs::scheduler
