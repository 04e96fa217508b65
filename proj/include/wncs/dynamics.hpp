#pragma once

// Plant models: the spring-coupled inverted double pendulum (control enters
// through a static nonlinearity h'(u)) and the classic cartpole.

#include <optional>
#include <string>

#include "wncs/common.hpp"

namespace wncs::dynamics {

enum class InputNonlinearity { tanh, cubic };
enum class PlantKind { double_pendulum, cartpole };

InputNonlinearity parse_nonlinearity(const std::string& name);
std::string to_string(InputNonlinearity kind);
PlantKind parse_plant_kind(const std::string& name);
std::string to_string(PlantKind kind);

// tanh(u) or u - u^3/3.
double input_nonlinearity(double u, InputNonlinearity kind);

// Defaults are the tabulated simulation values. j1, j2 are moments of inertia.
struct PendulumParams {
    double m1 = 2.0;             // kg
    double m2 = 2.0;             // kg
    double j1 = 0.5;             // kg m^2
    double j2 = 0.5;             // kg m^2
    double gravity = 10.0;       // m/s^2
    double spring_length = 0.5;  // l', m
    double spacing = 0.4;        // b, m
    double spring_k = 2.0;       // k', N/m
    double height = 0.5;         // s, m
    InputNonlinearity nonlinearity = InputNonlinearity::tanh;

    void validate() const;
};

// Gym CartPole-v1 constants; the force is continuous instead of +-force_mag.
struct CartpoleParams {
    double gravity = 9.8;
    double mass_cart = 1.0;
    double mass_pole = 0.1;
    double half_length = 0.5;
    double tau = 0.02;

    void validate() const;
};

// State [theta1, dtheta1, theta2, dtheta2]; input [u1, u2] (N m).
Vec double_pendulum_deriv(const Vec& x, const Vec& u, const PendulumParams& p);

// State [position, velocity, angle, angular velocity]; input [force].
// One explicit Euler step with dt = p.tau, as in the gym environment.
Vec cartpole_step(const Vec& x, const Vec& u, const CartpoleParams& p = {});

// Gaussian process noise with covariance N. Owns its random stream.
class NoiseModel {
public:
    NoiseModel() = default;
    NoiseModel(Mat covariance, std::uint64_t seed);
    static NoiseModel isotropic(Eigen::Index dim, double variance, std::uint64_t seed);
    static NoiseModel none(Eigen::Index dim);

    bool is_zero() const { return zero_; }
    const Mat& covariance() const { return cov_; }
    Vec sample();

private:
    Mat cov_;
    Mat factor_;
    Rng rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    bool zero_ = true;
};

class DivergedPlant : public Error {
public:
    DivergedPlant(const std::string& what, Vec last_finite)
        : Error(what), last_finite_state(std::move(last_finite)) {}
    Vec last_finite_state;
};

// Plant description shared by data generation and closed-loop runs.
struct Plant {
    PlantKind kind = PlantKind::double_pendulum;
    PendulumParams pendulum{};
    CartpoleParams cartpole{};
    double dt = 0.02;
    double u_max = 5.0;

    Eigen::Index state_dim() const { return 4; }
    Eigen::Index action_dim() const { return kind == PlantKind::double_pendulum ? 2 : 1; }
    // One noiseless step of the discrete map f(x, u) after clipping u.
    Vec step_nominal(const Vec& x, const Vec& u) const;
    // x_{t+1} = f(x_t, u_t) + n_t. Throws DivergedPlant on non-finite output.
    Vec step(const Vec& x, const Vec& u, NoiseModel& noise) const;
};

// Classic fourth-order Runge-Kutta over one interval dt.
Vec rk4_pendulum(const Vec& x, const Vec& u, const PendulumParams& p, double dt);

Vec clip_action(const Vec& u, double u_max);

// (x - x0)' Q (x - x0) + u' B u
double control_cost(const Vec& x, const Vec& u, const Mat& Q, const Mat& B, const Vec& x0);

}  // namespace wncs::dynamics
