#include "wncs/dynamics.hpp"

#include <cmath>

namespace wncs::dynamics {

InputNonlinearity parse_nonlinearity(const std::string& name) {
    if (name == "tanh") return InputNonlinearity::tanh;
    if (name == "cubic") return InputNonlinearity::cubic;
    throw Error("unknown input nonlinearity '" + name + "' (expected tanh|cubic)");
}

std::string to_string(InputNonlinearity kind) {
    return kind == InputNonlinearity::tanh ? "tanh" : "cubic";
}

PlantKind parse_plant_kind(const std::string& name) {
    if (name == "double_pendulum" || name == "pendulum") return PlantKind::double_pendulum;
    if (name == "cartpole") return PlantKind::cartpole;
    throw Error("unknown plant '" + name + "' (expected double_pendulum|cartpole)");
}

std::string to_string(PlantKind kind) {
    return kind == PlantKind::double_pendulum ? "double_pendulum" : "cartpole";
}

double input_nonlinearity(double u, InputNonlinearity kind) {
    switch (kind) {
        case InputNonlinearity::tanh:
            return std::tanh(u);
        case InputNonlinearity::cubic:
            return u - u * u * u / 3.0;
    }
    return 0.0;
}

void PendulumParams::validate() const {
    if (!(m1 > 0 && m2 > 0 && j1 > 0 && j2 > 0 && gravity > 0 && spring_length > 0 &&
          spacing > 0 && spring_k > 0 && height > 0))
        throw Error("pendulum parameters must be strictly positive");
}

void CartpoleParams::validate() const {
    if (!(gravity > 0 && mass_cart > 0 && mass_pole > 0 && half_length > 0 && tau > 0))
        throw Error("cartpole parameters must be strictly positive");
}

Vec double_pendulum_deriv(const Vec& x, const Vec& u, const PendulumParams& p) {
    require_dim(x.size(), 4, "double_pendulum_deriv state");
    require_dim(u.size(), 2, "double_pendulum_deriv input");
    const double s = p.height;
    const double ks2 = p.spring_k * s * s / 4.0;
    const double offset = p.spring_k * s / 2.0 * (p.spring_length - p.spacing);
    const double s1 = std::sin(x[0]);
    const double s2 = std::sin(x[2]);
    const double h1 = input_nonlinearity(u[0], p.nonlinearity);
    const double h2 = input_nonlinearity(u[1], p.nonlinearity);

    Vec dx(4);
    dx[0] = x[1];
    dx[1] = (p.m1 * p.gravity * s / p.j1 - ks2 / p.j1) * s1 + offset / p.j1 + h1 / p.j1 +
            ks2 / p.j1 * s2;
    dx[2] = x[3];
    dx[3] = (p.m2 * p.gravity * s / p.j2 + ks2 / p.j2) * s2 - offset / p.j2 + h2 / p.j2 +
            ks2 / p.j2 * s1;
    return dx;
}

Vec rk4_pendulum(const Vec& x, const Vec& u, const PendulumParams& p, double dt) {
    const Vec k1 = double_pendulum_deriv(x, u, p);
    const Vec k2 = double_pendulum_deriv(x + 0.5 * dt * k1, u, p);
    const Vec k3 = double_pendulum_deriv(x + 0.5 * dt * k2, u, p);
    const Vec k4 = double_pendulum_deriv(x + dt * k3, u, p);
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Vec cartpole_step(const Vec& x, const Vec& u, const CartpoleParams& p) {
    require_dim(x.size(), 4, "cartpole_step state");
    require_dim(u.size(), 1, "cartpole_step input");
    const double total_mass = p.mass_cart + p.mass_pole;
    const double polemass_length = p.mass_pole * p.half_length;
    const double force = u[0];
    const double cos_t = std::cos(x[2]);
    const double sin_t = std::sin(x[2]);

    const double temp = (force + polemass_length * x[3] * x[3] * sin_t) / total_mass;
    const double theta_acc =
        (p.gravity * sin_t - cos_t * temp) /
        (p.half_length * (4.0 / 3.0 - p.mass_pole * cos_t * cos_t / total_mass));
    const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

    Vec next(4);
    next[0] = x[0] + p.tau * x[1];
    next[1] = x[1] + p.tau * x_acc;
    next[2] = x[2] + p.tau * x[3];
    next[3] = x[3] + p.tau * theta_acc;
    return next;
}

NoiseModel::NoiseModel(Mat covariance, std::uint64_t seed)
    : cov_(std::move(covariance)), rng_(seed) {
    if (cov_.rows() != cov_.cols()) throw DimensionError("noise covariance must be square");
    if (!cov_.isApprox(cov_.transpose(), 1e-12))
        throw Error("noise covariance must be symmetric");
    zero_ = cov_.isZero(0.0);
    if (!zero_) {
        Eigen::SelfAdjointEigenSolver<Mat> eig(cov_);
        if (eig.eigenvalues().minCoeff() < -1e-12)
            throw Error("noise covariance must be positive semidefinite");
        // symmetric square root handles semidefinite covariances
        factor_ = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                  eig.eigenvectors().transpose();
    }
}

NoiseModel NoiseModel::isotropic(Eigen::Index dim, double variance, std::uint64_t seed) {
    return NoiseModel(Mat::Identity(dim, dim) * variance, seed);
}

NoiseModel NoiseModel::none(Eigen::Index dim) { return NoiseModel(Mat::Zero(dim, dim), 0); }

Vec NoiseModel::sample() {
    if (zero_) return Vec::Zero(cov_.rows());
    Vec z(cov_.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal_(rng_);
    return factor_ * z;
}

Vec clip_action(const Vec& u, double u_max) { return u.cwiseMax(-u_max).cwiseMin(u_max); }

Vec Plant::step_nominal(const Vec& x, const Vec& u) const {
    const Vec uc = clip_action(u, u_max);
    if (kind == PlantKind::double_pendulum) return rk4_pendulum(x, uc, pendulum, dt);
    return cartpole_step(x, uc, cartpole);
}

Vec Plant::step(const Vec& x, const Vec& u, NoiseModel& noise) const {
    Vec next = step_nominal(x, u);
    if (!noise.is_zero()) next += noise.sample();
    if (!next.allFinite()) throw DivergedPlant("plant state became non-finite", x);
    return next;
}

double control_cost(const Vec& x, const Vec& u, const Mat& Q, const Mat& B, const Vec& x0) {
    require_dim(Q.rows(), x.size(), "control_cost Q");
    require_dim(Q.cols(), x.size(), "control_cost Q");
    require_dim(x0.size(), x.size(), "control_cost x0");
    require_dim(B.rows(), u.size(), "control_cost B");
    require_dim(B.cols(), u.size(), "control_cost B");
    const Vec e = x - x0;
    return e.dot(Q * e) + u.dot(B * u);
}

}  // namespace wncs::dynamics
