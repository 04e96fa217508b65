#pragma once

// LQR in the embedding space: lifted weights, the discrete algebraic Riccati
// equation, optimal latent actions and N_c-step plans for the actuator cache.

#include <vector>

#include "wncs/koopman.hpp"

namespace wncs::control {

struct LiftedWeights {
    Mat Q;  // q x q, blockdiag(Q, 0)
    Mat B;  // q' x q'
};

LiftedWeights lift_weights(const Mat& Q, const Mat& B, std::size_t q, std::size_t qp);

struct DareOptions {
    double tol = 1e-10;
    std::size_t max_iter = 10000;
};

struct LqrSolution {
    Mat P;                       // q x q
    Mat K;                       // q' x q
    double residual = 0.0;       // relative Riccati residual at P
    std::size_t iterations = 0;
    double spectral_radius = 0.0;  // of A - B K
};

class UnstabilizableModel : public Error {
public:
    using Error::Error;
};

// P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA, started from P = Q and symmetrised
// every iteration, until ||P_new - P||_F <= tol * max(1, ||P||_F).
LqrSolution solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                       const DareOptions& opt = {});

// ||P - (Q + A'PA - A'PB (R + B'PB)^{-1} B'PA)||_F / max(1, ||P||_F)
double riccati_residual(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, const Mat& P);
Mat lqr_gain(const Mat& A, const Mat& B, const Mat& R, const Mat& P);
double spectral_radius(const Mat& M);

// A model together with its regulator about the target state x0.
struct Regulator {
    const koopman::KoopmanModel* model = nullptr;
    LqrSolution lqr;
    Vec z0;
    Vec x0;
};

// Lifts (Q, B), solves the DARE on (Kx, Ku) and embeds x0. Throws
// UnstabilizableModel when the closed loop is not contractive.
Regulator make_regulator(const koopman::KoopmanModel& model, const Mat& Q, const Mat& B,
                         const Vec& x0, const DareOptions& opt = {});

struct PlannedAction {
    Vec w;                  // latent action
    Vec u;                  // decoded, clipped to u_max
    bool saturated = false; // DKAC division hit a near-zero gain
};

// w* = -K (z - z0); u* = clip(decode(w*)).
PlannedAction optimal_action(const Regulator& reg, const Vec& z);

// N_c actions along the nominal latent closed loop z_{k+1} = Kx z_k + Ku w*_k.
std::vector<PlannedAction> plan_horizon(const Regulator& reg, const Vec& z, std::size_t n_c);

// Original-space action of the DKUC or DKAC baseline at latent state z.
Vec baseline_action(koopman::ModelKind kind, const Regulator& reg, const Vec& z,
                    bool* saturated = nullptr);

}  // namespace wncs::control
