#include "wncs/control.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "wncs/dynamics.hpp"

namespace wncs::control {

LiftedWeights lift_weights(const Mat& Q, const Mat& B, std::size_t q, std::size_t qp) {
    if (Q.rows() != Q.cols()) throw DimensionError("lift_weights: Q must be square");
    if (B.rows() != B.cols()) throw DimensionError("lift_weights: B must be square");
    if (static_cast<std::size_t>(Q.rows()) > q)
        throw DimensionError("lift_weights: Q is larger than the latent dimension");
    if (static_cast<std::size_t>(B.rows()) != qp)
        throw DimensionError("lift_weights: B must match the latent action dimension");
    LiftedWeights w;
    const auto n = static_cast<Eigen::Index>(q);
    w.Q = Mat::Zero(n, n);
    w.Q.topLeftCorner(Q.rows(), Q.cols()) = Q;
    w.B = B;
    return w;
}

namespace {

Mat riccati_rhs(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, const Mat& P) {
    const Mat PA = P * A;
    const Mat PB = P * B;
    const Mat S = R + B.transpose() * PB;
    const Mat BtPA = B.transpose() * PA;
    return Q + A.transpose() * PA - BtPA.transpose() * S.ldlt().solve(BtPA);
}

void check_shapes(const Mat& A, const Mat& B, const Mat& Q, const Mat& R) {
    if (A.rows() != A.cols()) throw DimensionError("DARE: A must be square");
    if (B.rows() != A.rows()) throw DimensionError("DARE: B row count must match A");
    if (Q.rows() != A.rows() || Q.cols() != A.cols()) throw DimensionError("DARE: Q shape");
    if (R.rows() != B.cols() || R.cols() != B.cols()) throw DimensionError("DARE: R shape");
}

}  // namespace

double riccati_residual(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, const Mat& P) {
    check_shapes(A, B, Q, R);
    return (P - riccati_rhs(A, B, Q, R, P)).norm() / std::max(1.0, P.norm());
}

Mat lqr_gain(const Mat& A, const Mat& B, const Mat& R, const Mat& P) {
    const Mat S = R + B.transpose() * P * B;
    return S.ldlt().solve(B.transpose() * P * A);
}

double spectral_radius(const Mat& M) {
    if (M.size() == 0) return 0.0;
    Eigen::EigenSolver<Mat> es(M, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

LqrSolution solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                       const DareOptions& opt) {
    check_shapes(A, B, Q, R);
    LqrSolution sol;
    Mat P = Q;
    bool converged = false;
    for (std::size_t it = 1; it <= opt.max_iter; ++it) {
        Mat next = riccati_rhs(A, B, Q, R, P);
        next = 0.5 * (next + next.transpose()).eval();
        if (!next.allFinite()) {
            sol.iterations = it;
            break;
        }
        const double step = (next - P).stableNorm();
        P = std::move(next);
        sol.iterations = it;
        const double scale = P.stableNorm();
        if (!std::isfinite(scale)) break;
        if (step <= opt.tol * std::max(1.0, scale)) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream os;
        os << "DARE did not converge in " << sol.iterations << " iterations; open-loop spectral radius "
           << spectral_radius(A);
        if (P.allFinite()) os << ", closed-loop " << spectral_radius(A - B * lqr_gain(A, B, R, P));
        throw UnstabilizableModel(os.str());
    }
    sol.P = P;
    sol.K = lqr_gain(A, B, R, P);
    sol.residual = riccati_residual(A, B, Q, R, P);
    sol.spectral_radius = spectral_radius(A - B * sol.K);
    return sol;
}

Regulator make_regulator(const koopman::KoopmanModel& model, const Mat& Q, const Mat& B,
                         const Vec& x0, const DareOptions& opt) {
    const auto w = lift_weights(Q, B, model.q(), model.qp());
    Regulator reg;
    reg.model = &model;
    reg.lqr = solve_dare(model.Kx, model.Ku, w.Q, w.B, opt);
    if (!(reg.lqr.spectral_radius < 1.0)) {
        std::ostringstream os;
        os << "closed-loop latent spectral radius " << reg.lqr.spectral_radius
           << " is not below 1 (open loop " << spectral_radius(model.Kx) << ")";
        throw UnstabilizableModel(os.str());
    }
    reg.x0 = x0;
    reg.z0 = koopman::embed_state(model, x0);
    return reg;
}

PlannedAction optimal_action(const Regulator& reg, const Vec& z) {
    const auto& m = *reg.model;
    require_dim(z.size(), static_cast<Eigen::Index>(m.q()), "optimal_action");
    PlannedAction a;
    a.w = -reg.lqr.K * (z - reg.z0);
    const Vec x = z.head(static_cast<Eigen::Index>(m.D()));
    a.u = dynamics::clip_action(koopman::decode_action(m, a.w, &x, &a.saturated), m.u_max);
    return a;
}

std::vector<PlannedAction> plan_horizon(const Regulator& reg, const Vec& z, std::size_t n_c) {
    if (n_c == 0) throw Error("plan_horizon: N_c must be >= 1");
    std::vector<PlannedAction> plan;
    plan.reserve(n_c);
    Vec zk = z;
    for (std::size_t k = 0; k < n_c; ++k) {
        plan.push_back(optimal_action(reg, zk));
        if (k + 1 < n_c) zk = koopman::latent_step(*reg.model, zk, plan.back().w);
    }
    return plan;
}

Vec baseline_action(koopman::ModelKind kind, const Regulator& reg, const Vec& z, bool* saturated) {
    if (kind == koopman::ModelKind::proposed)
        throw Error("baseline_action: expected a baseline kind (dkuc or dkac)");
    if (reg.model->kind() != kind)
        throw Error("baseline_action: regulator was built for a " +
                    koopman::to_string(reg.model->kind()) + " model");
    const auto a = optimal_action(reg, z);
    if (saturated) *saturated = a.saturated;
    return a.u;
}

}  // namespace wncs::control
