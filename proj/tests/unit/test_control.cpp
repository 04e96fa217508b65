#include <doctest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "wncs/control.hpp"

using namespace wncs;
using namespace wncs::control;

namespace {

Mat table_Q() { return Vec((Vec(4) << 20, 0.01, 5, 0.01).finished()).asDiagonal(); }
Mat table_B() { return 0.001 * Mat::Identity(2, 2); }

koopman::ModelShape small_shape(koopman::ModelKind kind) {
    koopman::ModelShape s;
    s.kind = kind;
    s.hidden = {16, 16};
    return s;
}

// A stable, controllable latent system for the regulator tests.
koopman::KoopmanModel stable_model(koopman::ModelKind kind, std::uint64_t seed) {
    auto m = koopman::KoopmanModel::create(small_shape(kind), seed, 5.0);
    Rng rng(seed);
    std::normal_distribution<double> N(0.0, 0.05);
    for (Eigen::Index i = 0; i < m.Kx.size(); ++i) m.Kx.data()[i] = N(rng);
    m.Kx.diagonal().array() += 0.95;
    for (Eigen::Index i = 0; i < m.Ku.size(); ++i) m.Ku.data()[i] = 4 * N(rng);
    return m;
}

}  // namespace

TEST_CASE("lifted weights") {
    const auto w = lift_weights(table_Q(), table_B(), 24, 2);
    CHECK(w.Q.rows() == 24);
    CHECK(w.Q.trace() == doctest::Approx(25.02).epsilon(1e-14));
    CHECK(w.B == table_B());
    Rng rng(1);
    std::normal_distribution<double> N;
    for (int t = 0; t < 20; ++t) {
        Vec z(24), z0(24);
        for (int i = 0; i < 24; ++i) {
            z[i] = N(rng);
            z0[i] = N(rng);
        }
        const Vec e = z - z0, ex = e.head(4);
        CHECK(e.dot(w.Q * e) == doctest::Approx(ex.dot(table_Q() * ex)).epsilon(1e-13));
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(w.Q);
    std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + 24);
    std::sort(ev.begin(), ev.end());
    for (int i = 0; i < 20; ++i) CHECK(std::abs(ev[static_cast<std::size_t>(i)]) < 1e-15);
    CHECK(ev[20] == doctest::Approx(0.01));
    CHECK(ev[23] == doctest::Approx(20.0));
    CHECK_THROWS_AS(lift_weights(table_Q(), Mat::Identity(3, 3), 24, 2), DimensionError);
}

TEST_CASE("scalar DARE gives the golden ratio") {
    const Mat one = Mat::Constant(1, 1, 1.0);
    const auto sol = solve_dare(one, one, one, one);
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    CHECK(std::abs(sol.P(0, 0) - phi) <= 1e-9);
    CHECK(std::abs(sol.K(0, 0) - phi / (1.0 + phi)) <= 1e-9);
    CHECK(sol.residual <= 1e-9);
    CHECK(sol.spectral_radius < 1.0);
}

TEST_CASE("zero dynamics give P = Q and zero gain") {
    const auto w = lift_weights(table_Q(), table_B(), 6, 2);
    Mat Ku(6, 2);
    Ku.setRandom();
    const auto sol = solve_dare(Mat::Zero(6, 6), Ku, w.Q, w.B);
    CHECK((sol.P - w.Q).cwiseAbs().maxCoeff() == 0.0);
    CHECK(sol.K.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("DARE on a random stabilisable system") {
    const auto m = stable_model(koopman::ModelKind::proposed, 3);
    const auto w = lift_weights(table_Q(), table_B(), m.q(), m.qp());
    const auto sol = solve_dare(m.Kx, m.Ku, w.Q, w.B);
    CHECK((sol.P - sol.P.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Mat> es(sol.P);
    CHECK(es.eigenvalues().minCoeff() >= -1e-9);
    CHECK(sol.residual <= 1e-8);
    CHECK(sol.spectral_radius < 1.0);
    CHECK(riccati_residual(m.Kx, m.Ku, w.Q, w.B, sol.P) == sol.residual);
    // scaling both weights leaves the gain unchanged
    const auto scaled = solve_dare(m.Kx, m.Ku, 7.0 * w.Q, 7.0 * w.B);
    CHECK((scaled.K - sol.K).cwiseAbs().maxCoeff() <= 1e-8 * (1.0 + sol.K.cwiseAbs().maxCoeff()));
}

TEST_CASE("unstabilisable systems are reported") {
    const Mat two = Mat::Constant(1, 1, 2.0);
    const Mat zero = Mat::Zero(1, 1);
    const Mat one = Mat::Constant(1, 1, 1.0);
    CHECK_THROWS_AS(solve_dare(two, zero, one, one, {1e-10, 2000}), UnstabilizableModel);
    auto m = koopman::KoopmanModel::create(small_shape(koopman::ModelKind::proposed), 1, 5.0);
    m.Kx = 1.5 * Mat::Identity(24, 24);
    m.Ku.setZero();
    CHECK_THROWS_AS(make_regulator(m, table_Q(), table_B(), Vec::Zero(4)), UnstabilizableModel);
}

TEST_CASE("optimal action and planning") {
    const auto m = stable_model(koopman::ModelKind::proposed, 5);
    const auto reg = make_regulator(m, table_Q(), table_B(), Vec::Zero(4));
    CHECK(reg.z0 == koopman::embed_state(m, Vec::Zero(4)));

    const auto at0 = optimal_action(reg, reg.z0);
    CHECK(at0.w.cwiseAbs().maxCoeff() == 0.0);
    CHECK(at0.u == dynamics::clip_action(m.action_decoder(Vec::Zero(2)), m.u_max));

    Vec x(4);
    x << 0.05, -0.02, 0.03, 0.01;
    const Vec z = koopman::embed_state(m, x);
    const auto a1 = optimal_action(reg, z);
    const auto a2 = optimal_action(reg, reg.z0 + 2.0 * (z - reg.z0));
    CHECK((a2.w - 2.0 * a1.w).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(a1.u.cwiseAbs().maxCoeff() <= m.u_max);

    // the latent closed loop contracts
    Vec zk = z;
    for (int k = 0; k < 200; ++k) zk = koopman::latent_step(m, zk, optimal_action(reg, zk).w);
    const double rho = reg.lqr.spectral_radius;
    if (std::pow(rho, 200) < 1e-4) CHECK((zk - reg.z0).norm() <= 1e-3 * (z - reg.z0).norm());

    const auto plan = plan_horizon(reg, z, 10);
    CHECK(plan.size() == 10);
    CHECK(plan.front().u == a1.u);
    const auto prefix = plan_horizon(reg, z, 4);
    for (std::size_t k = 0; k < 4; ++k) CHECK(prefix[k].u == plan[k].u);
    const auto still = plan_horizon(reg, reg.z0, 5);
    for (const auto& p : still) CHECK(p.u == at0.u);
    CHECK_THROWS_AS(plan_horizon(reg, z, 0), Error);
}

TEST_CASE("DKUC equals the proposed controller with identity action maps") {
    auto prop = stable_model(koopman::ModelKind::proposed, 9);
    auto kuc = stable_model(koopman::ModelKind::dkuc, 9);
    prop.action_encoder = nn::DenseNet::identity(2);
    prop.action_decoder = nn::DenseNet::identity(2);
    kuc.state_encoder = prop.state_encoder;
    kuc.Kx = prop.Kx;
    kuc.Ku = prop.Ku;
    const auto rp = make_regulator(prop, table_Q(), table_B(), Vec::Zero(4));
    const auto rk = make_regulator(kuc, table_Q(), table_B(), Vec::Zero(4));
    Vec x(4);
    x << 0.1, 0.0, -0.05, 0.2;
    const Vec z = koopman::embed_state(prop, x);
    CHECK(baseline_action(koopman::ModelKind::dkuc, rk, z) == optimal_action(rp, z).u);
    CHECK_THROWS_AS(baseline_action(koopman::ModelKind::dkac, rk, z), Error);
    CHECK_THROWS_AS(baseline_action(koopman::ModelKind::proposed, rp, z), Error);
}

TEST_CASE("DKAC divides the latent action by the auxiliary gain") {
    const auto m = stable_model(koopman::ModelKind::dkac, 4);
    const auto reg = make_regulator(m, table_Q(), table_B(), Vec::Zero(4));
    Vec x(4);
    x << 0.01, 0.0, 0.02, 0.0;
    const Vec z = koopman::embed_state(m, x);
    bool sat = true;
    const Vec u = baseline_action(koopman::ModelKind::dkac, reg, z, &sat);
    const Vec w = -reg.lqr.K * (z - reg.z0);
    const Vec expect = dynamics::clip_action(w.cwiseQuotient(m.aux(x)), m.u_max);
    CHECK((u - expect).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK_FALSE(sat);
}
