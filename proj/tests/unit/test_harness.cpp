#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "wncs/harness.hpp"

using namespace wncs;
using namespace wncs::harness;

namespace {

struct Fixture {
    koopman::KoopmanModel model;
    control::Regulator reg;
    errmodel::ErrorPolyCoeffs coeffs;
    ExperimentConfig cfg;
    Context ctx;

    Fixture() {
        koopman::ModelShape s;
        s.hidden = {16, 16};
        model = koopman::KoopmanModel::create(s, 3, 5.0);
        Rng rng(3);
        std::normal_distribution<double> N(0.0, 0.02);
        for (Eigen::Index i = 0; i < model.Kx.size(); ++i) model.Kx.data()[i] = N(rng);
        model.Kx.diagonal().array() += 0.9;
        for (Eigen::Index i = 0; i < model.Ku.size(); ++i) model.Ku.data()[i] = 5 * N(rng);
        cfg = default_config();
        cfg.T = 60;
        cfg.episodes = 3;
        cfg.n_c = 8;
        cfg.noise_variance = 1e-6;
        cfg.init_box = {Vec::Constant(4, -0.02), Vec::Constant(4, 0.02)};
        reg = control::make_regulator(model, cfg.Q, cfg.B, cfg.x0, cfg.dare);
        coeffs.degree = 2;
        coeffs.alpha = (Vec(5) << 0.05, 0.01, 0.0, 0.0005, 0.0).finished();
        rebuild();
    }
    void rebuild() { ctx = make_context(cfg, reg, coeffs); }
};

std::vector<std::map<std::string, double>> read_csv(const std::filesystem::path& file) {
    std::ifstream is(file);
    std::string line;
    std::getline(is, line);
    std::vector<std::string> names;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) names.push_back(cell);
    }
    std::vector<std::map<std::string, double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) break;
        std::stringstream ss(line);
        std::string cell;
        std::map<std::string, double> row;
        for (const auto& n : names) {
            std::getline(ss, cell, ',');
            row[n] = std::stod(cell);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

TEST_CASE("total cost arithmetic") {
    std::vector<StepRecord> r(2);
    r[0].J = 1;
    r[0].a = 1;
    r[1].J = 3;
    r[1].a = 0;
    CHECK(total_cost(r, 1.0) == 2.5);
    for (auto& x : r) x.J = 0, x.a = 0;
    CHECK(total_cost(r, 1.0) == 0.0);
    CHECK_THROWS_AS(total_cost({}, 1.0), Error);
}

TEST_CASE("actuator fallbacks") {
    CacheState cache;
    auto empty = actuator_fallback(Fallback::cache, cache, 0, 2);
    CHECK(empty.empty);
    CHECK(empty.u == Vec::Zero(2));
    cache.has_plan = true;
    cache.t_prime = 10;
    for (int k = 0; k < 3; ++k) cache.plan.push_back(Vec::Constant(2, 0.1 * (k + 1)));
    cache.last_received = cache.plan.front();

    auto head = actuator_fallback(Fallback::cache, cache, 10, 2);
    CHECK(head.u == cache.plan[0]);
    CHECK(head.offset == 0);
    auto mid = actuator_fallback(Fallback::cache, cache, 12, 2);
    CHECK(mid.u == cache.plan[2]);
    CHECK_FALSE(mid.overflow);
    auto over = actuator_fallback(Fallback::cache, cache, 15, 2);
    CHECK(over.u == cache.plan.back());
    CHECK(over.overflow);
    CHECK(actuator_fallback(Fallback::zero, cache, 12, 2).u == Vec::Zero(2));
    CHECK(actuator_fallback(Fallback::hold, cache, 14, 2).u == cache.last_received);

    CHECK(parse_fallback("b1") == Fallback::zero);
    CHECK(parse_fallback("b2") == Fallback::hold);
    CHECK_THROWS_AS(parse_fallback("nope"), Error);
}

TEST_CASE("reliable loop") {
    Fixture f;
    f.cfg.force_schedule = true;
    f.cfg.sc.mode = LinkMode::up;
    f.cfg.ca.mode = LinkMode::up;
    f.rebuild();
    const auto ep = run_episode(f.cfg, f.ctx, 0);
    REQUIRE(ep.records.size() == f.cfg.T);
    for (const auto& r : ep.records) {
        CHECK(r.x_tilde == r.x);
        CHECK(r.u_tilde == r.u);
        CHECK(r.beta == 1.0);
        CHECK(r.ca_success);
    }
    CHECK(check_episode_invariants(ep, f.cfg, f.ctx).empty());
}

TEST_CASE("blocked sensor link") {
    Fixture f;
    f.cfg.force_schedule = true;
    f.cfg.sc.mode = LinkMode::down;
    f.cfg.ca.mode = LinkMode::up;
    f.rebuild();
    const auto ep = run_episode(f.cfg, f.ctx, 1);
    REQUIRE(ep.records.size() == f.cfg.T);
    // independent latent rollout from the initial state
    Vec z = koopman::embed_state(f.model, ep.x_initial);
    for (std::size_t t = 0; t < ep.records.size(); ++t) {
        const auto& r = ep.records[t];
        CHECK(r.sc_outage);
        CHECK(r.beta == static_cast<double>(t + 1));
        CHECK((r.x_tilde - z.head(4)).cwiseAbs().maxCoeff() == 0.0);
        z = koopman::latent_step(f.model, z, control::optimal_action(f.reg, z).w);
    }
    CHECK(check_episode_invariants(ep, f.cfg, f.ctx).empty());
}

TEST_CASE("consecutive actuator failures replay the cached plan") {
    Fixture f;
    f.cfg.force_schedule = true;
    f.cfg.sc.mode = LinkMode::up;
    for (std::size_t k : {1u, 3u, 7u, 12u}) {
        f.cfg.ca_burst = k;
        f.rebuild();
        const auto ep = run_episode(f.cfg, f.ctx, 0);
        for (std::size_t t0 = 0; t0 < ep.records.size(); t0 += k + 1) {
            const auto plan =
                control::plan_horizon(f.reg, koopman::embed_state(f.model, ep.records[t0].x), f.cfg.n_c);
            for (std::size_t j = 0; j <= k && t0 + j < ep.records.size(); ++j) {
                const auto& r = ep.records[t0 + j];
                CHECK(r.ca_success == (j == 0));
                const auto& expect = plan[std::min(j, plan.size() - 1)].u;
                CHECK(r.u_tilde == expect);
                CHECK(r.overflow == (j >= plan.size()));
            }
        }
        CHECK(check_episode_invariants(ep, f.cfg, f.ctx).empty());
    }
}

TEST_CASE("sampled links respect the invariants") {
    Fixture f;
    f.cfg.sc.outage_target = 0.2;
    f.cfg.ca.outage_target = 0.2;
    for (auto fb : {Fallback::cache, Fallback::zero, Fallback::hold}) {
        f.cfg.fallback = fb;
        f.rebuild();
        std::vector<Episode> eps;
        run_episodes(f.cfg, f.ctx, &eps);
        for (const auto& ep : eps) CHECK(check_episode_invariants(ep, f.cfg, f.ctx).empty());
    }
}

TEST_CASE("trace replay and metric oracles") {
    Fixture f;
    f.cfg.sc.outage_target = 0.1;
    f.cfg.ca.outage_target = 0.1;
    f.cfg.sched.V = 2.0;
    f.rebuild();
    const auto ep = run_episode(f.cfg, f.ctx, 2);
    const auto dir = std::filesystem::temp_directory_path() / "wncs_harness_test";
    std::filesystem::create_directories(dir);
    write_episode_csv(ep, dir / "ep.csv");
    const auto rows = read_csv(dir / "ep.csv");
    REQUIRE(rows.size() == ep.records.size());

    double j = 0, a = 0;
    for (const auto& row : rows) {
        Vec xt(4), ut(2);
        for (int i = 0; i < 4; ++i) xt[i] = row.at("x_tilde_" + std::to_string(i));
        for (int i = 0; i < 2; ++i) ut[i] = row.at("u_tilde_" + std::to_string(i));
        const Vec e = xt - f.cfg.x0;
        const double Jr = e.dot(f.cfg.Q * e) + ut.dot(f.cfg.B * ut);
        CHECK(std::abs(Jr - row.at("J")) <= 1e-12 * (1 + Jr));
        j += row.at("J");
        a += row.at("a");
    }
    const auto m = episode_metrics(ep, f.cfg);
    const double replay = (j + f.cfg.sched.lambda * a) / static_cast<double>(rows.size());
    CHECK(std::abs(replay - m.total_cost) <= 1e-12 * (1 + replay));

    // two-pass AoI statistics
    double mean = 0;
    for (const auto& row : rows) mean += row.at("beta");
    mean /= static_cast<double>(rows.size());
    double var = 0;
    for (const auto& row : rows) var += (row.at("beta") - mean) * (row.at("beta") - mean);
    var /= static_cast<double>(rows.size());
    CHECK(m.aoi_mean == doctest::Approx(mean).epsilon(1e-14));
    CHECK(m.aoi_var == doctest::Approx(var).epsilon(1e-12));

    const auto agg = aggregate_metrics({m});
    CHECK(agg.episodes == 1);
    CHECK(agg.total_cost == m.total_cost);
    CHECK(agg.control_cost == m.control_cost);
    CHECK(agg.aoi_mean == m.aoi_mean);
    CHECK(agg.aoi_var == m.aoi_var);
    CHECK(agg.transmissions == m.transmissions);
    CHECK(agg.total_cost_var == 0.0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("episodes are deterministic") {
    Fixture f;
    f.cfg.sc.outage_target = 0.05;
    f.cfg.ca.outage_target = 0.05;
    f.cfg.episodes = 5;
    f.rebuild();
    std::vector<Episode> a, b;
    run_episodes(f.cfg, f.ctx, &a);
    run_episodes(f.cfg, f.ctx, &b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].records.size() == b[i].records.size());
        for (std::size_t t = 0; t < a[i].records.size(); ++t) {
            CHECK(a[i].records[t].x == b[i].records[t].x);
            CHECK(a[i].records[t].u_tilde == b[i].records[t].u_tilde);
        }
        const auto single = run_episode(f.cfg, f.ctx, i);
        CHECK(single.records.back().x == a[i].records.back().x);
    }
}

TEST_CASE("configuration round trip") {
    auto cfg = default_config();
    cfg.T = 123;
    cfg.sched.V = 20;
    cfg.sc.outage_target = 1e-4;
    cfg.fallback = Fallback::hold;
    cfg.degrees = {1, 3};
    const auto back = from_json(to_json(cfg), default_config());
    CHECK(to_json(back) == to_json(cfg));
    CHECK(back.T == 123);
    CHECK(back.fallback == Fallback::hold);
    CHECK(back.Q == cfg.Q);

    auto bad = to_json(cfg);
    bad["scheduler"]["Vee"] = 1;
    CHECK_THROWS_AS(from_json(bad, default_config()), Error);
    nlohmann::json partial = {{"episodes", {{"T", 77}}}};
    const auto p = from_json(partial, default_config());
    CHECK(p.T == 77);
    CHECK(p.sched.V == default_config().sched.V);

    const auto cart = default_config(dynamics::PlantKind::cartpole);
    CHECK(cart.plant.action_dim() == 1);
    CHECK(cart.Q.rows() == 4);
    CHECK(to_json(from_json(to_json(cart), default_config())) == to_json(cart));
}

TEST_CASE("sweep axes") {
    Fixture f;
    f.cfg.episodes = 2;
    f.cfg.T = 30;
    CHECK(run_sweep(f.cfg, f.reg, f.coeffs, SweepAxis::outage, {}).empty());
    const auto rows = run_sweep(f.cfg, f.reg, f.coeffs, SweepAxis::outage, {1e-4, 1e-1});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].p_sc > rows[1].p_sc);
    const auto ca = run_sweep(f.cfg, f.reg, f.coeffs, SweepAxis::ca_failures, {2});
    CHECK(ca.size() == 3);
    const auto kap = run_sweep(f.cfg, f.reg, f.coeffs, SweepAxis::kappa, {3, 5, 10}, {10, 20});
    REQUIRE(kap.size() == 6);
    for (std::size_t i = 0; i + 1 < kap.size(); ++i)
        if (kap[i].gamma0_db == kap[i + 1].gamma0_db) CHECK(kap[i].p_sc > kap[i + 1].p_sc);
    CHECK(parse_axis("ca-failures") == SweepAxis::ca_failures);
    CHECK_THROWS_AS(parse_axis("bogus"), Error);
}
