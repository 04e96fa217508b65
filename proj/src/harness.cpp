#include "wncs/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace wncs::harness {

using nlohmann::json;

Fallback parse_fallback(const std::string& name) {
    if (name == "cache") return Fallback::cache;
    if (name == "zero" || name == "b1") return Fallback::zero;
    if (name == "hold" || name == "b2") return Fallback::hold;
    throw Error("unknown fallback '" + name + "' (expected cache, zero or hold)");
}

std::string to_string(Fallback f) {
    switch (f) {
        case Fallback::cache: return "cache";
        case Fallback::zero: return "zero";
        case Fallback::hold: return "hold";
    }
    return "?";
}

LinkMode parse_link_mode(const std::string& name) {
    if (name == "sampled") return LinkMode::sampled;
    if (name == "up") return LinkMode::up;
    if (name == "down") return LinkMode::down;
    throw Error("unknown link mode '" + name + "' (expected sampled, up or down)");
}

std::string to_string(LinkMode m) {
    switch (m) {
        case LinkMode::sampled: return "sampled";
        case LinkMode::up: return "up";
        case LinkMode::down: return "down";
    }
    return "?";
}

channel::ChannelParams LinkConfig::params() const {
    return channel::ChannelParams::from_config(kappa, n0_dbm_per_hz, bandwidth_hz, gamma0_db,
                                               outage_target);
}

namespace {

koopman::StateBox symmetric_box(std::initializer_list<double> half) {
    koopman::StateBox b;
    b.high = Eigen::Map<const Vec>(half.begin(), static_cast<Eigen::Index>(half.size()));
    b.low = -b.high;
    return b;
}

void check_box(const koopman::StateBox& b, Eigen::Index dim, const char* what) {
    require_dim(b.low.size(), dim, what);
    require_dim(b.high.size(), dim, what);
    if (!(b.low.array() <= b.high.array()).all())
        throw Error(std::string(what) + ": low must not exceed high");
}

void check_link(const LinkConfig& l, const char* what) {
    try {
        l.params().validate();
    } catch (const Error& e) {
        throw Error(std::string(what) + ": " + e.what());
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    if (plant.kind == dynamics::PlantKind::double_pendulum) plant.pendulum.validate();
    else plant.cartpole.validate();
    if (!(plant.dt > 0.0)) throw Error("plant.dt must be > 0");
    if (!(plant.u_max > 0.0)) throw Error("plant.u_max must be > 0");
    if (!(noise_variance >= 0.0)) throw Error("noise_variance must be >= 0");
    const auto D = plant.state_dim();
    const auto Dp = plant.action_dim();
    if (shape.state_dim != static_cast<std::size_t>(D) ||
        shape.action_dim != static_cast<std::size_t>(Dp))
        throw DimensionError("model dimensions do not match the plant");
    if (data_trajectories == 0 || data_steps == 0) throw Error("data counts must be >= 1");
    if (!(data_action_max >= 0.0)) throw Error("data.action_max must be >= 0");
    check_box(data_box, D, "data box");
    check_box(err_box, D, "error box");
    check_box(init_box, D, "initial-state box");
    require_dim(Q.rows(), D, "Q");
    require_dim(Q.cols(), D, "Q");
    require_dim(B.rows(), Dp, "B");
    require_dim(B.cols(), Dp, "B");
    require_dim(x0.size(), D, "x0");
    if (n_c == 0) throw Error("N_c must be >= 1");
    if (T == 0) throw Error("T must be >= 1");
    if (episodes == 0) throw Error("episodes must be >= 1");
    if (err_samples == 0 || beta_max == 0) throw Error("error sampling counts must be >= 1");
    errmodel::feature_count(degree);
    for (int d : degrees) errmodel::feature_count(d);
    sched.validate();
    check_link(sc, "sc link");
    check_link(ca, "ca link");
}

ExperimentConfig default_config(dynamics::PlantKind kind) {
    ExperimentConfig c;
    c.plant.kind = kind;
    if (kind == dynamics::PlantKind::double_pendulum) {
        c.plant.u_max = 5.0;
        c.Q = Vec((Vec(4) << 20.0, 0.01, 5.0, 0.01).finished()).asDiagonal();
        c.data_box = symmetric_box({M_PI, 2.0, M_PI, 2.0});
        c.err_box = symmetric_box({0.1, 0.1, 0.1, 0.1});
        c.init_box = symmetric_box({0.1, 0.1, 0.1, 0.1});
    } else {
        c.plant.u_max = 10.0;
        c.Q = Vec((Vec(4) << 1.0, 0.1, 10.0, 0.1).finished()).asDiagonal();
        c.data_box = symmetric_box({1.0, 1.0, 0.2, 1.0});
        c.err_box = symmetric_box({0.1, 0.1, 0.05, 0.1});
        c.init_box = symmetric_box({0.1, 0.1, 0.05, 0.1});
    }
    const auto Dp = c.plant.action_dim();
    c.shape.state_dim = 4;
    c.shape.action_dim = static_cast<std::size_t>(Dp);
    c.shape.action_latent = static_cast<std::size_t>(Dp);
    c.B = 0.001 * Mat::Identity(Dp, Dp);
    c.x0 = Vec::Zero(4);
    return c;
}

// --- config (de)serialisation ----------------------------------------------

namespace {

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec json_vec(const json& j, const char* what) {
    if (!j.is_array()) throw Error(std::string(what) + " must be an array of numbers");
    Vec v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw Error(std::string(what) + " must be an array of numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

bool is_diagonal(const Mat& m) { return (m - Mat(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0; }

json mat_json(const Mat& m) {
    if (m.rows() == m.cols() && is_diagonal(m)) return vec_json(m.diagonal());
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_json(m.row(r).transpose()));
    return rows;
}

// A flat array is read as a diagonal, an array of arrays as a full matrix.
Mat json_mat(const json& j, const char* what) {
    if (!j.is_array() || j.empty()) throw Error(std::string(what) + " must be a non-empty array");
    if (!j[0].is_array()) return json_vec(j, what).asDiagonal();
    const auto n = static_cast<Eigen::Index>(j.size());
    const auto m = static_cast<Eigen::Index>(j[0].size());
    Mat out(n, m);
    for (Eigen::Index r = 0; r < n; ++r) {
        const Vec row = json_vec(j[static_cast<std::size_t>(r)], what);
        if (row.size() != m) throw Error(std::string(what) + ": ragged matrix");
        out.row(r) = row.transpose();
    }
    return out;
}

json box_json(const koopman::StateBox& b) { return {{"low", vec_json(b.low)}, {"high", vec_json(b.high)}}; }

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw Error("config: " + where() + " must be an object");
        for (auto it = j_.begin(); it != j_.end(); ++it) keys_.push_back(it.key());
    }
    ~Reader() = default;

    bool has(const char* key) { return take(key) != nullptr; }

    template <class T>
    void get(const char* key, T& out) {
        const json* v = take(key);
        if (!v) return;
        try {
            out = v->get<T>();
        } catch (const json::exception&) {
            throw Error("config: bad value for " + where(key));
        }
    }

    void get_vec(const char* key, Vec& out) {
        if (const json* v = take(key)) out = json_vec(*v, where(key).c_str());
    }
    void get_mat(const char* key, Mat& out) {
        if (const json* v = take(key)) out = json_mat(*v, where(key).c_str());
    }
    void get_box(const char* key, koopman::StateBox& out) {
        if (const json* v = take(key)) {
            Reader r(*v, where(key));
            r.get_vec("low", out.low);
            r.get_vec("high", out.high);
            r.finish();
        }
    }
    template <class F>
    void get_enum(const char* key, F parse) {
        if (const json* v = take(key)) {
            if (!v->is_string()) throw Error("config: " + where(key) + " must be a string");
            parse(v->get<std::string>());
        }
    }
    template <class F>
    void section(const char* key, F body) {
        if (const json* v = take(key)) {
            Reader r(*v, where(key));
            body(r);
            r.finish();
        }
    }

    void finish() const {
        for (const auto& k : keys_)
            if (std::find(used_.begin(), used_.end(), k) == used_.end())
                throw Error("config: unknown key " + where(k.c_str()));
    }

private:
    const json* take(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.emplace_back(key);
        return &*it;
    }
    std::string where(const char* key = nullptr) const {
        std::string p = path_.empty() ? "" : path_;
        if (key) p += (p.empty() ? "" : ".") + std::string(key);
        return p.empty() ? "<root>" : p;
    }

    const json& j_;
    std::string path_;
    std::vector<std::string> keys_;
    std::vector<std::string> used_;
};

json link_json(const LinkConfig& l) {
    return {{"kappa", l.kappa},         {"n0_dbm_per_hz", l.n0_dbm_per_hz},
            {"bandwidth_hz", l.bandwidth_hz}, {"gamma0_db", l.gamma0_db},
            {"outage_target", l.outage_target}, {"mode", to_string(l.mode)}};
}

void read_link(Reader& r, LinkConfig& l) {
    r.get("kappa", l.kappa);
    r.get("n0_dbm_per_hz", l.n0_dbm_per_hz);
    r.get("bandwidth_hz", l.bandwidth_hz);
    r.get("gamma0_db", l.gamma0_db);
    r.get("outage_target", l.outage_target);
    r.get_enum("mode", [&](const std::string& s) { l.mode = parse_link_mode(s); });
}

}  // namespace

json to_json(const ExperimentConfig& c) {
    const auto& p = c.plant.pendulum;
    const auto& cp = c.plant.cartpole;
    json j;
    j["plant"] = {{"kind", dynamics::to_string(c.plant.kind)},
                  {"nonlinearity", dynamics::to_string(p.nonlinearity)},
                  {"dt", c.plant.dt},
                  {"u_max", c.plant.u_max},
                  {"noise_variance", c.noise_variance},
                  {"pendulum",
                   {{"m1", p.m1}, {"m2", p.m2}, {"j1", p.j1}, {"j2", p.j2}, {"gravity", p.gravity},
                    {"spring_length", p.spring_length}, {"spacing", p.spacing},
                    {"spring_k", p.spring_k}, {"height", p.height}}},
                  {"cartpole",
                   {{"gravity", cp.gravity}, {"mass_cart", cp.mass_cart}, {"mass_pole", cp.mass_pole},
                    {"half_length", cp.half_length}, {"tau", cp.tau}}}};
    j["model"] = {{"kind", koopman::to_string(c.shape.kind)},
                  {"latent_extra", c.shape.latent_extra},
                  {"action_latent", c.shape.action_latent},
                  {"hidden", c.shape.hidden},
                  {"seed", c.model_seed}};
    j["data"] = {{"trajectories", c.data_trajectories},
                 {"steps", c.data_steps},
                 {"box", box_json(c.data_box)},
                 {"action_max", c.data_action_max},
                 {"seed", c.data_seed}};
    const auto& t = c.training;
    j["training"] = {{"horizon", t.horizon},       {"batch_size", t.batch_size},
                     {"learning_rate", t.learning_rate}, {"epochs", t.epochs},
                     {"window_stride", t.window_stride}, {"seed", t.seed},
                     {"eval_windows", t.eval_windows},
                     {"final_learning_rate", t.final_learning_rate},
                     {"refit_operators", t.refit_operators}};
    j["regulator"] = {{"Q", mat_json(c.Q)},          {"B", mat_json(c.B)},
                      {"x0", vec_json(c.x0)},        {"n_c", c.n_c},
                      {"dare_tol", c.dare.tol},      {"dare_max_iter", c.dare.max_iter}};
    j["error"] = {{"samples", c.err_samples}, {"beta_max", c.beta_max}, {"degrees", c.degrees},
                  {"degree", c.degree},       {"box", box_json(c.err_box)}, {"seed", c.err_seed}};
    j["scheduler"] = {{"V", c.sched.V},         {"lambda", c.sched.lambda},
                      {"delta", c.sched.delta}, {"p_s", c.sched.p_s},
                      {"p_b0", c.sched.p_b0},   {"recharge_period", c.sched.recharge_period}};
    j["sc"] = link_json(c.sc);
    j["ca"] = link_json(c.ca);
    j["episodes"] = {{"fallback", to_string(c.fallback)},
                     {"T", c.T},
                     {"count", c.episodes},
                     {"seed", c.seed},
                     {"init_box", box_json(c.init_box)},
                     {"force_schedule", c.force_schedule},
                     {"ca_burst", c.ca_burst}};
    j["artifacts"] = {{"dataset", c.dataset_path}, {"model", c.model_path}, {"coeffs", c.coeffs_path}};
    return j;
}

ExperimentConfig from_json(const json& j, const ExperimentConfig& base) {
    ExperimentConfig c = base;
    Reader root(j, "");
    root.section("plant", [&](Reader& r) {
        r.get_enum("kind", [&](const std::string& s) {
            const auto kind = dynamics::parse_plant_kind(s);
            if (kind != c.plant.kind) {
                // switching plants resets the plant-dependent defaults
                const auto keep = c;
                c = default_config(kind);
                c.shape.kind = keep.shape.kind;
            }
        });
        r.get_enum("nonlinearity",
                   [&](const std::string& s) { c.plant.pendulum.nonlinearity = dynamics::parse_nonlinearity(s); });
        r.get("dt", c.plant.dt);
        r.get("u_max", c.plant.u_max);
        r.get("noise_variance", c.noise_variance);
        r.section("pendulum", [&](Reader& q) {
            auto& p = c.plant.pendulum;
            q.get("m1", p.m1);
            q.get("m2", p.m2);
            q.get("j1", p.j1);
            q.get("j2", p.j2);
            q.get("gravity", p.gravity);
            q.get("spring_length", p.spring_length);
            q.get("spacing", p.spacing);
            q.get("spring_k", p.spring_k);
            q.get("height", p.height);
        });
        r.section("cartpole", [&](Reader& q) {
            auto& p = c.plant.cartpole;
            q.get("gravity", p.gravity);
            q.get("mass_cart", p.mass_cart);
            q.get("mass_pole", p.mass_pole);
            q.get("half_length", p.half_length);
            q.get("tau", p.tau);
        });
    });
    root.section("model", [&](Reader& r) {
        r.get_enum("kind", [&](const std::string& s) { c.shape.kind = koopman::parse_model_kind(s); });
        r.get("latent_extra", c.shape.latent_extra);
        r.get("action_latent", c.shape.action_latent);
        r.get("hidden", c.shape.hidden);
        r.get("seed", c.model_seed);
    });
    root.section("data", [&](Reader& r) {
        r.get("trajectories", c.data_trajectories);
        r.get("steps", c.data_steps);
        r.get_box("box", c.data_box);
        r.get("action_max", c.data_action_max);
        r.get("seed", c.data_seed);
    });
    root.section("training", [&](Reader& r) {
        auto& t = c.training;
        r.get("horizon", t.horizon);
        r.get("batch_size", t.batch_size);
        r.get("learning_rate", t.learning_rate);
        r.get("epochs", t.epochs);
        r.get("window_stride", t.window_stride);
        r.get("seed", t.seed);
        r.get("eval_windows", t.eval_windows);
        r.get("final_learning_rate", t.final_learning_rate);
        r.get("refit_operators", t.refit_operators);
    });
    root.section("regulator", [&](Reader& r) {
        r.get_mat("Q", c.Q);
        r.get_mat("B", c.B);
        r.get_vec("x0", c.x0);
        r.get("n_c", c.n_c);
        r.get("dare_tol", c.dare.tol);
        r.get("dare_max_iter", c.dare.max_iter);
    });
    root.section("error", [&](Reader& r) {
        r.get("samples", c.err_samples);
        r.get("beta_max", c.beta_max);
        r.get("degrees", c.degrees);
        r.get("degree", c.degree);
        r.get_box("box", c.err_box);
        r.get("seed", c.err_seed);
    });
    root.section("scheduler", [&](Reader& r) {
        r.get("V", c.sched.V);
        r.get("lambda", c.sched.lambda);
        r.get("delta", c.sched.delta);
        r.get("p_s", c.sched.p_s);
        r.get("p_b0", c.sched.p_b0);
        r.get("recharge_period", c.sched.recharge_period);
    });
    root.section("sc", [&](Reader& r) { read_link(r, c.sc); });
    root.section("ca", [&](Reader& r) { read_link(r, c.ca); });
    root.section("episodes", [&](Reader& r) {
        r.get_enum("fallback", [&](const std::string& s) { c.fallback = parse_fallback(s); });
        r.get("T", c.T);
        r.get("count", c.episodes);
        r.get("seed", c.seed);
        r.get_box("init_box", c.init_box);
        r.get("force_schedule", c.force_schedule);
        r.get("ca_burst", c.ca_burst);
    });
    root.section("artifacts", [&](Reader& r) {
        r.get("dataset", c.dataset_path);
        r.get("model", c.model_path);
        r.get("coeffs", c.coeffs_path);
    });
    root.finish();
    if (c.shape.kind != koopman::ModelKind::proposed) c.shape.action_latent = c.shape.action_dim;
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw Error("config file not found: " + file.string());
    json j;
    try {
        j = json::parse(is, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw Error("config " + file.string() + ": " + e.what());
    }
    auto kind = dynamics::PlantKind::double_pendulum;
    if (j.is_object() && j.contains("plant") && j["plant"].is_object() && j["plant"].contains("kind") &&
        j["plant"]["kind"].is_string())
        kind = dynamics::parse_plant_kind(j["plant"]["kind"].get<std::string>());
    auto c = from_json(j, default_config(kind));
    c.validate();
    return c;
}

// --- episodes -----------------------------------------------------------------

Context make_context(const ExperimentConfig& cfg, const control::Regulator& reg,
                     const errmodel::ErrorPolyCoeffs& coeffs) {
    Context ctx;
    ctx.reg = &reg;
    ctx.coeffs = &coeffs;
    ctx.p_sc = channel::required_power(cfg.sc.params()).power;
    ctx.p_ca = channel::required_power(cfg.ca.params()).power;
    return ctx;
}

FallbackResult actuator_fallback(Fallback kind, const CacheState& cache, std::size_t t,
                                 Eigen::Index action_dim) {
    FallbackResult r;
    if (!cache.has_plan) {
        r.u = Vec::Zero(action_dim);
        r.empty = true;
        return r;
    }
    r.offset = t - cache.t_prime;
    switch (kind) {
        case Fallback::cache:
            if (r.offset < cache.plan.size()) {
                r.u = cache.plan[r.offset];
            } else {
                r.u = cache.plan.back();
                r.overflow = true;
            }
            break;
        case Fallback::zero: r.u = Vec::Zero(action_dim); break;
        case Fallback::hold: r.u = cache.last_received; break;
    }
    return r;
}

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974;
constexpr std::uint64_t kScTag = 0x73636c6b;
constexpr std::uint64_t kCaTag = 0x63616c6b;
constexpr std::uint64_t kNoiseTag = 0x6e6f6973;
constexpr double kDivergedNorm = 1e6;

bool link_delivers(const LinkConfig& l, const channel::ChannelParams& p, double power, Rng& rng) {
    switch (l.mode) {
        case LinkMode::up: return true;
        case LinkMode::down: return false;
        case LinkMode::sampled: return channel::transmit(power, p, rng);
    }
    return false;
}

}  // namespace

Episode run_episode(const ExperimentConfig& cfg, const Context& ctx, std::size_t index) {
    if (!ctx.reg || !ctx.coeffs) throw Error("run_episode: incomplete context");
    const auto& reg = *ctx.reg;
    const auto& model = *reg.model;
    const auto D = cfg.plant.state_dim();
    const auto Dp = cfg.plant.action_dim();
    require_dim(static_cast<Eigen::Index>(model.D()), D, "model state dimension");
    require_dim(static_cast<Eigen::Index>(model.Dp()), Dp, "model action dimension");

    Rng init_rng = make_stream(cfg.seed, index, kInitTag);
    Rng sc_rng = make_stream(cfg.seed, index, kScTag);
    Rng ca_rng = make_stream(cfg.seed, index, kCaTag);
    auto noise = cfg.noise_variance > 0.0
                     ? dynamics::NoiseModel::isotropic(D, cfg.noise_variance,
                                                       make_stream(cfg.seed, index, kNoiseTag)())
                     : dynamics::NoiseModel::none(D);
    const auto sc_params = cfg.sc.params();
    const auto ca_params = cfg.ca.params();

    Episode ep;
    ep.index = index;
    ep.x_initial = cfg.init_box.sample(init_rng);
    ep.records.reserve(cfg.T);

    Vec x = ep.x_initial;
    auto sched = scheduler::initial_state(cfg.sched, x);
    CacheState cache;
    Vec z;
    Vec w_prev;

    for (std::size_t t = 0; t < cfg.T; ++t) {
        StepRecord r;
        r.t = t;
        auto d = scheduler::decide(sched, cfg.sched, *ctx.coeffs, ctx.p_sc);
        if (cfg.force_schedule) {
            d.a = 1;
            d.gamma = 1.0;
            d.starvation = false;
        }
        r.a = d.a;
        r.gamma = d.gamma;
        r.epsilon = d.epsilon;
        r.a0_feasible = d.a0_feasible;
        r.battery_ok = d.battery_ok;
        r.starvation = d.starvation;
        r.c1 = d.c1;
        r.c2 = d.c2;
        r.c3 = d.c3;

        const bool sc_ok = d.a == 1 && link_delivers(cfg.sc, sc_params, ctx.p_sc, sc_rng);
        r.sc_outage = d.a == 1 && !sc_ok;
        if (sc_ok || t == 0) z = koopman::embed_state(model, x);
        else z = koopman::latent_step(model, z, w_prev);
        r.x = x;
        r.x_tilde = z.head(D);

        const auto plan = control::plan_horizon(reg, z, cfg.n_c);
        w_prev = plan.front().w;
        r.u = plan.front().u;
        r.saturated = plan.front().saturated;

        const bool ca_ok = cfg.ca_burst > 0 ? t % (cfg.ca_burst + 1) == 0
                                            : link_delivers(cfg.ca, ca_params, ctx.p_ca, ca_rng);
        r.ca_success = ca_ok;
        if (ca_ok) {
            cache.plan.clear();
            for (const auto& p : plan) cache.plan.push_back(p.u);
            cache.t_prime = t;
            cache.last_received = r.u;
            cache.has_plan = true;
            r.u_tilde = r.u;
        } else {
            auto fb = actuator_fallback(cfg.fallback, cache, t, Dp);
            r.u_tilde = std::move(fb.u);
            r.cache_offset = fb.offset;
            r.overflow = fb.overflow;
            r.empty_cache = fb.empty;
        }
        r.J = dynamics::control_cost(r.x_tilde, r.u_tilde, cfg.Q, cfg.B, cfg.x0);

        scheduler::advance(sched, d, sc_ok, x, cfg.sched, ctx.p_sc);
        r.beta = sched.beta;
        r.Q_a = sched.Q_a;
        r.p_b = sched.p_b;
        ep.records.push_back(std::move(r));

        try {
            x = cfg.plant.step(x, ep.records.back().u_tilde, noise);
        } catch (const dynamics::DivergedPlant&) {
            ep.diverged = true;
            break;
        }
        if (!(x.norm() < kDivergedNorm)) {
            ep.diverged = true;
            break;
        }
    }
    return ep;
}

double total_cost(const std::vector<StepRecord>& records, double lambda) {
    if (records.empty()) throw Error("total_cost: no records");
    double j = 0.0, a = 0.0;
    for (const auto& r : records) {
        j += r.J;
        a += r.a;
    }
    return (j + lambda * a) / static_cast<double>(records.size());
}

EpisodeMetrics episode_metrics(const Episode& ep, const ExperimentConfig& cfg) {
    EpisodeMetrics m;
    m.index = ep.index;
    m.slots = ep.records.size();
    m.diverged = ep.diverged;
    m.initial_norm = (ep.x_initial - cfg.x0).norm();
    m.settle_slot = m.slots;
    if (ep.records.empty()) return m;
    const double n = static_cast<double>(m.slots);
    double j = 0.0, beta = 0.0, prev_p = cfg.sched.p_b0;
    for (const auto& r : ep.records) {
        j += r.J;
        m.transmissions += r.a;
        beta += r.beta;
        m.battery_used += std::max(prev_p - r.p_b, 0.0);
        prev_p = r.p_b;
        m.starvation_slots += r.starvation;
        m.overflow_slots += r.overflow;
        m.sc_outages += r.sc_outage;
        m.ca_failures += !r.ca_success;
        if (m.settle_slot == m.slots && (r.x - cfg.x0).norm() < 0.1 * m.initial_norm) m.settle_slot = r.t;
    }
    m.control_cost = j / n;
    m.total_cost = total_cost(ep.records, cfg.sched.lambda);
    m.transmission_rate = m.transmissions / n;
    m.aoi_mean = beta / n;
    double ss = 0.0;
    for (const auto& r : ep.records) ss += (r.beta - m.aoi_mean) * (r.beta - m.aoi_mean);
    m.aoi_var = ss / n;
    m.final_norm = (ep.records.back().x - cfg.x0).norm();
    return m;
}

Metrics aggregate_metrics(const std::vector<EpisodeMetrics>& eps) {
    Metrics a;
    a.episodes = eps.size();
    if (eps.empty()) return a;
    const double n = static_cast<double>(eps.size());
    for (const auto& e : eps) {
        a.control_cost += e.control_cost;
        a.total_cost += e.total_cost;
        a.transmissions += e.transmissions;
        a.transmission_rate += e.transmission_rate;
        a.aoi_mean += e.aoi_mean;
        a.aoi_var += e.aoi_var;
        a.battery_used += e.battery_used;
        a.starvation_slots += e.starvation_slots;
        a.overflow_slots += e.overflow_slots;
        a.diverged += e.diverged;
        a.final_norm_ratio += e.initial_norm > 0.0 ? e.final_norm / e.initial_norm : 0.0;
        a.settle_slot += static_cast<double>(e.settle_slot);
        a.settle_max = std::max(a.settle_max, e.settle_slot);
    }
    a.control_cost /= n;
    a.total_cost /= n;
    a.transmissions /= n;
    a.transmission_rate /= n;
    a.aoi_mean /= n;
    a.aoi_var /= n;
    a.battery_used /= n;
    a.final_norm_ratio /= n;
    a.settle_slot /= n;
    double ss = 0.0;
    for (const auto& e : eps) ss += (e.total_cost - a.total_cost) * (e.total_cost - a.total_cost);
    a.total_cost_var = ss / n;
    return a;
}

std::vector<EpisodeMetrics> run_episodes(const ExperimentConfig& cfg, const Context& ctx,
                                         std::vector<Episode>* keep) {
    const std::size_t n = cfg.episodes;
    std::vector<EpisodeMetrics> out(n);
    if (keep) keep->assign(n, Episode{});
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                auto ep = run_episode(cfg, ctx, i);
                out[i] = episode_metrics(ep, cfg);
                if (keep) (*keep)[i] = std::move(ep);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = n;
            }
        }
    };
    const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t workers = std::min(n, hw);
    std::vector<std::thread> pool;
    for (std::size_t k = 1; k < workers; ++k) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

std::string check_episode_invariants(const Episode& ep, const ExperimentConfig& cfg,
                                     const Context& ctx) {
    auto fail = [](std::size_t t, const std::string& what) {
        return "slot " + std::to_string(t) + ": " + what;
    };
    double sum_a = 0.0, sum_gamma = 0.0;
    std::size_t last_ok = 0;
    bool any_ok = false;
    Vec last_u;
    for (const auto& r : ep.records) {
        if (r.a == 1 && !r.sc_outage && r.x_tilde != r.x) return fail(r.t, "delivered state differs from x_t");
        if (r.a == 0 && r.sc_outage) return fail(r.t, "outage flagged on an unscheduled slot");
        if (r.ca_success) {
            if (r.u_tilde != r.u) return fail(r.t, "delivered plan head was not applied");
            any_ok = true;
            last_ok = r.t;
            last_u = r.u;
        } else if (!any_ok) {
            if (!r.empty_cache || !r.u_tilde.isZero(0.0)) return fail(r.t, "no plan yet but a nonzero action");
        } else {
            if (r.cache_offset != r.t - last_ok) return fail(r.t, "cache offset is not t - t'");
            if (cfg.fallback == Fallback::zero && !r.u_tilde.isZero(0.0)) return fail(r.t, "B1 applied a nonzero action");
            if (cfg.fallback == Fallback::hold && r.u_tilde != last_u) return fail(r.t, "B2 did not hold the last action");
            if (cfg.fallback == Fallback::cache && r.overflow != (r.cache_offset >= cfg.n_c))
                return fail(r.t, "cache overflow flag inconsistent with the offset");
        }
        if (r.p_b < 0.0) return fail(r.t, "negative battery");
        if (!cfg.force_schedule && r.a == 0 && !r.starvation && !(r.epsilon <= cfg.sched.delta))
            return fail(r.t, "skipped a slot whose predicted error exceeds delta");
        if (!cfg.force_schedule && r.a == 1 && !r.battery_ok) return fail(r.t, "scheduled without battery");
        sum_a += r.a;
        sum_gamma += r.gamma;
        const double J = dynamics::control_cost(r.x_tilde, r.u_tilde, cfg.Q, cfg.B, cfg.x0);
        if (J != r.J) return fail(r.t, "recorded cost does not match the state and action");
    }
    if (!ep.records.empty()) {
        const double T = static_cast<double>(ep.records.size());
        if (sum_a / T > sum_gamma / T + ep.records.back().Q_a / T + 1e-12)
            return "virtual queue inequality violated";
    }
    (void)ctx;
    return {};
}

// --- output -------------------------------------------------------------------

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

std::ofstream open_out(const std::filesystem::path& file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary);
    if (!os) throw Error("cannot write " + file.string());
    return os;
}

void put_vec(std::ostream& os, const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << format_double(v[i]);
}

void vec_header(std::ostream& os, const char* name, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << name << '_' << i;
}

}  // namespace

void write_episode_csv(const Episode& ep, const std::filesystem::path& file) {
    auto os = open_out(file);
    const Eigen::Index D = ep.x_initial.size();
    const Eigen::Index Dp = ep.records.empty() ? 0 : ep.records.front().u.size();
    os << "t,a,gamma,sc_outage,ca_success";
    vec_header(os, "x", D);
    vec_header(os, "x_tilde", D);
    vec_header(os, "u", Dp);
    vec_header(os, "u_tilde", Dp);
    os << ",beta,Q_a,p_b,J,epsilon,a0_feasible,battery_ok,starvation,cache_offset,overflow,"
          "empty_cache,saturated,c1,c2,c3\n";
    for (const auto& r : ep.records) {
        os << r.t << ',' << r.a << ',' << format_double(r.gamma) << ',' << r.sc_outage << ','
           << r.ca_success;
        put_vec(os, r.x);
        put_vec(os, r.x_tilde);
        put_vec(os, r.u);
        put_vec(os, r.u_tilde);
        os << ',' << format_double(r.beta) << ',' << format_double(r.Q_a) << ',' << format_double(r.p_b)
           << ',' << format_double(r.J) << ',' << format_double(r.epsilon) << ',' << r.a0_feasible << ','
           << r.battery_ok << ',' << r.starvation << ',' << r.cache_offset << ',' << r.overflow << ','
           << r.empty_cache << ',' << r.saturated << ',' << format_double(r.c1) << ','
           << format_double(r.c2) << ',' << format_double(r.c3) << '\n';
    }
}

namespace {

const char* kMetricColumns =
    "episodes,control_cost,total_cost,total_cost_var,transmissions,transmission_rate,aoi_mean,"
    "aoi_var,battery_used,starvation_slots,overflow_slots,diverged,final_norm_ratio,settle_slot";

void put_metrics(std::ostream& os, const Metrics& m) {
    os << m.episodes << ',' << format_double(m.control_cost) << ',' << format_double(m.total_cost) << ','
       << format_double(m.total_cost_var) << ',' << format_double(m.transmissions) << ','
       << format_double(m.transmission_rate) << ',' << format_double(m.aoi_mean) << ','
       << format_double(m.aoi_var) << ',' << format_double(m.battery_used) << ',' << m.starvation_slots
       << ',' << m.overflow_slots << ',' << m.diverged << ',' << format_double(m.final_norm_ratio) << ','
       << format_double(m.settle_slot);
}

}  // namespace

void write_summary_csv(const std::vector<EpisodeMetrics>& eps, const Metrics& agg,
                       const std::filesystem::path& file) {
    auto os = open_out(file);
    os << "episode,slots,control_cost,total_cost,transmissions,transmission_rate,aoi_mean,aoi_var,"
          "battery_used,starvation_slots,overflow_slots,sc_outages,ca_failures,diverged,"
          "initial_norm,final_norm,settle_slot\n";
    for (const auto& e : eps) {
        os << e.index << ',' << e.slots << ',' << format_double(e.control_cost) << ','
           << format_double(e.total_cost) << ',' << format_double(e.transmissions) << ','
           << format_double(e.transmission_rate) << ',' << format_double(e.aoi_mean) << ','
           << format_double(e.aoi_var) << ',' << format_double(e.battery_used) << ','
           << e.starvation_slots << ',' << e.overflow_slots << ',' << e.sc_outages << ','
           << e.ca_failures << ',' << e.diverged << ',' << format_double(e.initial_norm) << ','
           << format_double(e.final_norm) << ',' << e.settle_slot << '\n';
    }
    os << "\n" << kMetricColumns << '\n';
    put_metrics(os, agg);
    os << '\n';
}

SweepAxis parse_axis(const std::string& name) {
    if (name == "outage") return SweepAxis::outage;
    if (name == "snr") return SweepAxis::snr;
    if (name == "kappa") return SweepAxis::kappa;
    if (name == "delta") return SweepAxis::delta;
    if (name == "ca_failures" || name == "ca-failures") return SweepAxis::ca_failures;
    throw Error("unknown sweep axis '" + name + "' (expected outage, snr, kappa, delta or ca_failures)");
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::outage: return "outage";
        case SweepAxis::snr: return "snr";
        case SweepAxis::kappa: return "kappa";
        case SweepAxis::delta: return "delta";
        case SweepAxis::ca_failures: return "ca_failures";
    }
    return "?";
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const control::Regulator& reg,
                                const errmodel::ErrorPolyCoeffs& coeffs, SweepAxis axis,
                                const std::vector<double>& values,
                                const std::vector<double>& snr_grid_db) {
    std::vector<SweepRow> rows;
    auto run = [&](const ExperimentConfig& cfg, double value) {
        cfg.validate();
        const auto ctx = make_context(cfg, reg, coeffs);
        SweepRow row;
        row.value = value;
        row.gamma0_db = cfg.sc.gamma0_db;
        row.fallback = to_string(cfg.fallback);
        row.p_sc = ctx.p_sc;
        row.metrics = aggregate_metrics(run_episodes(cfg, ctx));
        rows.push_back(std::move(row));
    };
    for (double v : values) {
        ExperimentConfig cfg = base;
        switch (axis) {
            case SweepAxis::outage:
                cfg.sc.outage_target = cfg.ca.outage_target = v;
                run(cfg, v);
                break;
            case SweepAxis::snr:
                cfg.sc.gamma0_db = cfg.ca.gamma0_db = v;
                run(cfg, v);
                break;
            case SweepAxis::kappa:
                cfg.sc.kappa = cfg.ca.kappa = v;
                if (snr_grid_db.empty()) {
                    run(cfg, v);
                } else {
                    for (double g : snr_grid_db) {
                        cfg.sc.gamma0_db = cfg.ca.gamma0_db = g;
                        run(cfg, v);
                    }
                }
                break;
            case SweepAxis::delta:
                cfg.sched.delta = v;
                run(cfg, v);
                break;
            case SweepAxis::ca_failures: {
                if (!(v >= 0.0) || v != std::floor(v)) throw Error("ca_failures values must be whole numbers >= 0");
                cfg.ca_burst = static_cast<std::size_t>(v);
                for (auto f : {Fallback::cache, Fallback::zero, Fallback::hold}) {
                    cfg.fallback = f;
                    run(cfg, v);
                }
                break;
            }
        }
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, SweepAxis axis, const std::filesystem::path& file) {
    auto os = open_out(file);
    os << to_string(axis) << ",gamma0_db,fallback,p_sc," << kMetricColumns << '\n';
    for (const auto& r : rows) {
        os << format_double(r.value) << ',' << format_double(r.gamma0_db) << ',' << r.fallback << ','
           << format_double(r.p_sc) << ',';
        put_metrics(os, r.metrics);
        os << '\n';
    }
}

std::string file_digest(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw Error("cannot read " + file.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

}  // namespace wncs::harness
