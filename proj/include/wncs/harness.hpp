#pragma once

// Closed-loop episodes over the two wireless links, metrics, sweeps and the
// experiment configuration.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "wncs/channel.hpp"
#include "wncs/control.hpp"
#include "wncs/errmodel.hpp"
#include "wncs/koopman.hpp"
#include "wncs/scheduler.hpp"

namespace wncs::harness {

enum class Fallback { cache, zero, hold };
Fallback parse_fallback(const std::string& name);
std::string to_string(Fallback f);

// sampled: Rician outage draw; up: never fails; down: always fails.
enum class LinkMode { sampled, up, down };
LinkMode parse_link_mode(const std::string& name);
std::string to_string(LinkMode m);

struct LinkConfig {
    double kappa = 10.0;
    double n0_dbm_per_hz = -168.0;
    double bandwidth_hz = 2.4e9;
    double gamma0_db = 20.0;
    double outage_target = 1e-3;
    LinkMode mode = LinkMode::sampled;

    channel::ChannelParams params() const;
};

struct ExperimentConfig {
    dynamics::Plant plant;
    double noise_variance = 1e-4;

    // model / training
    koopman::ModelShape shape;
    std::size_t data_trajectories = 200;
    std::size_t data_steps = 500;
    koopman::StateBox data_box;
    double data_action_max = 0.0;  // range of the random data actions; 0 means plant.u_max
    std::uint64_t data_seed = 1;
    std::uint64_t model_seed = 1;
    koopman::TrainingConfig training;

    // regulator
    Mat Q;
    Mat B;
    Vec x0;
    std::size_t n_c = 10;
    control::DareOptions dare;

    // error surrogate
    std::size_t err_samples = 10000;
    std::size_t beta_max = 30;
    std::vector<int> degrees{1, 2, 3};
    int degree = 2;
    koopman::StateBox err_box;
    std::uint64_t err_seed = 1;

    scheduler::SchedulerConfig sched;
    LinkConfig sc;
    LinkConfig ca;

    // episodes
    Fallback fallback = Fallback::cache;
    std::size_t T = 1000;
    std::size_t episodes = 100;
    std::uint64_t seed = 1;
    koopman::StateBox init_box;
    bool force_schedule = false;  // a_t = 1 every slot
    // k > 0: the CA link fails k consecutive slots, then delivers once, repeating.
    std::size_t ca_burst = 0;

    // artifact paths (resolved relative to the working directory)
    std::string dataset_path;
    std::string model_path;
    std::string coeffs_path;

    void validate() const;
};

// Table-I defaults for the given plant.
ExperimentConfig default_config(dynamics::PlantKind plant = dynamics::PlantKind::double_pendulum);
nlohmann::json to_json(const ExperimentConfig& cfg);
// Keys absent from j keep the values of `base`; unknown keys are rejected.
ExperimentConfig from_json(const nlohmann::json& j, const ExperimentConfig& base);
ExperimentConfig load_config(const std::filesystem::path& file);

struct StepRecord {
    std::size_t t = 0;
    int a = 0;
    bool sc_outage = false;   // scheduled but lost
    bool ca_success = false;  // a'_t
    Vec x, x_tilde, u, u_tilde;
    double beta = 0.0;
    double Q_a = 0.0;
    double p_b = 0.0;
    double J = 0.0;
    double gamma = 0.0;
    double epsilon = 0.0;
    bool a0_feasible = false;
    bool battery_ok = false;
    bool starvation = false;
    std::size_t cache_offset = 0;
    bool overflow = false;     // replay ran past the cached horizon
    bool empty_cache = false;  // nothing received yet; zero action applied
    bool saturated = false;
    double c1 = 0.0, c2 = 0.0, c3 = 0.0;
};

struct Episode {
    std::size_t index = 0;
    std::vector<StepRecord> records;
    bool diverged = false;
    Vec x_initial;
};

// Everything an episode needs besides the configuration.
struct Context {
    const control::Regulator* reg = nullptr;
    const errmodel::ErrorPolyCoeffs* coeffs = nullptr;
    double p_sc = 0.0;  // SC transmit power from the outage target
    double p_ca = 0.0;  // CA transmit power from the outage target
};

Context make_context(const ExperimentConfig& cfg, const control::Regulator& reg,
                     const errmodel::ErrorPolyCoeffs& coeffs);

Episode run_episode(const ExperimentConfig& cfg, const Context& ctx, std::size_t episode_index);

// Actuator input on a CA failure.
struct CacheState {
    std::vector<Vec> plan;     // last delivered plan
    std::size_t t_prime = 0;   // slot it was delivered in
    Vec last_received;         // head of the last delivered plan
    bool has_plan = false;
};

struct FallbackResult {
    Vec u;
    std::size_t offset = 0;
    bool overflow = false;
    bool empty = false;
};

FallbackResult actuator_fallback(Fallback kind, const CacheState& cache, std::size_t t,
                                 Eigen::Index action_dim);

double total_cost(const std::vector<StepRecord>& records, double lambda);

struct EpisodeMetrics {
    std::size_t index = 0;
    std::size_t slots = 0;
    double control_cost = 0.0;   // mean J
    double total_cost = 0.0;
    double transmissions = 0.0;  // sum a
    double transmission_rate = 0.0;
    double aoi_mean = 0.0;
    double aoi_var = 0.0;
    double battery_used = 0.0;
    std::size_t starvation_slots = 0;
    std::size_t overflow_slots = 0;
    std::size_t sc_outages = 0;
    std::size_t ca_failures = 0;
    bool diverged = false;
    double initial_norm = 0.0;
    double final_norm = 0.0;   // |x_T - x0|
    // First slot with |x_t - x0| < 0.1 |x_0 - x0|; equals slots when never reached.
    std::size_t settle_slot = 0;
};

EpisodeMetrics episode_metrics(const Episode& ep, const ExperimentConfig& cfg);

struct Metrics {
    std::size_t episodes = 0;
    double control_cost = 0.0;
    double total_cost = 0.0;
    double total_cost_var = 0.0;
    double transmissions = 0.0;
    double transmission_rate = 0.0;
    double aoi_mean = 0.0;
    double aoi_var = 0.0;
    double battery_used = 0.0;
    std::size_t starvation_slots = 0;
    std::size_t overflow_slots = 0;
    std::size_t diverged = 0;
    double final_norm_ratio = 0.0;  // mean |x_T - x0| / |x_0 - x0|
    double settle_slot = 0.0;       // mean
    std::size_t settle_max = 0;
};

Metrics aggregate_metrics(const std::vector<EpisodeMetrics>& per_episode);

// Runs cfg.episodes episodes; per-episode metrics in index order.
std::vector<EpisodeMetrics> run_episodes(const ExperimentConfig& cfg, const Context& ctx,
                                         std::vector<Episode>* keep = nullptr);

// Per-record checks of the link semantics; returns a description of the first
// violation, or an empty string.
std::string check_episode_invariants(const Episode& ep, const ExperimentConfig& cfg,
                                     const Context& ctx);

void write_episode_csv(const Episode& ep, const std::filesystem::path& file);

enum class SweepAxis { outage, snr, kappa, delta, ca_failures };
SweepAxis parse_axis(const std::string& name);
std::string to_string(SweepAxis a);

struct SweepRow {
    double value = 0.0;
    double gamma0_db = 0.0;
    std::string fallback;
    double p_sc = 0.0;
    Metrics metrics;
};

// One row per value. The kappa axis also crosses with snr_grid_db when it is
// non-empty; the ca_failures axis runs all three actuator fallbacks per value.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const control::Regulator& reg,
                                const errmodel::ErrorPolyCoeffs& coeffs, SweepAxis axis,
                                const std::vector<double>& values,
                                const std::vector<double>& snr_grid_db = {});

void write_sweep_csv(const std::vector<SweepRow>& rows, SweepAxis axis,
                     const std::filesystem::path& file);
void write_summary_csv(const std::vector<EpisodeMetrics>& per_episode, const Metrics& agg,
                       const std::filesystem::path& file);

std::string format_double(double v);
// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& file);

}  // namespace wncs::harness
