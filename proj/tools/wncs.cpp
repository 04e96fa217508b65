// Command-line front end: gen-data, train, fit-error, run, sweep.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "wncs/harness.hpp"

namespace fs = std::filesystem;
using namespace wncs;
using nlohmann::json;

namespace {

// Missing input artifacts and bad flag values map to exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("no ") + what + " given");
    if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("not a number: '" + item + "'");
        }
    }
    return out;
}

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

// Artifacts read and outputs written by a command, for the manifest.
struct RunDir {
    fs::path root;
    std::string command;
    json inputs = json::object();
    json seeds = json::object();
    std::vector<fs::path> outputs;

    fs::path file(const std::string& rel) {
        outputs.push_back(rel);
        return root / rel;
    }
    void input(const std::string& name, const std::string& path) {
        inputs[name] = {{"path", path}, {"fnv1a64", harness::file_digest(path)}};
    }
};

RunDir open_run_dir(const std::string& command, const Common& c) {
    RunDir r;
    r.command = command;
    if (!c.out.empty()) r.root = c.out;
    else if (const char* env = std::getenv("WNCS_RUN_ROOT"); env && *env) r.root = fs::path(env) / command;
    else r.root = fs::path("runs") / command;
    fs::create_directories(r.root);
    return r;
}

void finish_run_dir(RunDir& r, const harness::ExperimentConfig& cfg) {
    {
        std::ofstream os(r.root / "config.snapshot", std::ios::binary);
        os << harness::to_json(cfg).dump(2) << '\n';
    }
    json outputs = json::object();
    for (const auto& o : r.outputs) outputs[o.generic_string()] = harness::file_digest(r.root / o);
    outputs["config.snapshot"] = harness::file_digest(r.root / "config.snapshot");
    json m = {{"command", r.command}, {"seeds", r.seeds}, {"inputs", r.inputs}, {"outputs", outputs}};
    std::ofstream os(r.root / "manifest.json", std::ios::binary);
    os << m.dump(2) << '\n';
}

harness::ExperimentConfig base_config(const Common& c) {
    if (c.config.empty()) return harness::default_config();
    require_file(c.config, "config file");
    return harness::load_config(c.config);
}

control::Regulator load_regulator(const harness::ExperimentConfig& cfg, koopman::KoopmanModel& model,
                                  RunDir& run) {
    require_file(cfg.model_path, "model file");
    model = koopman::load_model(cfg.model_path);
    run.input("model", cfg.model_path);
    if (model.D() != cfg.shape.state_dim || model.Dp() != cfg.shape.action_dim)
        throw Error("model " + cfg.model_path + " does not match the configured plant");
    return control::make_regulator(model, cfg.Q, cfg.B, cfg.x0, cfg.dare);
}

errmodel::ErrorPolyCoeffs load_coeffs(const harness::ExperimentConfig& cfg, RunDir& run) {
    require_file(cfg.coeffs_path, "coefficient file");
    run.input("coeffs", cfg.coeffs_path);
    return errmodel::load_coeffs_csv(cfg.coeffs_path);
}

void print_metrics(const harness::Metrics& m) {
    std::printf("episodes %zu  control cost %.6g  total cost %.6g  transmissions %.6g  mean AoI %.6g  diverged %zu\n",
                m.episodes, m.control_cost, m.total_cost, m.transmissions, m.aoi_mean, m.diverged);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep-Koopman wireless networked control simulator"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "wncs 0.1");

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON configuration file");
        sub->add_option("--out", common.out, "run directory (default $WNCS_RUN_ROOT/<command> or runs/<command>)");
        sub->add_option("--seed", common.seed, "seed for this command's random streams");
    };

    std::optional<std::size_t> traj, steps, epochs, horizon, samples, beta_max, episodes, slots, n_c;
    std::optional<std::string> data_path, model_path, coeffs_path, kind, plant, nonlinearity, fallback;
    std::string format = "binary", axis, values, snr_grid, degrees;
    std::optional<double> noise;

    auto* gen = app.add_subcommand("gen-data", "generate a random-action trajectory dataset");
    add_common(gen);
    gen->add_option("--traj", traj, "number of trajectories");
    gen->add_option("--steps", steps, "states per trajectory");
    gen->add_option("--plant", plant, "double_pendulum or cartpole");
    gen->add_option("--nonlinearity", nonlinearity, "tanh or cubic");
    gen->add_option("--noise", noise, "process noise variance");
    gen->add_option("--format", format, "binary or csv")->check(CLI::IsMember({"binary", "csv"}));

    auto* train = app.add_subcommand("train", "train a Koopman model on a dataset");
    add_common(train);
    train->add_option("--data", data_path, "dataset (binary file or CSV directory)");
    train->add_option("--kind", kind, "proposed, dkuc or dkac");
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--horizon", horizon, "prediction horizon N_p");

    auto* fit = app.add_subcommand("fit-error", "collect prediction errors and fit the error polynomial");
    add_common(fit);
    fit->add_option("--model", model_path, "trained model");
    fit->add_option("--samples", samples, "number of error samples");
    fit->add_option("--beta-max", beta_max, "largest AoI sampled");
    fit->add_option("--degrees", degrees, "candidate degrees, comma separated");
    fit->add_option("--noise", noise, "process noise variance");

    auto add_episode_flags = [&](CLI::App* sub) {
        sub->add_option("--model", model_path, "trained model");
        sub->add_option("--coeffs", coeffs_path, "error polynomial coefficients");
        sub->add_option("--episodes", episodes, "number of episodes");
        sub->add_option("--T", slots, "slots per episode");
        sub->add_option("--nc", n_c, "planned actions per CA packet");
        sub->add_option("--fallback", fallback, "cache, zero or hold");
        sub->add_option("--noise", noise, "process noise variance");
    };
    auto* run = app.add_subcommand("run", "run closed-loop episodes");
    add_common(run);
    add_episode_flags(run);

    auto* sweep = app.add_subcommand("sweep", "run episodes over a parameter grid");
    add_common(sweep);
    add_episode_flags(sweep);
    sweep->add_option("--axis", axis, "outage, snr, kappa, delta or ca_failures")->required();
    sweep->add_option("--values", values, "comma separated values")->required();
    sweep->add_option("--snr-grid", snr_grid, "gamma0 values in dB crossed with the kappa axis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        auto cfg = base_config(common);
        if (noise) cfg.noise_variance = *noise;

        if (gen->parsed()) {
            if (plant) {
                const auto k = dynamics::parse_plant_kind(*plant);
                if (k != cfg.plant.kind) cfg = harness::from_json({{"plant", {{"kind", *plant}}}}, cfg);
            }
            if (nonlinearity) cfg.plant.pendulum.nonlinearity = dynamics::parse_nonlinearity(*nonlinearity);
            if (traj) cfg.data_trajectories = *traj;
            if (steps) cfg.data_steps = *steps;
            if (common.seed) cfg.data_seed = *common.seed;
            cfg.validate();
            auto rd = open_run_dir("gen-data", common);
            rd.seeds["data"] = cfg.data_seed;
            auto dp = cfg.plant;
            if (cfg.data_action_max > 0.0) dp.u_max = cfg.data_action_max;
            const auto ds = koopman::generate_dataset(dp, cfg.noise_variance, cfg.data_trajectories,
                                                      cfg.data_steps, cfg.data_box, cfg.data_seed);
            if (format == "csv") {
                koopman::save_dataset_csv(ds, rd.root / "dataset");
                for (const auto& e : fs::directory_iterator(rd.root / "dataset"))
                    rd.outputs.push_back(fs::path("dataset") / e.path().filename());
                std::sort(rd.outputs.begin(), rd.outputs.end());
                cfg.dataset_path = (rd.root / "dataset").string();
            } else {
                koopman::save_dataset_binary(ds, rd.file("dataset.bin"));
                cfg.dataset_path = (rd.root / "dataset.bin").string();
            }
            finish_run_dir(rd, cfg);
            std::printf("wrote %zu trajectories (%zu truncated) to %s\n", ds.trajectories.size(),
                        ds.truncated_count(), cfg.dataset_path.c_str());
        } else if (train->parsed()) {
            if (data_path) cfg.dataset_path = *data_path;
            if (kind) cfg = harness::from_json({{"model", {{"kind", *kind}}}}, cfg);
            if (epochs) cfg.training.epochs = *epochs;
            if (horizon) cfg.training.horizon = *horizon;
            if (common.seed) cfg.model_seed = cfg.training.seed = *common.seed;
            cfg.validate();
            require_file(cfg.dataset_path, "dataset");
            auto rd = open_run_dir("train", common);
            rd.input("dataset", cfg.dataset_path);
            rd.seeds["model"] = cfg.model_seed;
            rd.seeds["training"] = cfg.training.seed;
            const auto ds = koopman::load_dataset(cfg.dataset_path);
            auto model = koopman::KoopmanModel::create(cfg.shape, cfg.model_seed, cfg.plant.u_max);
            const auto res = koopman::train_model(model, ds, cfg.training, [](std::size_t e, double l) {
                std::printf("epoch %zu  loss %.6g\n", e + 1, l);
                std::fflush(stdout);
            });
            koopman::save_model(model, rd.file("model.bin"));
            {
                std::ofstream os(rd.file("training.csv"), std::ios::binary);
                os << "epoch,loss\n";
                for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
                    os << e + 1 << ',' << harness::format_double(res.epoch_losses[e]) << '\n';
                os << "initial_eval," << harness::format_double(res.initial_loss) << '\n';
                os << "final_eval," << harness::format_double(res.final_loss) << '\n';
            }
            cfg.model_path = (rd.root / "model.bin").string();
            finish_run_dir(rd, cfg);
            std::printf("evaluation loss %.6g -> %.6g; model written to %s\n", res.initial_loss,
                        res.final_loss, cfg.model_path.c_str());
        } else if (fit->parsed()) {
            if (model_path) cfg.model_path = *model_path;
            if (samples) cfg.err_samples = *samples;
            if (beta_max) cfg.beta_max = *beta_max;
            if (!degrees.empty()) {
                cfg.degrees.clear();
                for (double d : parse_list(degrees)) cfg.degrees.push_back(static_cast<int>(d));
            }
            if (common.seed) cfg.err_seed = *common.seed;
            cfg.validate();
            auto rd = open_run_dir("fit-error", common);
            rd.seeds["error"] = cfg.err_seed;
            koopman::KoopmanModel model;
            const auto reg = load_regulator(cfg, model, rd);
            errmodel::CollectOptions opt;
            opt.samples = cfg.err_samples;
            opt.beta_max = cfg.beta_max;
            opt.seed = cfg.err_seed;
            opt.box = cfg.err_box;
            opt.noise_variance = cfg.noise_variance;
            const auto col = errmodel::collect_samples(reg, cfg.plant, opt);
            errmodel::save_samples_csv(col.samples, rd.file("error_samples.csv"));
            int degree = cfg.degree;
            if (cfg.degrees.size() >= 2) {
                const auto sel = errmodel::select_degree(col.samples, cfg.degrees, cfg.err_seed);
                std::ofstream os(rd.file("degrees.csv"), std::ios::binary);
                os << "degree,train_residual,holdout_residual\n";
                for (const auto& r : sel.table) {
                    os << r.degree << ',' << harness::format_double(r.train_residual) << ','
                       << harness::format_double(r.holdout_residual) << '\n';
                    std::printf("degree %d  train %.6g  held-out %.6g\n", r.degree, r.train_residual,
                                r.holdout_residual);
                }
                degree = sel.best;
            }
            const auto coeffs = errmodel::fit_polynomial(col.samples, degree);
            errmodel::save_coeffs_csv(coeffs, rd.file("coeffs.csv"));
            cfg.degree = degree;
            cfg.coeffs_path = (rd.root / "coeffs.csv").string();
            finish_run_dir(rd, cfg);
            std::printf("%zu samples (%zu discarded); degree %d coefficients written to %s\n",
                        col.samples.size(), col.discarded, degree, cfg.coeffs_path.c_str());
        } else {
            const bool is_sweep = sweep->parsed();
            if (model_path) cfg.model_path = *model_path;
            if (coeffs_path) cfg.coeffs_path = *coeffs_path;
            if (episodes) cfg.episodes = *episodes;
            if (slots) cfg.T = *slots;
            if (n_c) cfg.n_c = *n_c;
            if (fallback) cfg.fallback = harness::parse_fallback(*fallback);
            if (common.seed) cfg.seed = *common.seed;
            cfg.validate();
            harness::SweepAxis ax{};
            std::vector<double> vals, grid;
            if (is_sweep) {
                try {
                    ax = harness::parse_axis(axis);
                } catch (const Error& e) {
                    throw UsageError(e.what());
                }
                vals = parse_list(values);
                grid = parse_list(snr_grid);
            }
            require_file(cfg.model_path, "model file");
            require_file(cfg.coeffs_path, "coefficient file");
            auto rd = open_run_dir(is_sweep ? "sweep" : "run", common);
            rd.seeds["episodes"] = cfg.seed;
            koopman::KoopmanModel model;
            const auto reg = load_regulator(cfg, model, rd);
            const auto coeffs = load_coeffs(cfg, rd);
            if (is_sweep) {
                const auto rows = harness::run_sweep(cfg, reg, coeffs, ax, vals, grid);
                const std::string name = "sweep_" + harness::to_string(ax) + ".csv";
                harness::write_sweep_csv(rows, ax, rd.file(name));
                for (const auto& r : rows) {
                    std::printf("%s=%g %s  ", harness::to_string(ax).c_str(), r.value, r.fallback.c_str());
                    print_metrics(r.metrics);
                }
            } else {
                const auto ctx = harness::make_context(cfg, reg, coeffs);
                std::vector<harness::Episode> eps;
                const auto per = harness::run_episodes(cfg, ctx, &eps);
                for (const auto& ep : eps) {
                    const auto msg = harness::check_episode_invariants(ep, cfg, ctx);
                    if (!msg.empty())
                        throw Error("episode " + std::to_string(ep.index) + " violates an invariant: " + msg);
                    harness::write_episode_csv(ep, rd.file("episodes/ep_" + std::to_string(ep.index) + ".csv"));
                }
                const auto agg = harness::aggregate_metrics(per);
                harness::write_summary_csv(per, agg, rd.file("summary.csv"));
                print_metrics(agg);
            }
            finish_run_dir(rd, cfg);
            std::printf("outputs in %s\n", rd.root.string().c_str());
        }
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
