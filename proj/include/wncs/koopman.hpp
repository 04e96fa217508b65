#pragma once

// Deep Koopman model with separate state and action embeddings:
//
//   z = [x ; g_phi(x)],  w = g_mu(u),  z' = Kx z + Ku w,  u = g_rho(w)
//
// The same container also carries the two baseline variants, which share the
// latent_step contract and differ only in how an action enters the latent space:
//   dkuc  w = u                       (no action encoder/decoder)
//   dkac  w = a(x) .* u               (state-dependent auxiliary gain net)

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wncs/dynamics.hpp"
#include "wncs/nn.hpp"

namespace wncs::koopman {

enum class ModelKind { proposed, dkuc, dkac };
ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);

struct ModelShape {
    ModelKind kind = ModelKind::proposed;
    std::size_t state_dim = 4;       // D
    std::size_t action_dim = 2;      // D'
    std::size_t latent_extra = 20;   // q - D
    std::size_t action_latent = 2;   // q' (forced to D' for the baselines)
    std::vector<std::size_t> hidden{128, 128, 128};

    std::size_t latent_dim() const { return state_dim + latent_extra; }
};

struct KoopmanModel {
    ModelShape shape;
    nn::DenseNet state_encoder;   // D -> q - D
    nn::DenseNet action_encoder;  // D' -> q'      (proposed)
    nn::DenseNet action_decoder;  // q' -> D'      (proposed)
    nn::DenseNet aux;             // D -> D'       (dkac)
    Mat Kx;                       // q x q
    Mat Ku;                       // q x q'
    double u_max = 5.0;

    // Random initialisation: He-uniform nets, Kx = I + noise, Ku = noise.
    static KoopmanModel create(const ModelShape& shape, std::uint64_t seed, double u_max);

    std::size_t D() const { return shape.state_dim; }
    std::size_t Dp() const { return shape.action_dim; }
    std::size_t q() const { return shape.latent_dim(); }
    std::size_t qp() const { return static_cast<std::size_t>(Ku.cols()); }
    ModelKind kind() const { return shape.kind; }

    // Flat list of every trainable array, in a fixed order.
    std::vector<std::span<double>> parameter_blocks();
    void touch();
};

Vec embed_state(const KoopmanModel& m, const Vec& x);
// Proposed: g_mu(u). DKUC: u. DKAC: a(x) .* u (x is required).
Vec embed_action(const KoopmanModel& m, const Vec& u, const Vec* x = nullptr);
// Proposed: g_rho(w). DKUC: w. DKAC: w ./ a(x); entries with |a| below a floor
// saturate at +-u_max and set *saturated.
Vec decode_action(const KoopmanModel& m, const Vec& w, const Vec* x = nullptr,
                  bool* saturated = nullptr);
Vec latent_step(const KoopmanModel& m, const Vec& z, const Vec& w);

// Rolls the latent state forward from x_last through the given actions and
// returns the first D latent coordinates. An empty list returns x_last.
Vec predict_missing_state(const KoopmanModel& m, const Vec& x_last, const std::vector<Vec>& actions);

// --- data -----------------------------------------------------------------

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Trajectory {
    RowMat states;   // N x D
    RowMat actions;  // N x D'
    bool truncated = false;
};

struct DatasetMeta {
    dynamics::PlantKind plant = dynamics::PlantKind::double_pendulum;
    dynamics::InputNonlinearity nonlinearity = dynamics::InputNonlinearity::tanh;
    double u_max = 5.0;
    double dt = 0.02;
    double noise_variance = 0.0;
    std::uint64_t seed = 0;
};

struct TrajectoryDataset {
    DatasetMeta meta;
    std::vector<Trajectory> trajectories;

    std::size_t truncated_count() const;
};

struct StateBox {
    Vec low;
    Vec high;
    Vec sample(Rng& rng) const;
};

// Uniform actions in [-u_max, u_max]^D', initial states uniform in the box.
// Trajectory k draws from stream (seed, k); process noise from stream (seed, k, 1).
TrajectoryDataset generate_dataset(const dynamics::Plant& plant, double noise_variance,
                                   std::size_t n_traj, std::size_t n_steps, const StateBox& box,
                                   std::uint64_t seed);

// Noise stream used for trajectory k of a dataset generated with `seed`.
dynamics::NoiseModel dataset_noise(std::size_t dim, double noise_variance, std::uint64_t seed,
                                   std::size_t k);

// One directory, traj_{k}.csv with columns x1..xD,u1..uD', plus meta.json.
void save_dataset_csv(const TrajectoryDataset& ds, const std::filesystem::path& dir);
TrajectoryDataset load_dataset_csv(const std::filesystem::path& dir);
// Packed little-endian binary with a shape header.
void save_dataset_binary(const TrajectoryDataset& ds, const std::filesystem::path& file);
TrajectoryDataset load_dataset_binary(const std::filesystem::path& file);
TrajectoryDataset load_dataset(const std::filesystem::path& path);

// --- loss and training ------------------------------------------------------

// n windows of horizon+1 consecutive (x, u) pairs, window-major.
struct WindowBatch {
    std::size_t windows = 0;
    std::size_t horizon = 0;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::vector<double> states;   // windows x (horizon+1) x D
    std::vector<double> actions;  // windows x (horizon+1) x D'

    std::size_t steps() const { return horizon + 1; }
    const double* state(std::size_t w, std::size_t k) const {
        return states.data() + (w * steps() + k) * state_dim;
    }
    const double* action(std::size_t w, std::size_t k) const {
        return actions.data() + (w * steps() + k) * action_dim;
    }
};

struct WindowRef {
    std::size_t trajectory;
    std::size_t start;
};

class HorizonTooLong : public Error {
public:
    using Error::Error;
};

std::vector<WindowRef> enumerate_windows(const TrajectoryDataset& ds, std::size_t horizon,
                                         std::size_t stride = 1);
WindowBatch make_batch(const TrajectoryDataset& ds, std::span<const WindowRef> refs,
                       std::size_t horizon);

struct KoopmanGrad {
    nn::DenseGrad state_encoder;
    nn::DenseGrad action_encoder;
    nn::DenseGrad action_decoder;
    nn::DenseGrad aux;
    Mat Kx;
    Mat Ku;

    static KoopmanGrad zeros_like(const KoopmanModel& m);
    std::vector<std::span<double>> blocks();
};

struct LossParts {
    double total = 0.0;
    double latent = 0.0;          // sum_k MSE(Z_k, Zhat_k)
    double reconstruction = 0.0;  // sum_k MSE(U_k, Uhat_k), proposed only
};

// Buffers kept between multistep_loss calls to avoid reallocating per batch.
struct LossWorkspace {
    nn::ForwardCache encoder, action, decoder, aux;
    std::vector<double> W, dUhat, dE, dW_rows, dW_dec, dA;
    std::vector<Mat> Z, Wk, Zhat, dZ, dW;
};

// L = sum_{k=1..Np} MSE(Z_k, Zhat_k) + MSE(U_k, Uhat_k), MSE averaged over all
// entries of the batch. Zhat_k is the k-step latent rollout from Z_0 driven by
// the embedded recorded actions. Gradients are accumulated into *grad if given.
LossParts multistep_loss(const KoopmanModel& m, const WindowBatch& batch, KoopmanGrad* grad = nullptr,
                         LossWorkspace* workspace = nullptr);

struct TrainingConfig {
    std::size_t horizon = 10;  // Np
    std::size_t batch_size = 1000;
    double learning_rate = 1e-3;
    std::size_t epochs = 30;
    std::size_t window_stride = 1;
    std::uint64_t seed = 0;
    std::size_t eval_windows = 2000;
    // Learning rate decays geometrically to this value over the run; 0 keeps it constant.
    double final_learning_rate = 0.0;
    // Re-solve K_x, K_u by least squares before every epoch and after the last one.
    bool refit_operators = false;
};

struct TrainingResult {
    double initial_loss = 0.0;           // on the fixed evaluation batch
    double final_loss = 0.0;             // same batch, after training
    std::vector<double> epoch_losses;    // mean minibatch loss per epoch
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

// Least-squares K_x, K_u for the current embeddings over every one-step pair of
// the dataset: minimises sum |z_{t+1} - K_x z_t - K_u w_t|^2 + ridge |K|^2.
void refit_operators(KoopmanModel& m, const TrajectoryDataset& ds, double ridge = 1e-8);

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

TrainingResult train_model(KoopmanModel& m, const TrajectoryDataset& ds, const TrainingConfig& cfg,
                           const EpochCallback& on_epoch = {});

// --- checkpoints ------------------------------------------------------------

void save_model(const KoopmanModel& m, const std::filesystem::path& file);
KoopmanModel load_model(const std::filesystem::path& file);
nlohmann::json model_to_json(const KoopmanModel& m);
KoopmanModel model_from_json(const nlohmann::json& j);

}  // namespace wncs::koopman
