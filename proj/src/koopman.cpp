#include "wncs/koopman.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace wncs::koopman {

namespace {

constexpr double kAuxFloor = 1e-6;
constexpr char kModelMagic[8] = {'W', 'N', 'C', 'S', 'K', 'P', 'M', '1'};
constexpr char kDataMagic[8] = {'W', 'N', 'C', 'S', 'D', 'A', 'T', '1'};

std::vector<std::size_t> net_widths(std::size_t in, const std::vector<std::size_t>& hidden,
                                    std::size_t out) {
    std::vector<std::size_t> w{in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
}

bool has_net(const nn::DenseNet& net) { return !net.layers().empty(); }

Vec aux_gain(const KoopmanModel& m, const Vec* x) {
    if (!x) throw Error("DKAC model needs the current state to map actions");
    require_dim(x->size(), static_cast<Eigen::Index>(m.D()), "DKAC state");
    return m.aux(*x);
}

}  // namespace

ModelKind parse_model_kind(const std::string& name) {
    if (name == "proposed") return ModelKind::proposed;
    if (name == "dkuc" || name == "DKUC") return ModelKind::dkuc;
    if (name == "dkac" || name == "DKAC") return ModelKind::dkac;
    throw Error("unknown model kind '" + name + "' (expected proposed, dkuc or dkac)");
}

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::proposed: return "proposed";
        case ModelKind::dkuc: return "dkuc";
        case ModelKind::dkac: return "dkac";
    }
    return "?";
}

KoopmanModel KoopmanModel::create(const ModelShape& shape_in, std::uint64_t seed, double u_max) {
    ModelShape shape = shape_in;
    if (shape.state_dim == 0 || shape.action_dim == 0) throw Error("model dims must be positive");
    if (shape.latent_extra == 0) throw Error("latent dimension q must exceed the state dimension");
    if (shape.kind != ModelKind::proposed) shape.action_latent = shape.action_dim;
    if (shape.action_latent == 0) throw Error("action latent dimension must be positive");

    KoopmanModel m;
    m.shape = shape;
    m.u_max = u_max;
    Rng rng = make_stream(seed, 0, 0x6b6f6f70);

    m.state_encoder = nn::DenseNet(net_widths(shape.state_dim, shape.hidden, shape.latent_extra));
    m.state_encoder.init_he_uniform(rng);
    if (shape.kind == ModelKind::proposed) {
        m.action_encoder =
            nn::DenseNet(net_widths(shape.action_dim, shape.hidden, shape.action_latent));
        m.action_encoder.init_he_uniform(rng);
        m.action_decoder =
            nn::DenseNet(net_widths(shape.action_latent, shape.hidden, shape.action_dim));
        m.action_decoder.init_he_uniform(rng);
    } else if (shape.kind == ModelKind::dkac) {
        m.aux = nn::DenseNet(net_widths(shape.state_dim, shape.hidden, shape.action_dim));
        m.aux.init_he_uniform(rng);
        // start the gain near one so the division in decode_action is benign
        auto& last = m.aux.mutable_layers().back();
        std::fill(last.bias.begin(), last.bias.end(), 1.0);
        for (auto& w : last.weight) w *= 0.1;
    }

    const auto q = static_cast<Eigen::Index>(shape.latent_dim());
    const auto qp = static_cast<Eigen::Index>(shape.action_latent);
    std::normal_distribution<double> noise(0.0, 1e-3);
    m.Kx = Mat::Identity(q, q);
    for (Eigen::Index i = 0; i < m.Kx.size(); ++i) m.Kx.data()[i] += noise(rng);
    m.Ku.resize(q, qp);
    std::normal_distribution<double> unoise(0.0, 1e-2);
    for (Eigen::Index i = 0; i < m.Ku.size(); ++i) m.Ku.data()[i] = unoise(rng);
    return m;
}

std::vector<std::span<double>> KoopmanModel::parameter_blocks() {
    std::vector<std::span<double>> blocks;
    for (auto* net : {&state_encoder, &action_encoder, &action_decoder, &aux}) {
        auto b = net->parameter_blocks();
        blocks.insert(blocks.end(), b.begin(), b.end());
    }
    blocks.emplace_back(Kx.data(), static_cast<std::size_t>(Kx.size()));
    blocks.emplace_back(Ku.data(), static_cast<std::size_t>(Ku.size()));
    return blocks;
}

void KoopmanModel::touch() {
    state_encoder.touch();
    action_encoder.touch();
    action_decoder.touch();
    aux.touch();
}

Vec embed_state(const KoopmanModel& m, const Vec& x) {
    require_dim(x.size(), static_cast<Eigen::Index>(m.D()), "embed_state");
    Vec z(static_cast<Eigen::Index>(m.q()));
    z.head(x.size()) = x;
    z.tail(static_cast<Eigen::Index>(m.shape.latent_extra)) = m.state_encoder(x);
    return z;
}

Vec embed_action(const KoopmanModel& m, const Vec& u, const Vec* x) {
    require_dim(u.size(), static_cast<Eigen::Index>(m.Dp()), "embed_action");
    switch (m.kind()) {
        case ModelKind::proposed: return m.action_encoder(u);
        case ModelKind::dkuc: return u;
        case ModelKind::dkac: return aux_gain(m, x).cwiseProduct(u);
    }
    return u;
}

Vec decode_action(const KoopmanModel& m, const Vec& w, const Vec* x, bool* saturated) {
    require_dim(w.size(), static_cast<Eigen::Index>(m.qp()), "decode_action");
    if (saturated) *saturated = false;
    switch (m.kind()) {
        case ModelKind::proposed: return m.action_decoder(w);
        case ModelKind::dkuc: return w;
        case ModelKind::dkac: {
            const Vec a = aux_gain(m, x);
            Vec u(w.size());
            for (Eigen::Index i = 0; i < w.size(); ++i) {
                if (std::abs(a[i]) < kAuxFloor) {
                    const double sign = (w[i] >= 0.0) == (a[i] >= 0.0) ? 1.0 : -1.0;
                    u[i] = w[i] == 0.0 ? 0.0 : sign * m.u_max;
                    if (saturated) *saturated = true;
                } else {
                    u[i] = w[i] / a[i];
                }
            }
            return u;
        }
    }
    return w;
}

Vec latent_step(const KoopmanModel& m, const Vec& z, const Vec& w) {
    require_dim(z.size(), m.Kx.cols(), "latent_step state");
    require_dim(w.size(), m.Ku.cols(), "latent_step action");
    return m.Kx * z + m.Ku * w;
}

Vec predict_missing_state(const KoopmanModel& m, const Vec& x_last, const std::vector<Vec>& actions) {
    Vec z = embed_state(m, x_last);
    for (const auto& u : actions) {
        const Vec xhat = z.head(static_cast<Eigen::Index>(m.D()));
        z = latent_step(m, z, embed_action(m, u, &xhat));
    }
    return z.head(static_cast<Eigen::Index>(m.D()));
}

// --- data -----------------------------------------------------------------

std::size_t TrajectoryDataset::truncated_count() const {
    return static_cast<std::size_t>(std::count_if(trajectories.begin(), trajectories.end(),
                                                  [](const Trajectory& t) { return t.truncated; }));
}

Vec StateBox::sample(Rng& rng) const {
    if (low.size() != high.size()) throw DimensionError("state box bounds differ in length");
    Vec x(low.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (!(low[i] <= high[i])) throw Error("state box has low > high");
        std::uniform_real_distribution<double> d(low[i], high[i]);
        x[i] = d(rng);
    }
    return x;
}

dynamics::NoiseModel dataset_noise(std::size_t dim, double noise_variance, std::uint64_t seed,
                                   std::size_t k) {
    if (noise_variance <= 0.0) return dynamics::NoiseModel::none(static_cast<Eigen::Index>(dim));
    Rng s = make_stream(seed, k, 1);
    return dynamics::NoiseModel::isotropic(static_cast<Eigen::Index>(dim), noise_variance, s());
}

TrajectoryDataset generate_dataset(const dynamics::Plant& plant, double noise_variance,
                                   std::size_t n_traj, std::size_t n_steps, const StateBox& box,
                                   std::uint64_t seed) {
    if (n_traj == 0 || n_steps == 0) throw Error("generate_dataset: counts must be >= 1");
    const auto D = plant.state_dim();
    const auto Dp = plant.action_dim();
    require_dim(box.low.size(), D, "state box");

    TrajectoryDataset ds;
    ds.meta.plant = plant.kind;
    ds.meta.nonlinearity = plant.pendulum.nonlinearity;
    ds.meta.u_max = plant.u_max;
    ds.meta.dt = plant.dt;
    ds.meta.noise_variance = noise_variance;
    ds.meta.seed = seed;
    ds.trajectories.resize(n_traj);

    for (std::size_t k = 0; k < n_traj; ++k) {
        Rng rng = make_stream(seed, k, 0);
        auto noise = dataset_noise(static_cast<std::size_t>(D), noise_variance, seed, k);
        std::uniform_real_distribution<double> act(-plant.u_max, plant.u_max);
        auto& tr = ds.trajectories[k];
        tr.states.resize(static_cast<Eigen::Index>(n_steps), D);
        tr.actions.resize(static_cast<Eigen::Index>(n_steps), Dp);
        Vec x = box.sample(rng);
        std::size_t valid = n_steps;
        for (std::size_t t = 0; t < n_steps; ++t) {
            const auto row = static_cast<Eigen::Index>(t);
            tr.states.row(row) = x.transpose();
            for (Eigen::Index j = 0; j < Dp; ++j) tr.actions(row, j) = act(rng);
            if (t + 1 == n_steps) break;
            try {
                x = plant.step(x, tr.actions.row(row).transpose(), noise);
            } catch (const dynamics::DivergedPlant&) {
                valid = t + 1;
                tr.truncated = true;
                break;
            }
        }
        if (tr.truncated) {
            tr.states.conservativeResize(static_cast<Eigen::Index>(valid), D);
            tr.actions.conservativeResize(static_cast<Eigen::Index>(valid), Dp);
        }
    }
    return ds;
}

namespace {

nlohmann::json meta_to_json(const DatasetMeta& m) {
    return {{"plant", dynamics::to_string(m.plant)},
            {"nonlinearity", dynamics::to_string(m.nonlinearity)},
            {"u_max", m.u_max},
            {"dt", m.dt},
            {"noise_variance", m.noise_variance},
            {"seed", m.seed}};
}

DatasetMeta meta_from_json(const nlohmann::json& j) {
    DatasetMeta m;
    m.plant = dynamics::parse_plant_kind(j.at("plant").get<std::string>());
    m.nonlinearity = dynamics::parse_nonlinearity(j.at("nonlinearity").get<std::string>());
    m.u_max = j.at("u_max").get<double>();
    m.dt = j.at("dt").get<double>();
    m.noise_variance = j.at("noise_variance").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void save_dataset_csv(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = meta_to_json(ds.meta);
    meta["trajectories"] = ds.trajectories.size();
    std::vector<bool> truncated;
    for (const auto& t : ds.trajectories) truncated.push_back(t.truncated);
    meta["truncated"] = truncated;
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';

    for (std::size_t k = 0; k < ds.trajectories.size(); ++k) {
        const auto& tr = ds.trajectories[k];
        std::ofstream os(dir / ("traj_" + std::to_string(k) + ".csv"));
        if (!os) throw Error("cannot write dataset file in " + dir.string());
        for (Eigen::Index i = 0; i < tr.states.cols(); ++i) os << (i ? "," : "") << 'x' << i + 1;
        for (Eigen::Index i = 0; i < tr.actions.cols(); ++i) os << ",u" << i + 1;
        os << '\n';
        for (Eigen::Index r = 0; r < tr.states.rows(); ++r) {
            for (Eigen::Index i = 0; i < tr.states.cols(); ++i)
                os << (i ? "," : "") << fmt(tr.states(r, i));
            for (Eigen::Index i = 0; i < tr.actions.cols(); ++i) os << ',' << fmt(tr.actions(r, i));
            os << '\n';
        }
    }
}

TrajectoryDataset load_dataset_csv(const std::filesystem::path& dir) {
    std::ifstream ms(dir / "meta.json");
    if (!ms) throw Error("dataset metadata not found: " + (dir / "meta.json").string());
    const auto meta = nlohmann::json::parse(ms);
    TrajectoryDataset ds;
    ds.meta = meta_from_json(meta);
    const auto n = meta.at("trajectories").get<std::size_t>();
    const auto truncated = meta.at("truncated").get<std::vector<bool>>();
    ds.trajectories.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto path = dir / ("traj_" + std::to_string(k) + ".csv");
        std::ifstream is(path);
        if (!is) throw Error("missing trajectory file " + path.string());
        std::string header;
        std::getline(is, header);
        std::size_t nx = 0, nu = 0;
        {
            std::stringstream hs(header);
            std::string col;
            while (std::getline(hs, col, ',')) (col.front() == 'x' ? nx : nu)++;
        }
        std::vector<std::vector<double>> rows;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<double> row;
            std::stringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
            if (row.size() != nx + nu) throw Error("malformed row in " + path.string());
            rows.push_back(std::move(row));
        }
        auto& tr = ds.trajectories[k];
        tr.states.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(nx));
        tr.actions.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(nu));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t i = 0; i < nx; ++i)
                tr.states(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = rows[r][i];
            for (std::size_t i = 0; i < nu; ++i)
                tr.actions(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) =
                    rows[r][nx + i];
        }
        tr.truncated = k < truncated.size() && truncated[k];
    }
    return ds;
}

void save_dataset_binary(const TrajectoryDataset& ds, const std::filesystem::path& file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary);
    if (!os) throw Error("cannot write dataset " + file.string());
    os.write(kDataMagic, sizeof kDataMagic);
    const std::string meta = meta_to_json(ds.meta).dump();
    nn::io::write_u64(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    nn::io::write_u64(os, ds.trajectories.size());
    for (const auto& tr : ds.trajectories) {
        nn::io::write_u64(os, static_cast<std::uint64_t>(tr.states.rows()));
        nn::io::write_u64(os, static_cast<std::uint64_t>(tr.states.cols()));
        nn::io::write_u64(os, static_cast<std::uint64_t>(tr.actions.cols()));
        nn::io::write_u64(os, tr.truncated ? 1 : 0);
        nn::io::write_doubles(os, {tr.states.data(), static_cast<std::size_t>(tr.states.size())});
        nn::io::write_doubles(os, {tr.actions.data(), static_cast<std::size_t>(tr.actions.size())});
    }
}

TrajectoryDataset load_dataset_binary(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw Error("dataset not found: " + file.string());
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kDataMagic))
        throw Error("not a dataset file: " + file.string());
    const auto meta_len = nn::io::read_u64(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    TrajectoryDataset ds;
    ds.meta = meta_from_json(nlohmann::json::parse(meta));
    const auto n = nn::io::read_u64(is);
    ds.trajectories.resize(n);
    for (auto& tr : ds.trajectories) {
        const auto rows = static_cast<Eigen::Index>(nn::io::read_u64(is));
        const auto nx = static_cast<Eigen::Index>(nn::io::read_u64(is));
        const auto nu = static_cast<Eigen::Index>(nn::io::read_u64(is));
        tr.truncated = nn::io::read_u64(is) != 0;
        tr.states.resize(rows, nx);
        tr.actions.resize(rows, nu);
        nn::io::read_doubles(is, {tr.states.data(), static_cast<std::size_t>(tr.states.size())});
        nn::io::read_doubles(is, {tr.actions.data(), static_cast<std::size_t>(tr.actions.size())});
    }
    return ds;
}

TrajectoryDataset load_dataset(const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) return load_dataset_csv(path);
    if (!std::filesystem::exists(path)) throw Error("dataset not found: " + path.string());
    return load_dataset_binary(path);
}

// --- loss -------------------------------------------------------------------

std::vector<WindowRef> enumerate_windows(const TrajectoryDataset& ds, std::size_t horizon,
                                         std::size_t stride) {
    if (horizon == 0) throw Error("prediction horizon must be >= 1");
    if (stride == 0) stride = 1;
    std::vector<WindowRef> refs;
    for (std::size_t k = 0; k < ds.trajectories.size(); ++k) {
        const auto len = static_cast<std::size_t>(ds.trajectories[k].states.rows());
        for (std::size_t s = 0; s + horizon < len; s += stride) refs.push_back({k, s});
    }
    if (refs.empty())
        throw HorizonTooLong("no trajectory has " + std::to_string(horizon + 1) +
                             " consecutive samples for horizon " + std::to_string(horizon));
    return refs;
}

WindowBatch make_batch(const TrajectoryDataset& ds, std::span<const WindowRef> refs,
                       std::size_t horizon) {
    if (ds.trajectories.empty()) throw Error("empty dataset");
    WindowBatch b;
    b.windows = refs.size();
    b.horizon = horizon;
    b.state_dim = static_cast<std::size_t>(ds.trajectories.front().states.cols());
    b.action_dim = static_cast<std::size_t>(ds.trajectories.front().actions.cols());
    b.states.reserve(b.windows * b.steps() * b.state_dim);
    b.actions.reserve(b.windows * b.steps() * b.action_dim);
    for (const auto& r : refs) {
        const auto& tr = ds.trajectories.at(r.trajectory);
        if (r.start + horizon >= static_cast<std::size_t>(tr.states.rows()))
            throw HorizonTooLong("window at " + std::to_string(r.start) + " of trajectory " +
                                 std::to_string(r.trajectory) + " exceeds its length");
        for (std::size_t k = 0; k <= horizon; ++k) {
            const auto row = static_cast<Eigen::Index>(r.start + k);
            for (Eigen::Index i = 0; i < tr.states.cols(); ++i) b.states.push_back(tr.states(row, i));
            for (Eigen::Index i = 0; i < tr.actions.cols(); ++i)
                b.actions.push_back(tr.actions(row, i));
        }
    }
    return b;
}

KoopmanGrad KoopmanGrad::zeros_like(const KoopmanModel& m) {
    KoopmanGrad g;
    g.state_encoder = m.state_encoder.make_grad();
    if (has_net(m.action_encoder)) g.action_encoder = m.action_encoder.make_grad();
    if (has_net(m.action_decoder)) g.action_decoder = m.action_decoder.make_grad();
    if (has_net(m.aux)) g.aux = m.aux.make_grad();
    g.Kx = Mat::Zero(m.Kx.rows(), m.Kx.cols());
    g.Ku = Mat::Zero(m.Ku.rows(), m.Ku.cols());
    return g;
}

std::vector<std::span<double>> KoopmanGrad::blocks() {
    std::vector<std::span<double>> out;
    for (auto* g : {&state_encoder, &action_encoder, &action_decoder, &aux}) {
        auto b = nn::DenseNet::grad_blocks(*g);
        out.insert(out.end(), b.begin(), b.end());
    }
    out.emplace_back(Kx.data(), static_cast<std::size_t>(Kx.size()));
    out.emplace_back(Ku.data(), static_cast<std::size_t>(Ku.size()));
    return out;
}

LossParts multistep_loss(const KoopmanModel& m, const WindowBatch& batch, KoopmanGrad* grad,
                         LossWorkspace* workspace) {
    const std::size_t n = batch.windows;
    const std::size_t S = batch.steps();
    const std::size_t Np = batch.horizon;
    const std::size_t D = m.D(), Dp = m.Dp(), q = m.q(), qp = m.qp(), e = q - D;
    if (n == 0) throw Error("multistep_loss: empty batch");
    if (Np == 0) throw Error("multistep_loss: horizon must be >= 1");
    if (batch.state_dim != D || batch.action_dim != Dp)
        throw DimensionError("multistep_loss: batch dimensions do not match the model");
    const std::size_t R = n * S;
    const auto Ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

    LossWorkspace local;
    LossWorkspace& ws = workspace ? *workspace : local;

    m.state_encoder.forward(batch.states, R, ws.encoder);
    const auto E = ws.encoder.output();

    // latent action rows (R x qp)
    auto& W = ws.W;
    W.resize(R * qp);
    switch (m.kind()) {
        case ModelKind::proposed: {
            m.action_encoder.forward(batch.actions, R, ws.action);
            const auto out = ws.action.output();
            std::copy(out.begin(), out.end(), W.begin());
            break;
        }
        case ModelKind::dkuc:
            std::copy(batch.actions.begin(), batch.actions.end(), W.begin());
            break;
        case ModelKind::dkac: {
            m.aux.forward(batch.states, R, ws.aux);
            const auto a = ws.aux.output();
            for (std::size_t i = 0; i < R * qp; ++i) W[i] = a[i] * batch.actions[i];
            break;
        }
    }

    // Z_k and W_k as q x n / qp x n column blocks
    auto& Z = ws.Z;
    auto& Wk = ws.Wk;
    auto& Zhat = ws.Zhat;
    Z.resize(S);
    Wk.resize(S);
    Zhat.resize(S);
    for (std::size_t k = 0; k < S; ++k) {
        Z[k].resize(Ei(q), Ei(n));
        Wk[k].resize(Ei(qp), Ei(n));
    }
    for (std::size_t w = 0; w < n; ++w) {
        for (std::size_t k = 0; k < S; ++k) {
            const std::size_t r = w * S + k;
            auto col = Z[k].col(Ei(w));
            for (std::size_t i = 0; i < D; ++i) col[Ei(i)] = batch.states[r * D + i];
            for (std::size_t i = 0; i < e; ++i) col[Ei(D + i)] = E[r * e + i];
            for (std::size_t i = 0; i < qp; ++i) Wk[k](Ei(i), Ei(w)) = W[r * qp + i];
        }
    }

    Zhat[0] = Z[0];
    for (std::size_t k = 1; k < S; ++k) {
        Zhat[k].noalias() = m.Kx * Zhat[k - 1];
        Zhat[k].noalias() += m.Ku * Wk[k - 1];
    }

    LossParts loss;
    const double zscale = 1.0 / static_cast<double>(n * q);
    for (std::size_t k = 1; k < S; ++k) loss.latent += (Zhat[k] - Z[k]).squaredNorm() * zscale;

    auto& dUhat = ws.dUhat;
    if (m.kind() == ModelKind::proposed) {
        m.action_decoder.forward(W, R, ws.decoder);
        const auto Uhat = ws.decoder.output();
        const double uscale = 1.0 / static_cast<double>(n * Dp);
        if (grad) dUhat.assign(R * Dp, 0.0);
        for (std::size_t w = 0; w < n; ++w) {
            for (std::size_t k = 1; k < S; ++k) {
                const std::size_t r = w * S + k;
                for (std::size_t i = 0; i < Dp; ++i) {
                    const double d = Uhat[r * Dp + i] - batch.actions[r * Dp + i];
                    loss.reconstruction += d * d * uscale;
                    if (grad) dUhat[r * Dp + i] = 2.0 * d * uscale;
                }
            }
        }
    }
    loss.total = loss.latent + loss.reconstruction;
    if (!grad) return loss;

    // reverse pass through the latent rollout
    auto& dZ = ws.dZ;
    auto& dW = ws.dW;
    dZ.resize(S);
    dW.resize(S);
    for (std::size_t k = 0; k < S; ++k) {
        dZ[k].setZero(Ei(q), Ei(n));
        dW[k].setZero(Ei(qp), Ei(n));
    }
    Mat G = Mat::Zero(Ei(q), Ei(n));
    Mat direct(Ei(q), Ei(n));
    for (std::size_t k = Np; k >= 1; --k) {
        direct = (2.0 * zscale) * (Zhat[k] - Z[k]);
        dZ[k] -= direct;
        G += direct;
        grad->Kx.noalias() += G * Zhat[k - 1].transpose();
        grad->Ku.noalias() += G * Wk[k - 1].transpose();
        dW[k - 1].noalias() += m.Ku.transpose() * G;
        direct.noalias() = m.Kx.transpose() * G;
        G.swap(direct);
    }
    dZ[0] += G;

    auto& dE = ws.dE;
    auto& dWrows = ws.dW_rows;
    dE.resize(R * e);
    dWrows.resize(R * qp);
    for (std::size_t w = 0; w < n; ++w) {
        for (std::size_t k = 0; k < S; ++k) {
            const std::size_t r = w * S + k;
            for (std::size_t i = 0; i < e; ++i) dE[r * e + i] = dZ[k](Ei(D + i), Ei(w));
            for (std::size_t i = 0; i < qp; ++i) dWrows[r * qp + i] = dW[k](Ei(i), Ei(w));
        }
    }
    m.state_encoder.backward(ws.encoder, dE, grad->state_encoder, {});

    switch (m.kind()) {
        case ModelKind::proposed: {
            auto& dW_dec = ws.dW_dec;
            dW_dec.resize(R * qp);
            m.action_decoder.backward(ws.decoder, dUhat, grad->action_decoder, dW_dec);
            for (std::size_t i = 0; i < dWrows.size(); ++i) dWrows[i] += dW_dec[i];
            m.action_encoder.backward(ws.action, dWrows, grad->action_encoder, {});
            break;
        }
        case ModelKind::dkuc: break;
        case ModelKind::dkac: {
            auto& dA = ws.dA;
            dA.resize(R * Dp);
            for (std::size_t i = 0; i < dA.size(); ++i) dA[i] = dWrows[i] * batch.actions[i];
            m.aux.backward(ws.aux, dA, grad->aux, {});
            break;
        }
    }
    return loss;
}

void refit_operators(KoopmanModel& m, const TrajectoryDataset& ds, double ridge) {
    const auto q = static_cast<Eigen::Index>(m.q());
    const auto qp = static_cast<Eigen::Index>(m.qp());
    Mat gram = Mat::Zero(q + qp, q + qp);
    Mat cross = Mat::Zero(q, q + qp);
    Vec feat(q + qp);
    std::size_t pairs = 0;
    for (const auto& tr : ds.trajectories) {
        if (tr.states.rows() < 2) continue;
        Vec x = tr.states.row(0).transpose();
        Vec z = embed_state(m, x);
        for (Eigen::Index k = 0; k + 1 < tr.states.rows(); ++k) {
            const Vec u = tr.actions.row(k).transpose();
            feat << z, embed_action(m, u, &x);
            x = tr.states.row(k + 1).transpose();
            Vec next = embed_state(m, x);
            gram.selfadjointView<Eigen::Lower>().rankUpdate(feat);
            cross.noalias() += next * feat.transpose();
            z = std::move(next);
            ++pairs;
        }
    }
    if (pairs == 0) throw Error("refit_operators: dataset has no consecutive state pairs");
    gram = gram.selfadjointView<Eigen::Lower>();
    gram.diagonal().array() += ridge * static_cast<double>(pairs);
    const Mat K = gram.ldlt().solve(cross.transpose()).transpose();
    if (!K.allFinite()) throw Error("refit_operators: least-squares solve failed");
    m.Kx = K.leftCols(q);
    m.Ku = K.rightCols(qp);
    m.touch();
}

TrainingResult train_model(KoopmanModel& m, const TrajectoryDataset& ds, const TrainingConfig& cfg,
                           const EpochCallback& on_epoch) {
    if (cfg.horizon == 0) throw Error("training horizon must be >= 1");
    if (cfg.batch_size == 0) throw Error("batch size must be >= 1");
    auto windows = enumerate_windows(ds, cfg.horizon, cfg.window_stride);

    std::vector<WindowRef> eval_refs = windows;
    {
        Rng er = make_stream(cfg.seed, 0, 0x6576616c);
        std::shuffle(eval_refs.begin(), eval_refs.end(), er);
        if (cfg.eval_windows > 0 && eval_refs.size() > cfg.eval_windows)
            eval_refs.resize(cfg.eval_windows);
    }
    const WindowBatch eval_batch = make_batch(ds, eval_refs, cfg.horizon);

    TrainingResult result;
    LossWorkspace eval_ws;
    result.initial_loss = multistep_loss(m, eval_batch, nullptr, &eval_ws).total;
    if (!std::isfinite(result.initial_loss))
        throw TrainingDiverged("initial loss is not finite; check the dataset for non-finite values");

    nn::Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
    KoopmanGrad grad = KoopmanGrad::zeros_like(m);
    LossWorkspace ws;
    Rng shuffle_rng = make_stream(cfg.seed, 0, 0x73687566);

    const double decay =
        cfg.final_learning_rate > 0.0 && cfg.epochs > 1
            ? std::pow(cfg.final_learning_rate / cfg.learning_rate, 1.0 / static_cast<double>(cfg.epochs - 1))
            : 1.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.refit_operators) refit_operators(m, ds);
        adam.set_learning_rate(cfg.learning_rate * std::pow(decay, static_cast<double>(epoch)));
        std::shuffle(windows.begin(), windows.end(), shuffle_rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < windows.size(); start += cfg.batch_size) {
            const std::size_t len = std::min(cfg.batch_size, windows.size() - start);
            const auto batch =
                make_batch(ds, std::span<const WindowRef>(windows).subspan(start, len), cfg.horizon);
            for (auto b : grad.blocks()) std::fill(b.begin(), b.end(), 0.0);
            const auto loss = multistep_loss(m, batch, &grad, &ws);
            if (!std::isfinite(loss.total)) {
                std::ostringstream os;
                os << "training diverged: non-finite loss at epoch " << epoch << ", batch "
                   << batches << " (learning rate " << cfg.learning_rate << ")";
                throw TrainingDiverged(os.str());
            }
            const auto params = m.parameter_blocks();
            const auto grads = grad.blocks();
            adam.step(params, grads);
            m.touch();
            sum += loss.total;
            ++batches;
        }
        result.epoch_losses.push_back(sum / static_cast<double>(batches));
        if (on_epoch) on_epoch(epoch, result.epoch_losses.back());
    }
    if (cfg.refit_operators && cfg.epochs > 0) refit_operators(m, ds);
    result.final_loss = multistep_loss(m, eval_batch, nullptr, &eval_ws).total;
    return result;
}

// --- checkpoints ------------------------------------------------------------

namespace {

void write_net(std::ostream& os, const nn::DenseNet& net) {
    nn::io::write_u64(os, has_net(net) ? 1 : 0);
    if (has_net(net)) net.write_binary(os);
}

nn::DenseNet read_net(std::istream& is) {
    if (nn::io::read_u64(is) == 0) return {};
    return nn::DenseNet::read_binary(is);
}

void check_model(const KoopmanModel& m) {
    const auto q = static_cast<Eigen::Index>(m.q());
    if (m.Kx.rows() != q || m.Kx.cols() != q || m.Ku.rows() != q)
        throw Error("model checkpoint: Koopman matrix shapes do not match the latent dimension");
    if (m.state_encoder.input_dim() != m.D() || m.state_encoder.output_dim() != m.shape.latent_extra)
        throw Error("model checkpoint: state encoder shape mismatch");
    if (m.kind() == ModelKind::proposed && (!has_net(m.action_encoder) || !has_net(m.action_decoder)))
        throw Error("model checkpoint: proposed model lacks action encoder/decoder");
    if (m.kind() == ModelKind::dkac && !has_net(m.aux))
        throw Error("model checkpoint: DKAC model lacks its auxiliary network");
}

}  // namespace

void save_model(const KoopmanModel& m, const std::filesystem::path& file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    if (file.extension() == ".json") {
        std::ofstream(file) << model_to_json(m).dump() << '\n';
        return;
    }
    std::ofstream os(file, std::ios::binary);
    if (!os) throw Error("cannot write model " + file.string());
    os.write(kModelMagic, sizeof kModelMagic);
    nn::io::write_u64(os, static_cast<std::uint64_t>(m.kind()));
    nn::io::write_u64(os, m.shape.state_dim);
    nn::io::write_u64(os, m.shape.action_dim);
    nn::io::write_u64(os, m.shape.latent_extra);
    nn::io::write_u64(os, m.shape.action_latent);
    nn::io::write_u64(os, m.shape.hidden.size());
    for (auto h : m.shape.hidden) nn::io::write_u64(os, h);
    nn::io::write_doubles(os, std::span<const double>(&m.u_max, 1));
    write_net(os, m.state_encoder);
    write_net(os, m.action_encoder);
    write_net(os, m.action_decoder);
    write_net(os, m.aux);
    nn::io::write_matrix(os, m.Kx);
    nn::io::write_matrix(os, m.Ku);
}

KoopmanModel load_model(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw Error("model file not found: " + file.string());
    if (file.extension() == ".json") {
        std::ifstream is(file);
        return model_from_json(nlohmann::json::parse(is));
    }
    std::ifstream is(file, std::ios::binary);
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kModelMagic))
        throw Error("not a model checkpoint: " + file.string());
    KoopmanModel m;
    const auto kind = nn::io::read_u64(is);
    if (kind > 2) throw Error("model checkpoint: unknown model kind");
    m.shape.kind = static_cast<ModelKind>(kind);
    m.shape.state_dim = nn::io::read_u64(is);
    m.shape.action_dim = nn::io::read_u64(is);
    m.shape.latent_extra = nn::io::read_u64(is);
    m.shape.action_latent = nn::io::read_u64(is);
    m.shape.hidden.resize(nn::io::read_u64(is));
    for (auto& h : m.shape.hidden) h = nn::io::read_u64(is);
    nn::io::read_doubles(is, std::span<double>(&m.u_max, 1));
    m.state_encoder = read_net(is);
    m.action_encoder = read_net(is);
    m.action_decoder = read_net(is);
    m.aux = read_net(is);
    m.Kx = nn::io::read_matrix(is);
    m.Ku = nn::io::read_matrix(is);
    check_model(m);
    return m;
}

nlohmann::json model_to_json(const KoopmanModel& m) {
    auto mat = [](const Mat& a) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            std::vector<double> row(static_cast<std::size_t>(a.cols()));
            for (Eigen::Index c = 0; c < a.cols(); ++c) row[static_cast<std::size_t>(c)] = a(r, c);
            rows.push_back(row);
        }
        return rows;
    };
    nlohmann::json j;
    j["kind"] = to_string(m.kind());
    j["state_dim"] = m.shape.state_dim;
    j["action_dim"] = m.shape.action_dim;
    j["latent_extra"] = m.shape.latent_extra;
    j["action_latent"] = m.shape.action_latent;
    j["hidden"] = m.shape.hidden;
    j["u_max"] = m.u_max;
    j["state_encoder"] = m.state_encoder.to_json();
    if (has_net(m.action_encoder)) j["action_encoder"] = m.action_encoder.to_json();
    if (has_net(m.action_decoder)) j["action_decoder"] = m.action_decoder.to_json();
    if (has_net(m.aux)) j["aux"] = m.aux.to_json();
    j["Kx"] = mat(m.Kx);
    j["Ku"] = mat(m.Ku);
    return j;
}

KoopmanModel model_from_json(const nlohmann::json& j) {
    auto mat = [](const nlohmann::json& rows) {
        const auto r = rows.size();
        const auto c = r ? rows[0].size() : 0;
        Mat a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (std::size_t i = 0; i < r; ++i) {
            if (rows[i].size() != c) throw Error("model json: ragged matrix");
            for (std::size_t k = 0; k < c; ++k)
                a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k].get<double>();
        }
        return a;
    };
    KoopmanModel m;
    m.shape.kind = parse_model_kind(j.at("kind").get<std::string>());
    m.shape.state_dim = j.at("state_dim").get<std::size_t>();
    m.shape.action_dim = j.at("action_dim").get<std::size_t>();
    m.shape.latent_extra = j.at("latent_extra").get<std::size_t>();
    m.shape.action_latent = j.at("action_latent").get<std::size_t>();
    m.shape.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    m.u_max = j.at("u_max").get<double>();
    m.state_encoder = nn::DenseNet::from_json(j.at("state_encoder"));
    if (j.contains("action_encoder")) m.action_encoder = nn::DenseNet::from_json(j["action_encoder"]);
    if (j.contains("action_decoder")) m.action_decoder = nn::DenseNet::from_json(j["action_decoder"]);
    if (j.contains("aux")) m.aux = nn::DenseNet::from_json(j["aux"]);
    m.Kx = mat(j.at("Kx"));
    m.Ku = mat(j.at("Ku"));
    check_model(m);
    return m;
}

}  // namespace wncs::koopman
