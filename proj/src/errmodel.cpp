#include "wncs/errmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace wncs::errmodel {

CollectResult collect_samples(const control::Regulator& reg, const dynamics::Plant& plant,
                              const CollectOptions& opt) {
    if (opt.samples == 0) throw Error("collect_samples: n must be >= 1");
    if (opt.beta_max == 0) throw Error("collect_samples: beta_max must be >= 1");
    const auto& model = *reg.model;
    const auto D = plant.state_dim();
    CollectResult out;
    out.samples.reserve(opt.samples);
    for (std::size_t i = 0; i < opt.samples; ++i) {
        Rng rng = make_stream(opt.seed, i, 0x6572726d);
        const Vec x = opt.box.sample(rng);
        std::uniform_int_distribution<std::size_t> bd(1, opt.beta_max);
        const std::size_t beta = bd(rng);

        const auto plan = control::plan_horizon(reg, koopman::embed_state(model, x), beta);
        std::vector<Vec> actions;
        actions.reserve(beta);
        for (const auto& a : plan) actions.push_back(a.u);
        const Vec predicted = koopman::predict_missing_state(model, x, actions);

        Vec truth;
        if (opt.self_consistent) {
            truth = koopman::predict_missing_state(model, x, actions);
        } else {
            auto noise = opt.noise_variance > 0.0
                             ? dynamics::NoiseModel::isotropic(D, opt.noise_variance,
                                                               make_stream(opt.seed, i, 1)())
                             : dynamics::NoiseModel::none(D);
            truth = x;
            try {
                for (const auto& u : actions) truth = plant.step(truth, u, noise);
            } catch (const dynamics::DivergedPlant&) {
                ++out.discarded;
                continue;
            }
        }
        out.samples.push_back({x.norm(), static_cast<double>(beta), (predicted - truth).norm()});
    }
    return out;
}

std::size_t feature_count(int degree) {
    switch (degree) {
        case 1: return 2;
        case 2: return 5;
        case 3: return 9;
        default: throw Error("error polynomial degree must be 1, 2 or 3");
    }
}

void features(double n, double b, int degree, double* f) {
    f[0] = n;
    f[1] = b;
    if (degree < 2) return;
    f[2] = n * n;
    f[3] = b * b;
    f[4] = n * b;
    if (degree < 3) return;
    f[5] = n * n * n;
    f[6] = b * b * b;
    f[7] = n * n * b;
    f[8] = n * b * b;
}

ErrorPolyCoeffs fit_polynomial(const std::vector<ErrorSample>& samples, int degree) {
    const std::size_t p = feature_count(degree);
    if (samples.size() <= p)
        throw Error("fit_polynomial: need more samples (" + std::to_string(samples.size()) +
                    ") than features (" + std::to_string(p) + ")");
    const auto P = static_cast<Eigen::Index>(p);
    Mat Phi(static_cast<Eigen::Index>(samples.size()), P);
    Vec y(static_cast<Eigen::Index>(samples.size()));
    std::vector<double> f(p);
    for (std::size_t r = 0; r < samples.size(); ++r) {
        features(samples[r].x_norm, samples[r].beta, degree, f.data());
        for (std::size_t c = 0; c < p; ++c)
            Phi(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f[c];
        y[static_cast<Eigen::Index>(r)] = samples[r].error;
    }

    Vec scale(P);
    for (Eigen::Index c = 0; c < P; ++c) {
        const double s = Phi.col(c).norm();
        scale[c] = s > 0.0 ? s : 1.0;
    }
    const Mat Phis = Phi * scale.cwiseInverse().asDiagonal();
    Mat G = Phis.transpose() * Phis;
    const Vec rhs = Phis.transpose() * y;

    ErrorPolyCoeffs c;
    c.degree = degree;
    if (!G.allFinite()) throw RankDeficient("fit_polynomial: non-finite features");
    Eigen::SelfAdjointEigenSolver<Mat> eig(G, Eigen::EigenvaluesOnly);
    const double top = eig.eigenvalues().maxCoeff();
    const double rcond = top > 0.0 ? eig.eigenvalues().minCoeff() / top : 0.0;
    Eigen::LDLT<Mat> ldlt(G);
    if (!(rcond > 1e-12) || ldlt.info() != Eigen::Success) {
        c.ridge = true;
        G.diagonal().array() += 1e-8;
        ldlt.compute(G);
        if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-15))
            throw RankDeficient("fit_polynomial: design matrix is rank deficient beyond ridge rescue");
    }
    const Vec beta = ldlt.solve(rhs);
    if (!beta.allFinite()) throw RankDeficient("fit_polynomial: non-finite solution");
    c.alpha = beta.cwiseQuotient(scale);
    return c;
}

double eval_raw(const ErrorPolyCoeffs& c, double x_norm, double beta) {
    double f[9];
    features(x_norm, beta, c.degree, f);
    double s = 0.0;
    for (Eigen::Index i = 0; i < c.alpha.size(); ++i) s += c.alpha[i] * f[i];
    return s;
}

double eval_error(const ErrorPolyCoeffs& c, double x_norm, double beta) {
    return std::max(0.0, eval_raw(c, x_norm, beta));
}

double mean_abs_residual(const ErrorPolyCoeffs& c, const std::vector<ErrorSample>& samples) {
    if (samples.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : samples) s += std::abs(eval_raw(c, e.x_norm, e.beta) - e.error);
    return s / static_cast<double>(samples.size());
}

DegreeSelection select_degree(const std::vector<ErrorSample>& samples, std::vector<int> degrees,
                              std::uint64_t seed) {
    if (degrees.size() < 2) throw Error("select_degree: need at least two candidate degrees");
    std::sort(degrees.begin(), degrees.end());
    degrees.erase(std::unique(degrees.begin(), degrees.end()), degrees.end());

    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_stream(seed, 0, 0x73706c74);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_train = samples.size() * 4 / 5;
    std::vector<ErrorSample> train, hold;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? train : hold).push_back(samples[idx[i]]);

    DegreeSelection sel;
    double best = 0.0;
    for (int d : degrees) {
        const auto c = fit_polynomial(train, d);
        DegreeReport rep{d, mean_abs_residual(c, train), mean_abs_residual(c, hold)};
        sel.table.push_back(rep);
        // a higher degree must beat the incumbent by more than rounding noise
        const double margin = 1e-9 * std::max(1.0, best) + 1e-12;
        if (sel.best == 0 || rep.holdout_residual < best - margin) {
            sel.best = d;
            best = rep.holdout_residual;
        }
    }
    return sel;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void save_samples_csv(const std::vector<ErrorSample>& samples, const std::filesystem::path& file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file);
    if (!os) throw Error("cannot write " + file.string());
    os << "x_norm,beta,error\n";
    for (const auto& s : samples) os << fmt(s.x_norm) << ',' << fmt(s.beta) << ',' << fmt(s.error) << '\n';
}

std::vector<ErrorSample> load_samples_csv(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw Error("error samples not found: " + file.string());
    std::string line;
    std::getline(is, line);
    std::vector<ErrorSample> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ErrorSample s;
        char c1, c2;
        std::istringstream ls(line);
        if (!(ls >> s.x_norm >> c1 >> s.beta >> c2 >> s.error)) throw Error("malformed sample row: " + line);
        out.push_back(s);
    }
    return out;
}

void save_coeffs_csv(const ErrorPolyCoeffs& c, const std::filesystem::path& file) {
    static const char* names[] = {"x",     "beta",   "x2",     "beta2", "x_beta",
                                  "x3",    "beta3",  "x2_beta", "x_beta2"};
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file);
    if (!os) throw Error("cannot write " + file.string());
    os << "degree,feature,alpha\n";
    for (Eigen::Index i = 0; i < c.alpha.size(); ++i)
        os << c.degree << ',' << names[i] << ',' << fmt(c.alpha[i]) << '\n';
}

ErrorPolyCoeffs load_coeffs_csv(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw Error("coefficient file not found: " + file.string());
    std::string line;
    std::getline(is, line);
    ErrorPolyCoeffs c;
    std::vector<double> alpha;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto a = line.find(',');
        const auto b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) throw Error("malformed coefficient row: " + line);
        c.degree = std::stoi(line.substr(0, a));
        alpha.push_back(std::stod(line.substr(b + 1)));
    }
    if (alpha.size() != feature_count(c.degree))
        throw Error("coefficient file " + file.string() + " has the wrong number of entries");
    c.alpha = Eigen::Map<const Vec>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
    return c;
}

}  // namespace wncs::errmodel
