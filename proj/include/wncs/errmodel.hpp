#pragma once

// Closed-form surrogate for the state prediction error as a polynomial in the
// state norm and the age of information,
//
//   eps(|x|, beta) = alpha . phi(|x|, beta),
//
// with the feature vector phi fixed per degree:
//   1: [|x|, beta]
//   2: [|x|, beta, |x|^2, beta^2, |x| beta]
//   3: degree 2 followed by [|x|^3, beta^3, |x|^2 beta, |x| beta^2]

#include <filesystem>
#include <vector>

#include "wncs/control.hpp"
#include "wncs/dynamics.hpp"
#include "wncs/koopman.hpp"

namespace wncs::errmodel {

struct ErrorSample {
    double x_norm = 0.0;
    double beta = 1.0;
    double error = 0.0;
};

struct CollectOptions {
    std::size_t samples = 10000;
    std::size_t beta_max = 30;
    std::uint64_t seed = 0;
    koopman::StateBox box;
    double noise_variance = 0.0;
    // Replace the plant by the model's own latent rollout (errors are then zero).
    bool self_consistent = false;
};

struct CollectResult {
    std::vector<ErrorSample> samples;
    std::size_t discarded = 0;  // plant diverged during the rollout
};

// Per sample: x uniform in the box, beta uniform in [1, beta_max], the plant
// driven for beta steps by the regulator's planned actions from x, and the
// error |predict_missing_state(x, actions) - x_beta|.
CollectResult collect_samples(const control::Regulator& reg, const dynamics::Plant& plant,
                              const CollectOptions& opt);

std::size_t feature_count(int degree);
void features(double x_norm, double beta, int degree, double* out);

struct ErrorPolyCoeffs {
    int degree = 2;
    Vec alpha;
    bool ridge = false;  // the ridge fallback was needed
};

class RankDeficient : public Error {
public:
    using Error::Error;
};

// Least squares through the normal equations on column-scaled features; a
// 1e-8 ridge is added when the scaled Gram matrix is near singular.
ErrorPolyCoeffs fit_polynomial(const std::vector<ErrorSample>& samples, int degree);

// Clamped at zero.
double eval_error(const ErrorPolyCoeffs& c, double x_norm, double beta);
// Unclamped fitted value.
double eval_raw(const ErrorPolyCoeffs& c, double x_norm, double beta);

double mean_abs_residual(const ErrorPolyCoeffs& c, const std::vector<ErrorSample>& samples);

struct DegreeReport {
    int degree = 0;
    double train_residual = 0.0;
    double holdout_residual = 0.0;
};

struct DegreeSelection {
    int best = 0;
    std::vector<DegreeReport> table;
};

// 80/20 split from a fixed-seed shuffle. Ties on held-out residual go to the
// lower degree.
DegreeSelection select_degree(const std::vector<ErrorSample>& samples, std::vector<int> degrees,
                              std::uint64_t seed = 0);

void save_samples_csv(const std::vector<ErrorSample>& samples, const std::filesystem::path& file);
std::vector<ErrorSample> load_samples_csv(const std::filesystem::path& file);
void save_coeffs_csv(const ErrorPolyCoeffs& c, const std::filesystem::path& file);
ErrorPolyCoeffs load_coeffs_csv(const std::filesystem::path& file);

}  // namespace wncs::errmodel
