#pragma once

// Rician block-fading link: gain sampling, SNR, outage probability via the
// first-order Marcum Q-function, and minimum-power allocation.

#include <complex>

#include "wncs/common.hpp"

namespace wncs::channel {

// All quantities linear-scale. Construct from config units with from_config().
struct ChannelParams {
    double kappa = 10.0;           // Rician factor
    double n0 = 0.0;               // noise PSD, W/Hz
    double bandwidth = 2.4e9;      // Hz
    double gamma0 = 100.0;         // SNR threshold, linear
    double outage_target = 1e-3;   // in (0, 1)

    static ChannelParams from_config(double kappa, double n0_dbm_per_hz, double bandwidth_hz,
                                     double gamma0_db, double outage_target);
    double noise_power() const { return n0 * bandwidth; }
    void validate() const;
};

struct LinkBudget {
    double power = 0.0;   // W
    double outage = 1.0;  // achieved outage at that power
};

double db_to_linear(double db);
double dbm_per_hz_to_w_per_hz(double dbm);

// h = sqrt(k/(1+k)) e^{j phi} + sqrt(1/(1+k)) h~,  phi ~ U[0, 2pi), h~ ~ CN(0, 1).
std::complex<double> sample_gain(double kappa, Rng& rng);

// p |h|^2 / (N0 w)
double snr(double power, std::complex<double> h, double n0, double bandwidth);

// First-order Marcum Q-function, Q1(a, b) = int_b^inf x exp(-(x^2+a^2)/2) I0(a x) dx.
//
// Evaluated as the Neumann series e^{-(a^2+b^2)/2} sum_k (a/b)^k I_k(ab), regrouped
// into Poisson-weighted form
//     Q1 = sum_k Pois(k; a^2/2) P[Pois(b^2/2) <= k],
// whose terms are all in [0, 1]. The series is truncated once the remaining
// Poisson weight falls below kMarcumTruncation.
inline constexpr double kMarcumTruncation = 1e-10;
double marcum_q1(double a, double b);
// 1 - Q1(a, b), accurate in relative terms when the result is tiny.
double marcum_q1_complement(double a, double b);

class InvalidPower : public Error {
public:
    using Error::Error;
};

// O = 1 - Q1(sqrt(2k), sqrt(2(1+k) gamma0 N0 w / p)). Throws InvalidPower if p <= 0.
double outage_prob(double power, const ChannelParams& params);

// Smallest p with outage_prob(p) <= target, by geometric bisection.
LinkBudget required_power(const ChannelParams& params, double rel_tol = 1e-6);

// Draws one fading realisation; true when the instantaneous SNR reaches gamma0.
bool transmit(double power, const ChannelParams& params, Rng& rng);

}  // namespace wncs::channel
