#include "wncs/channel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

namespace wncs::channel {

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

double dbm_per_hz_to_w_per_hz(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }

ChannelParams ChannelParams::from_config(double kappa, double n0_dbm_per_hz, double bandwidth_hz,
                                         double gamma0_db, double outage_target) {
    ChannelParams p;
    p.kappa = kappa;
    p.n0 = dbm_per_hz_to_w_per_hz(n0_dbm_per_hz);
    p.bandwidth = bandwidth_hz;
    p.gamma0 = db_to_linear(gamma0_db);
    p.outage_target = outage_target;
    p.validate();
    return p;
}

void ChannelParams::validate() const {
    if (!(kappa >= 0.0)) throw Error("channel: kappa must be >= 0");
    if (!(n0 > 0.0)) throw Error("channel: N0 must be > 0");
    if (!(bandwidth > 0.0)) throw Error("channel: bandwidth must be > 0");
    if (!(gamma0 > 0.0)) throw Error("channel: gamma0 must be > 0");
    if (!(outage_target > 0.0 && outage_target < 1.0))
        throw Error("channel: outage target must lie in (0, 1)");
}

std::complex<double> sample_gain(double kappa, Rng& rng) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
    const double los = std::sqrt(kappa / (1.0 + kappa));
    const double nlos = std::sqrt(1.0 / (1.0 + kappa));
    const std::complex<double> bar = std::polar(1.0, phase(rng));
    const double re = normal(rng);
    const double im = normal(rng);
    return los * bar + nlos * std::complex<double>(re, im);
}

double snr(double power, std::complex<double> h, double n0, double bandwidth) {
    return power * std::norm(h) / (n0 * bandwidth);
}

namespace {

double log_pois(double lam, double log_lam, long k) {
    return -lam + static_cast<double>(k) * log_lam - std::lgamma(static_cast<double>(k) + 1.0);
}

struct MarcumParts {
    double q;
    double qc;
};

// Weights below this are dropped; the geometric decay of the Poisson tails keeps
// the discarded mass well under kMarcumTruncation.
constexpr double kWeightFloor = 1e-18;

MarcumParts marcum_parts(double a, double b) {
    if (!(a >= 0.0) || !(b >= 0.0)) throw Error("marcum_q1: arguments must be >= 0");
    if (b == 0.0) return {1.0, 0.0};
    const double lb = 0.5 * b * b;
    if (a == 0.0) return {std::exp(-lb), -std::expm1(-lb)};

    const double la = 0.5 * a * a;
    const double log_la = std::log(la);
    const double log_lb = std::log(lb);
    auto w = [&](long k) { return std::exp(log_pois(la, log_la, k)); };
    auto pb = [&](long j) { return std::exp(log_pois(lb, log_lb, j)); };

    const long mode = static_cast<long>(std::floor(la));
    long lo = mode;
    while (lo > 0 && w(lo - 1) >= kWeightFloor) --lo;
    long hi = mode;
    while (static_cast<double>(hi + 1) <= la || w(hi + 1) >= kWeightFloor) ++hi;

    const std::size_t n = static_cast<std::size_t>(hi - lo + 1);
    std::vector<double> cdf(n), tail(n);

    // P[N_b <= lo], summed upward
    double f = 0.0;
    for (long j = 0; j <= lo; ++j) f += pb(j);
    cdf[0] = f;
    for (std::size_t i = 1; i < n; ++i) cdf[i] = cdf[i - 1] + pb(lo + static_cast<long>(i));

    // P[N_b > hi], summed directly, then downward by addition
    double t = 0.0;
    const double first = static_cast<double>(hi + 1);
    if (first < lb - 40.0 * std::sqrt(lb) - 10.0) {
        t = 1.0 - cdf[n - 1];
    } else {
        for (long j = hi + 1;; ++j) {
            const double term = pb(j);
            t += term;
            if (static_cast<double>(j) > lb && (term == 0.0 || term < 1e-18 * t)) break;
        }
    }
    tail[n - 1] = t;
    for (std::size_t i = n - 1; i > 0; --i) tail[i - 1] = tail[i] + pb(lo + static_cast<long>(i));

    double q = 0.0, qc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double wk = w(lo + static_cast<long>(i));
        q += wk * cdf[i];
        qc += wk * tail[i];
    }
    return {std::clamp(q, 0.0, 1.0), std::clamp(qc, 0.0, 1.0)};
}

}  // namespace

double marcum_q1(double a, double b) {
    const auto parts = marcum_parts(a, b);
    return parts.q <= 0.5 ? parts.q : 1.0 - parts.qc;
}

double marcum_q1_complement(double a, double b) {
    const auto parts = marcum_parts(a, b);
    return parts.qc <= 0.5 ? parts.qc : 1.0 - parts.q;
}

double outage_prob(double power, const ChannelParams& params) {
    if (!(power > 0.0)) throw InvalidPower("outage_prob: transmission power must be > 0");
    const double a = std::sqrt(2.0 * params.kappa);
    const double b =
        std::sqrt(2.0 * (1.0 + params.kappa) * params.gamma0 * params.noise_power() / power);
    return marcum_q1_complement(a, b);
}

LinkBudget required_power(const ChannelParams& params, double rel_tol) {
    params.validate();
    const double target = params.outage_target;
    const double scale = params.gamma0 * params.noise_power();

    double hi = scale;
    int steps = 0;
    while (outage_prob(hi, params) > target) {
        hi *= 10.0;
        if (++steps > 200) {
            std::ostringstream os;
            os << "required_power: no feasible power up to " << hi << " W (target " << target
               << ")";
            throw Error(os.str());
        }
    }
    double lo = hi / 10.0;
    steps = 0;
    while (outage_prob(lo, params) <= target) {
        hi = lo;
        lo /= 10.0;
        if (++steps > 200 || lo <= 0.0) {
            std::ostringstream os;
            os << "required_power: outage stays below target down to " << lo << " W";
            throw Error(os.str());
        }
    }
    while (hi / lo - 1.0 > rel_tol) {
        const double mid = std::sqrt(lo * hi);
        if (outage_prob(mid, params) <= target)
            hi = mid;
        else
            lo = mid;
    }
    return {hi, outage_prob(hi, params)};
}

bool transmit(double power, const ChannelParams& params, Rng& rng) {
    const auto h = sample_gain(params.kappa, rng);
    if (power <= 0.0) return false;
    return snr(power, h, params.n0, params.bandwidth) >= params.gamma0;
}

}  // namespace wncs::channel
