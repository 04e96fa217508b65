#include <doctest.h>

#include <cmath>

#include "marcum_oracle.hpp"
#include "wncs/channel.hpp"

using namespace wncs;
using namespace wncs::channel;

namespace {

ChannelParams table_params(double kappa = 10.0) {
    return ChannelParams::from_config(kappa, -168.0, 2.4e9, 20.0, 1e-3);
}

}  // namespace

TEST_CASE("unit conversions") {
    CHECK(db_to_linear(20.0) == doctest::Approx(100.0).epsilon(1e-14));
    CHECK(dbm_per_hz_to_w_per_hz(-168.0) == doctest::Approx(std::pow(10.0, -19.8)).epsilon(1e-12));
    CHECK_THROWS_AS(ChannelParams::from_config(-1.0, -168, 2.4e9, 20, 1e-3), Error);
    CHECK_THROWS_AS(ChannelParams::from_config(10.0, -168, 2.4e9, 20, 1.0), Error);
    CHECK_THROWS_AS(ChannelParams::from_config(10.0, -168, 0.0, 20, 1e-3), Error);
}

TEST_CASE("gain moments") {
    for (double kappa : {0.0, 10.0}) {
        Rng rng(17);
        const int n = 1000000;
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += std::norm(sample_gain(kappa, rng));
        CHECK(s / n == doctest::Approx(1.0).epsilon(0.01));
    }
    Rng rng(1);
    for (int i = 0; i < 100; ++i) CHECK(std::norm(sample_gain(1e12, rng)) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("snr formula") {
    const std::complex<double> h(1.0, 0.0);
    CHECK(snr(0.0, h, 1.0, 1.0) == 0.0);
    CHECK(snr(1.0, h, 0.01, 1.0) == doctest::Approx(100.0));
    CHECK(snr(2.0, h, 0.01, 1.0) == doctest::Approx(200.0));
}

TEST_CASE("marcum q1 closed forms and quadrature oracle") {
    CHECK(marcum_q1(3.0, 0.0) == 1.0);
    CHECK(marcum_q1(0.0, 2.0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(std::abs(marcum_q1(1.0, 1.0) - oracle::marcum_q1_quadrature(1.0, 1.0)) <= 1e-8);
    for (double a : {0.0, 0.3, 1.7, 4.0, 8.0})
        for (double b : {0.1, 1.0, 2.5, 5.0, 9.0})
            CHECK(std::abs(marcum_q1(a, b) - oracle::marcum_q1_quadrature(a, b)) <= 1e-8);
}

TEST_CASE("marcum q1 monotonicity") {
    for (double a = 0.0; a <= 5.0; a += 0.5) {
        double prev = 2.0;
        for (double b = 0.0; b <= 8.0; b += 0.25) {
            const double q = marcum_q1(a, b);
            CHECK(q >= 0.0);
            CHECK(q <= 1.0);
            CHECK(q <= prev);
            prev = q;
        }
    }
    for (double b = 0.25; b <= 5.0; b += 0.5) {
        double prev = -1.0;
        for (double a = 0.0; a <= 6.0; a += 0.25) {
            const double q = marcum_q1(a, b);
            CHECK(q >= prev);
            prev = q;
        }
    }
}

TEST_CASE("outage probability") {
    auto p = table_params(0.0);
    const double scale = p.gamma0 * p.noise_power();
    for (double power : {scale * 0.5, scale * 10.0, scale * 1000.0})
        CHECK(std::abs(outage_prob(power, p) - (1.0 - std::exp(-scale / power))) <= 1e-9);
    CHECK_THROWS_AS(outage_prob(0.0, p), InvalidPower);
    CHECK_THROWS_AS(outage_prob(-1.0, p), InvalidPower);
    auto q = table_params();
    CHECK(outage_prob(1e6, q) < 1e-12);

    // strictly decreasing in p, increasing in gamma0
    double prev = 1.0;
    for (double power = scale; power < scale * 1e4; power *= 1.5) {
        const double o = outage_prob(power, q);
        CHECK(o < prev);
        prev = o;
    }
    const double pw = 5.0 * scale;
    double prev_g = 0.0;
    for (double g0 = 10.0; g0 <= 30.0; g0 += 2.0) {
        const auto pg = ChannelParams::from_config(10.0, -168.0, 2.4e9, g0, 1e-3);
        const double o = outage_prob(pw, pg);
        CHECK(o > prev_g);
        prev_g = o;
    }
    // stronger line of sight, fewer outages
    const double power = required_power(table_params(3.0)).power;
    CHECK(outage_prob(power, table_params(10.0)) <= outage_prob(power, table_params(3.0)));
}

TEST_CASE("outage matches Monte Carlo") {
    auto p = table_params();
    const double power = required_power(ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, 0.05)).power;
    Rng rng(23);
    const int n = 200000;
    int fails = 0;
    for (int i = 0; i < n; ++i) fails += !transmit(power, p, rng);
    const double o = outage_prob(power, p);
    const double se = std::sqrt(o * (1 - o) / n);
    CHECK(std::abs(fails / double(n) - o) <= 3 * se);
}

TEST_CASE("required power") {
    for (double target : {1e-4, 1e-3, 1e-2, 1e-1}) {
        auto p = ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, target);
        const auto budget = required_power(p);
        CHECK(budget.outage <= target);
        CHECK(budget.outage >= target * (1 - 1e-4));
        CHECK(outage_prob(budget.power, p) == budget.outage);
    }
    const auto strict = required_power(ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, 1e-3));
    const auto loose = required_power(ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, 1e-1));
    CHECK(strict.power > loose.power);
    const auto near_one = required_power(ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, 0.999999));
    CHECK(near_one.power < loose.power * 0.2);
    // kappa sweep at every SNR threshold: more line of sight, less power
    for (double g0 : {5.0, 20.0, 40.0}) {
        double prev = 1e300;
        for (double kappa : {3.0, 5.0, 10.0}) {
            const double pw = required_power(ChannelParams::from_config(kappa, -168.0, 2.4e9, g0, 1e-3)).power;
            CHECK(pw < prev);
            prev = pw;
        }
    }
}

TEST_CASE("transmit") {
    auto p = table_params();
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) CHECK_FALSE(transmit(0.0, p, rng));
    auto p10 = ChannelParams::from_config(10.0, -168.0, 2.4e9, 20.0, 0.1);
    const double power = required_power(p10).power;
    const int n = 200000;
    int fails = 0;
    for (int i = 0; i < n; ++i) fails += !transmit(power, p10, rng);
    CHECK(fails / double(n) == doctest::Approx(0.1).epsilon(0.1));
}
