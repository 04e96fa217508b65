#include <doctest.h>

#include <cmath>
#include <sstream>

#include "wncs/nn.hpp"
#include "wncs/simd.hpp"

using namespace wncs;
using namespace wncs::nn;

namespace {

std::vector<double> naive_forward(const DenseNet& net, std::vector<double> x) {
    const auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        std::vector<double> y(L.out);
        for (std::size_t o = 0; o < L.out; ++o) {
            double s = L.bias[o];
            for (std::size_t i = 0; i < L.in; ++i) s += L.weight[o * L.in + i] * x[i];
            y[o] = (l + 1 < layers.size() && s < 0.0) ? 0.0 : s;
        }
        x = std::move(y);
    }
    return x;
}

DenseNet random_net(const std::vector<std::size_t>& widths, std::uint64_t seed) {
    DenseNet net(widths);
    Rng rng(seed);
    net.init_he_uniform(rng);
    std::normal_distribution<double> N(0.0, 0.1);
    for (auto b : net.parameter_blocks())
        for (auto& v : b) v += N(rng) * 0.1;
    net.touch();
    return net;
}

double loss_of(const DenseNet& net, const std::vector<double>& X, std::size_t rows,
               const std::vector<double>& target) {
    ForwardCache c;
    net.forward(X, rows, c);
    double s = 0.0;
    const auto y = c.output();
    for (std::size_t i = 0; i < y.size(); ++i) s += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
    return s;
}

}  // namespace

TEST_CASE("identity and zero-weight networks") {
    auto id = DenseNet::identity(3);
    Vec x(3);
    x << 1.5, -2.0, 0.25;
    CHECK(id(x) == x);

    DenseNet z({3, 5, 2});
    for (auto& L : z.mutable_layers()) {
        std::fill(L.weight.begin(), L.weight.end(), 0.0);
        for (std::size_t o = 0; o < L.out; ++o) L.bias[o] = 0.5 + o;
    }
    const Vec y = z(x);
    CHECK(y[0] == 0.5);
    CHECK(y[1] == 1.5);
    CHECK_THROWS_AS(z(Vec::Zero(4)), DimensionError);
}

TEST_CASE("forward matches an independent implementation") {
    const auto net = random_net({4, 8, 3}, 7);
    Rng rng(1);
    std::normal_distribution<double> N;
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x(4);
        for (auto& v : x) v = N(rng);
        const Vec y = net(Eigen::Map<Vec>(x.data(), 4));
        const auto ref = naive_forward(net, x);
        for (int i = 0; i < 3; ++i) CHECK(std::abs(y[i] - ref[static_cast<std::size_t>(i)]) <= 1e-14 * (1 + std::abs(ref[static_cast<std::size_t>(i)])));
    }
}

TEST_CASE("backward matches central differences") {
    for (const auto& widths : {std::vector<std::size_t>{4, 8, 8, 2}, std::vector<std::size_t>{4, 16, 16, 16, 20},
                               std::vector<std::size_t>{2, 16, 16, 16, 2}}) {
        auto net = random_net(widths, 3);
        const std::size_t rows = 5, in = widths.front(), out = widths.back();
        Rng rng(9);
        std::normal_distribution<double> N;
        std::vector<double> X(rows * in), target(rows * out);
        for (auto& v : X) v = N(rng);
        for (auto& v : target) v = N(rng);

        ForwardCache c;
        net.forward(X, rows, c);
        std::vector<double> dy(rows * out);
        for (std::size_t i = 0; i < dy.size(); ++i) dy[i] = c.output()[i] - target[i];
        auto g = net.make_grad();
        g.zero();
        std::vector<double> dx(rows * in);
        net.backward(c, dy, g, dx);

        const double h = 1e-5;
        auto params = net.parameter_blocks();
        auto grads = DenseNet::grad_blocks(g);
        double worst = 0.0;
        for (std::size_t b = 0; b < params.size(); ++b) {
            for (std::size_t i = 0; i < params[b].size(); ++i) {
                const double keep = params[b][i];
                params[b][i] = keep + h;
                net.touch();
                const double lp = loss_of(net, X, rows, target);
                params[b][i] = keep - h;
                net.touch();
                const double lm = loss_of(net, X, rows, target);
                params[b][i] = keep;
                net.touch();
                const double fd = (lp - lm) / (2 * h);
                worst = std::max(worst, std::abs(fd - grads[b][i]) / std::max(1e-3, std::abs(fd) + std::abs(grads[b][i])));
            }
        }
        CHECK(worst <= 1e-4);
        for (std::size_t i = 0; i < X.size(); ++i) {
            auto Xp = X, Xm = X;
            Xp[i] += h;
            Xm[i] -= h;
            const double fd = (loss_of(net, Xp, rows, target) - loss_of(net, Xm, rows, target)) / (2 * h);
            CHECK(std::abs(fd - dx[i]) <= 1e-4 * std::max(1e-3, std::abs(fd)));
        }
    }
}

TEST_CASE("linear net input gradient is the transposed weight") {
    DenseNet net({3, 2});
    Rng rng(4);
    net.init_he_uniform(rng);
    std::vector<double> x{0.1, 0.2, 0.3}, dy{1.0, -2.0}, dx(3);
    ForwardCache c;
    net.forward(x, 1, c);
    auto g = net.make_grad();
    g.zero();
    net.backward(c, dy, g, dx);
    const auto& W = net.layers()[0].weight;
    for (int i = 0; i < 3; ++i) CHECK(dx[static_cast<std::size_t>(i)] == doctest::Approx(W[static_cast<std::size_t>(i)] * 1.0 - 2.0 * W[static_cast<std::size_t>(3 + i)]));

    std::vector<double> zero(2, 0.0);
    auto g0 = net.make_grad();
    g0.zero();
    net.backward(c, zero, g0, {});
    for (auto b : DenseNet::grad_blocks(g0))
        for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("stale cache is rejected") {
    auto net = random_net({2, 4, 1}, 1);
    std::vector<double> x{1.0, 2.0}, dy{1.0};
    ForwardCache c;
    net.forward(x, 1, c);
    net.touch();
    auto g = net.make_grad();
    CHECK_THROWS_AS(net.backward(c, dy, g, {}), StaleCache);
}

TEST_CASE("adam") {
    std::vector<double> w{1.0, -2.0, 3.0}, g(3, 0.0);
    std::vector<std::span<double>> P{w}, G{g};
    Adam opt;
    opt.step(P, G);
    CHECK(w == std::vector<double>{1.0, -2.0, 3.0});
    CHECK(opt.step_count() == 1);

    std::vector<double> v{0.0, 0.0}, gc{0.5, -4.0};
    std::vector<std::span<double>> P2{v}, G2{gc};
    Adam first(AdamConfig{0.01});
    first.step(P2, G2);
    CHECK(v[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(v[1] == doctest::Approx(0.01).epsilon(1e-6));

    Rng rng(8);
    std::normal_distribution<double> N;
    std::vector<double> q(10), gq(10);
    for (auto& x : q) x = N(rng);
    std::vector<std::span<double>> P3{q}, G3{gq};
    Adam a3(AdamConfig{0.01});
    auto norm = [&] {
        double s = 0;
        for (double x : q) s += x * x;
        return std::sqrt(s);
    };
    double prev = norm();
    for (int k = 0; k < 200; ++k) {
        for (std::size_t i = 0; i < q.size(); ++i) gq[i] = 2 * q[i];
        a3.step(P3, G3);
        const double now = norm();
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("serialisation round trips") {
    const auto net = random_net({4, 8, 8, 3}, 12);
    std::stringstream ss;
    net.write_binary(ss);
    const auto back = DenseNet::read_binary(ss);
    CHECK(back == net);
    const auto viaj = DenseNet::from_json(net.to_json());
    Vec x(4);
    x << 0.1, -0.3, 0.7, 2.0;
    CHECK((viaj(x) - net(x)).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("training is deterministic") {
    auto run = [] {
        auto net = random_net({3, 8, 2}, 2);
        Adam opt;
        std::vector<double> X{0.1, 0.2, 0.3, -1, 0, 1}, T{1, 0, 0, 1};
        for (int it = 0; it < 20; ++it) {
            ForwardCache c;
            net.forward(X, 2, c);
            std::vector<double> dy(4);
            for (int i = 0; i < 4; ++i) dy[static_cast<std::size_t>(i)] = c.output()[static_cast<std::size_t>(i)] - T[static_cast<std::size_t>(i)];
            auto g = net.make_grad();
            g.zero();
            net.backward(c, dy, g, {});
            auto P = net.parameter_blocks();
            auto G = DenseNet::grad_blocks(g);
            opt.step(P, G);
            net.touch();
        }
        return net;
    };
    CHECK(run() == run());
}

TEST_CASE("scalar and AVX2 kernels agree") {
    if (!simd::avx2_available()) {
        MESSAGE("AVX2 unavailable; equivalence test skipped");
        return;
    }
    const auto& s = simd::scalar_kernels();
    const auto& v = simd::avx2_kernels();
    Rng rng(31);
    std::normal_distribution<double> N;
    auto fill = [&](std::size_t n) {
        std::vector<double> a(n);
        for (auto& x : a) x = N(rng);
        return a;
    };
    auto close = [](const std::vector<double>& a, const std::vector<double>& b) {
        double worst = 0;
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - b[i]) / (1.0 + std::abs(a[i])));
        return worst;
    };
    for (std::size_t n : {1u, 3u, 4u, 7u, 16u, 33u, 128u, 1001u}) {
        auto a = fill(n), b = fill(n);
        CHECK(std::abs(s.dot(a.data(), b.data(), n) - v.dot(a.data(), b.data(), n)) <= 1e-12 * (1.0 + n));
        auto y1 = b, y2 = b;
        s.axpy(0.7, a.data(), y1.data(), n);
        v.axpy(0.7, a.data(), y2.data(), n);
        CHECK(close(y1, y2) <= 1e-15);
        std::vector<double> r1(n), r2(n);
        s.relu(a.data(), r1.data(), n);
        v.relu(a.data(), r2.data(), n);
        CHECK(r1 == r2);
        auto g1 = b, g2 = b;
        s.relu_mask(a.data(), g1.data(), n);
        v.relu_mask(a.data(), g2.data(), n);
        CHECK(g1 == g2);
    }
    for (auto [rows, in, out] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 4, 3}, {5, 7, 9},
                                 {64, 128, 128}, {33, 2, 128}, {130, 128, 20}, {3, 17, 5}}) {
        auto X = fill(rows * in), W = fill(out * in), bias = fill(out), dY = fill(rows * out);
        std::vector<double> Y1(rows * out), Y2(rows * out);
        s.affine_rows(X.data(), rows, in, W.data(), out, bias.data(), Y1.data());
        v.affine_rows(X.data(), rows, in, W.data(), out, bias.data(), Y2.data());
        CHECK(close(Y1, Y2) <= 1e-12);
        std::vector<double> dW1(out * in, 0.5), dW2(out * in, 0.5), db1(out, 0.25), db2(out, 0.25);
        s.affine_grad_params(X.data(), dY.data(), rows, in, out, dW1.data(), db1.data());
        v.affine_grad_params(X.data(), dY.data(), rows, in, out, dW2.data(), db2.data());
        CHECK(close(dW1, dW2) <= 1e-12);
        CHECK(close(db1, db2) <= 1e-12);
        std::vector<double> dX1(rows * in), dX2(rows * in);
        s.affine_grad_input(dY.data(), rows, out, W.data(), in, dX1.data());
        v.affine_grad_input(dY.data(), rows, out, W.data(), in, dX2.data());
        CHECK(close(dX1, dX2) <= 1e-12);
    }
}

TEST_CASE("isa selection") {
    const auto before = simd::active_isa();
    simd::set_active_isa(simd::Isa::scalar);
    CHECK(simd::active_isa() == simd::Isa::scalar);
    CHECK(simd::isa_name(simd::Isa::scalar) == "scalar");
    simd::set_active_isa(before);
}
