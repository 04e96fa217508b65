#include "wncs/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "wncs/simd.hpp"

namespace wncs::nn {

void DenseGrad::zero() {
    for (auto& w : weight) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
}

DenseNet::DenseNet(const std::vector<std::size_t>& widths) {
    if (widths.size() < 2) throw Error("DenseNet needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        if (widths[i] == 0 || widths[i + 1] == 0) throw Error("DenseNet widths must be positive");
        DenseLayer layer;
        layer.in = widths[i];
        layer.out = widths[i + 1];
        layer.weight.assign(layer.in * layer.out, 0.0);
        layer.bias.assign(layer.out, 0.0);
        layers_.push_back(std::move(layer));
    }
}

void DenseNet::init_he_uniform(Rng& rng) {
    for (auto& layer : layers_) {
        const double limit = std::sqrt(6.0 / static_cast<double>(layer.in));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& w : layer.weight) w = dist(rng);
        std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
    ++version_;
}

DenseNet DenseNet::identity(std::size_t dim) {
    DenseNet net({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) net.layers_[0].weight[i * dim + i] = 1.0;
    return net;
}

std::vector<std::size_t> DenseNet::widths() const {
    std::vector<std::size_t> w;
    w.push_back(layers_.front().in);
    for (const auto& l : layers_) w.push_back(l.out);
    return w;
}

std::size_t DenseNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

void DenseNet::forward(std::span<const double> input, std::size_t rows,
                       ForwardCache& cache) const {
    if (layers_.empty()) throw Error("forward on an empty network");
    if (input.size() != rows * input_dim())
        throw DimensionError("DenseNet::forward: input has " + std::to_string(input.size()) +
                             " values, expected " + std::to_string(rows * input_dim()));
    const auto& k = simd::active();
    cache.owner = this;
    cache.version = version_;
    cache.rows = rows;
    cache.inputs.resize(layers_.size());
    cache.pre.resize(layers_.size());

    cache.inputs[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        auto& pre = cache.pre[l];
        pre.resize(rows * layer.out);
        k.affine_rows(cache.inputs[l].data(), rows, layer.in, layer.weight.data(), layer.out,
                      layer.bias.data(), pre.data());
        if (l + 1 < layers_.size()) {
            auto& next = cache.inputs[l + 1];
            next.resize(pre.size());
            k.relu(pre.data(), next.data(), pre.size());
        }
    }
}

void DenseNet::backward(const ForwardCache& cache, std::span<const double> output_grad,
                        DenseGrad& grad, std::span<double> input_grad) const {
    if (cache.owner != this || cache.version != version_)
        throw StaleCache("DenseNet::backward: cache does not match current parameters");
    const std::size_t rows = cache.rows;
    if (output_grad.size() != rows * output_dim())
        throw DimensionError("DenseNet::backward: output gradient has wrong size");
    if (!input_grad.empty() && input_grad.size() != rows * input_dim())
        throw DimensionError("DenseNet::backward: input gradient has wrong size");
    const auto& k = simd::active();

    auto& g = cache.grad_a;
    auto& g_prev = cache.grad_b;
    g.assign(output_grad.begin(), output_grad.end());
    for (std::size_t l = layers_.size(); l-- > 0;) {
        const auto& layer = layers_[l];
        if (l + 1 < layers_.size()) k.relu_mask(cache.pre[l].data(), g.data(), g.size());
        k.affine_grad_params(cache.inputs[l].data(), g.data(), rows, layer.in, layer.out,
                             grad.weight[l].data(), grad.bias[l].data());
        const bool need_input = l > 0 || !input_grad.empty();
        if (!need_input) break;
        double* dst = nullptr;
        if (l == 0) {
            dst = input_grad.data();
        } else {
            g_prev.resize(rows * layer.in);
            dst = g_prev.data();
        }
        k.affine_grad_input(g.data(), rows, layer.out, layer.weight.data(), layer.in, dst);
        if (l > 0) std::swap(g, g_prev);
    }
}

Vec DenseNet::operator()(const Vec& x) const {
    require_dim(x.size(), static_cast<Eigen::Index>(input_dim()), "DenseNet input");
    ForwardCache cache;
    forward(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), 1, cache);
    const auto out = cache.output();
    return Eigen::Map<const Vec>(out.data(), static_cast<Eigen::Index>(out.size()));
}

DenseGrad DenseNet::make_grad() const {
    DenseGrad g;
    for (const auto& l : layers_) {
        g.weight.emplace_back(l.weight.size(), 0.0);
        g.bias.emplace_back(l.bias.size(), 0.0);
    }
    return g;
}

std::vector<std::span<double>> DenseNet::parameter_blocks() {
    ++version_;
    std::vector<std::span<double>> blocks;
    for (auto& l : layers_) {
        blocks.emplace_back(l.weight);
        blocks.emplace_back(l.bias);
    }
    return blocks;
}

std::vector<std::span<double>> DenseNet::grad_blocks(DenseGrad& grad) {
    std::vector<std::span<double>> blocks;
    for (std::size_t l = 0; l < grad.weight.size(); ++l) {
        blocks.emplace_back(grad.weight[l]);
        blocks.emplace_back(grad.bias[l]);
    }
    return blocks;
}

nlohmann::json DenseNet::to_json() const {
    nlohmann::json j;
    j["widths"] = widths();
    j["activation"] = "relu";
    auto& arr = j["layers"] = nlohmann::json::array();
    for (const auto& l : layers_) arr.push_back({{"weight", l.weight}, {"bias", l.bias}});
    return j;
}

DenseNet DenseNet::from_json(const nlohmann::json& j) {
    DenseNet net(j.at("widths").get<std::vector<std::size_t>>());
    const auto& arr = j.at("layers");
    if (arr.size() != net.layers_.size()) throw Error("DenseNet json: layer count mismatch");
    for (std::size_t l = 0; l < net.layers_.size(); ++l) {
        auto w = arr[l].at("weight").get<std::vector<double>>();
        auto b = arr[l].at("bias").get<std::vector<double>>();
        if (w.size() != net.layers_[l].weight.size() || b.size() != net.layers_[l].bias.size())
            throw Error("DenseNet json: parameter shape mismatch in layer " + std::to_string(l));
        net.layers_[l].weight = std::move(w);
        net.layers_[l].bias = std::move(b);
    }
    return net;
}

void DenseNet::write_binary(std::ostream& os) const {
    const auto w = widths();
    io::write_u64(os, w.size());
    for (auto v : w) io::write_u64(os, v);
    for (const auto& l : layers_) {
        io::write_doubles(os, l.weight);
        io::write_doubles(os, l.bias);
    }
}

DenseNet DenseNet::read_binary(std::istream& is) {
    const auto n = io::read_u64(is);
    if (n < 2 || n > 64) throw Error("DenseNet binary: implausible layer count");
    std::vector<std::size_t> w(n);
    for (auto& v : w) v = io::read_u64(is);
    DenseNet net(w);
    for (auto& l : net.layers_) {
        io::read_doubles(is, l.weight);
        io::read_doubles(is, l.bias);
    }
    return net;
}

bool DenseNet::operator==(const DenseNet& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& a = layers_[l];
        const auto& b = other.layers_[l];
        if (a.in != b.in || a.out != b.out || a.weight != b.weight || a.bias != b.bias)
            return false;
    }
    return true;
}

void Adam::step(std::span<const std::span<double>> params,
                std::span<const std::span<double>> grads) {
    if (params.size() != grads.size()) throw DimensionError("Adam: params/grads block mismatch");
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw DimensionError("Adam: block count changed");
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double lr = cfg_.learning_rate;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        auto g = grads[k];
        if (p.size() != g.size() || p.size() != m_[k].size())
            throw DimensionError("Adam: block shape mismatch");
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

namespace io {

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw Error("binary read: unexpected end");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_doubles(std::ostream& os, std::span<const double> v) {
    for (double d : v) write_u64(os, std::bit_cast<std::uint64_t>(d));
}

void read_doubles(std::istream& is, std::span<double> v) {
    for (double& d : v) d = std::bit_cast<double>(read_u64(is));
}

void write_matrix(std::ostream& os, const Mat& m) {
    write_u64(os, static_cast<std::uint64_t>(m.rows()));
    write_u64(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            write_u64(os, std::bit_cast<std::uint64_t>(m(r, c)));
}

Mat read_matrix(std::istream& is) {
    const auto rows = read_u64(is);
    const auto cols = read_u64(is);
    if (rows > (1u << 20) || cols > (1u << 20)) throw Error("binary read: implausible matrix");
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = std::bit_cast<double>(read_u64(is));
    return m;
}

}  // namespace io

}  // namespace wncs::nn
