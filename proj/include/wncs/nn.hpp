#pragma once

// Fully connected ReLU networks with hand-written reverse mode, and Adam.
//
// Activations are row-major (rows x features). Hidden layers use ReLU, the
// output layer is linear. The ReLU subgradient at 0 is taken as 0.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <json.hpp>

#include "wncs/common.hpp"

namespace wncs::nn {

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weight;  // out x in, row-major
    std::vector<double> bias;    // out
};

class DenseNet;

// Intermediates of one forward pass. Bound to the network's parameter version
// so a backward pass against changed parameters is rejected.
struct ForwardCache {
    const DenseNet* owner = nullptr;
    std::uint64_t version = 0;
    std::size_t rows = 0;
    std::vector<std::vector<double>> inputs;  // per layer, rows x in
    std::vector<std::vector<double>> pre;     // per layer, rows x out
    // Gradient buffers reused by backward() across calls.
    mutable std::vector<double> grad_a;
    mutable std::vector<double> grad_b;

    std::span<const double> output() const { return pre.back(); }
};

struct DenseGrad {
    std::vector<std::vector<double>> weight;
    std::vector<std::vector<double>> bias;

    void zero();
};

class StaleCache : public Error {
public:
    using Error::Error;
};

class DenseNet {
public:
    DenseNet() = default;
    // widths = {in, hidden..., out}; at least two entries.
    explicit DenseNet(const std::vector<std::size_t>& widths);

    // Uniform He-style fan-in scaling for weights, zero biases.
    void init_he_uniform(Rng& rng);
    // Single linear layer with W = I (requires in == out).
    static DenseNet identity(std::size_t dim);

    std::size_t input_dim() const { return layers_.front().in; }
    std::size_t output_dim() const { return layers_.back().out; }
    std::vector<std::size_t> widths() const;
    std::size_t parameter_count() const;
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& mutable_layers() {
        ++version_;
        return layers_;
    }
    std::uint64_t version() const { return version_; }
    // Call after writing through parameter_blocks().
    void touch() { ++version_; }

    void forward(std::span<const double> input, std::size_t rows, ForwardCache& cache) const;
    // Accumulates parameter gradients into grad; writes dL/dinput to input_grad
    // when it is non-empty (rows x input_dim).
    void backward(const ForwardCache& cache, std::span<const double> output_grad, DenseGrad& grad,
                  std::span<double> input_grad) const;

    Vec operator()(const Vec& x) const;

    DenseGrad make_grad() const;
    // Views over every parameter array, in layer order: W0, b0, W1, b1, ...
    std::vector<std::span<double>> parameter_blocks();
    static std::vector<std::span<double>> grad_blocks(DenseGrad& grad);

    nlohmann::json to_json() const;
    static DenseNet from_json(const nlohmann::json& j);
    void write_binary(std::ostream& os) const;
    static DenseNet read_binary(std::istream& is);

    bool operator==(const DenseNet& other) const;

private:
    std::vector<DenseLayer> layers_;
    std::uint64_t version_ = 1;
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Bias-corrected adaptive moments. Moment buffers mirror the parameter blocks
// they were first applied to.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::span<const std::span<double>> params, std::span<const std::span<double>> grads);

    long step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Binary helpers shared with the model checkpoint format.
namespace io {
void write_u64(std::ostream& os, std::uint64_t v);
std::uint64_t read_u64(std::istream& is);
void write_doubles(std::ostream& os, std::span<const double> v);
void read_doubles(std::istream& is, std::span<double> v);
void write_matrix(std::ostream& os, const Mat& m);
Mat read_matrix(std::istream& is);
}  // namespace io

}  // namespace wncs::nn
