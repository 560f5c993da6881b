#pragma once

// Fully connected network with softplus hidden activations and a linear
// output layer. Parameters live in one flat vector so optimizers and the
// checkpoint can treat them as a single blob.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace gavatar::nn {

class Mlp {
public:
    Mlp() = default;
    // widths = {in, hidden..., out}; Xavier-uniform weights, zero biases.
    Mlp(std::vector<int> widths, uint64_t seed);

    int input_dim() const { return widths_.front(); }
    int output_dim() const { return widths_.back(); }
    size_t layer_count() const { return widths_.size() - 1; }
    const std::vector<int>& widths() const { return widths_; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    // Activations kept for the backward pass; columns are samples.
    struct Cache {
        std::vector<Eigen::MatrixXd> inputs; // input to each layer
        std::vector<Eigen::MatrixXd> pre;    // pre-activation of each hidden layer
    };

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const;

    // Accumulates dL/dparams into grad (same layout as params()) and returns
    // dL/dx.
    Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& dy, std::span<double> grad) const;

    // Offsets of the last layer's weight matrix and bias inside params().
    size_t weight_offset(size_t layer) const { return offsets_[layer]; }
    size_t bias_offset(size_t layer) const
    {
        return offsets_[layer] + static_cast<size_t>(widths_[layer]) * widths_[layer + 1];
    }

    void zero_last_layer();

private:
    using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
    ConstMap weight(size_t layer) const;
    Eigen::Map<const Eigen::VectorXd> bias(size_t layer) const;

    std::vector<int> widths_;
    std::vector<size_t> offsets_;
    std::vector<double> params_;
};

double softplus(double x);
double sigmoid(double x);

} // namespace gavatar::nn
