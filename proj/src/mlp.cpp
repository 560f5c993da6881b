#include "gavatar/mlp.hpp"

#include <cmath>
#include <random>

#include "gavatar/errors.hpp"

namespace gavatar::nn {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Mlp::Mlp(std::vector<int> widths, uint64_t seed) : widths_(std::move(widths))
{
    if (widths_.size() < 2) throw ParameterError("mlp: need at least input and output width");
    for (int w : widths_)
        if (w <= 0) throw ParameterError("mlp: widths must be positive");
    size_t total = 0;
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        offsets_.push_back(total);
        total += static_cast<size_t>(widths_[l]) * widths_[l + 1] + widths_[l + 1];
    }
    params_.assign(total, 0.0);
    std::mt19937_64 rng(seed);
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        const double limit = std::sqrt(6.0 / (widths_[l] + widths_[l + 1]));
        std::uniform_real_distribution<double> u(-limit, limit);
        const size_t n = static_cast<size_t>(widths_[l]) * widths_[l + 1];
        for (size_t i = 0; i < n; ++i) params_[offsets_[l] + i] = u(rng);
    }
}

Mlp::ConstMap Mlp::weight(size_t layer) const
{
    return ConstMap(params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]);
}

Eigen::Map<const Eigen::VectorXd> Mlp::bias(size_t layer) const
{
    return Eigen::Map<const Eigen::VectorXd>(params_.data() + bias_offset(layer), widths_[layer + 1]);
}

void Mlp::zero_last_layer()
{
    const size_t l = layer_count() - 1;
    std::fill(params_.begin() + static_cast<long>(offsets_[l]), params_.end(), 0.0);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Cache* cache) const
{
    if (x.rows() != input_dim()) throw ParameterError("mlp: input width mismatch");
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    Eigen::MatrixXd h = x;
    for (size_t l = 0; l < layer_count(); ++l) {
        Eigen::MatrixXd z = weight(l) * h;
        z.colwise() += bias(l);
        if (cache) cache->inputs.push_back(std::move(h));
        if (l + 1 == layer_count()) return z;
        h = z.unaryExpr([](double v) { return softplus(v); });
        if (cache) cache->pre.push_back(std::move(z));
    }
    return h;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& dy, std::span<double> grad) const
{
    if (grad.size() != params_.size()) throw ParameterError("mlp: gradient buffer size mismatch");
    if (dy.rows() != output_dim()) throw ParameterError("mlp: output gradient width mismatch");
    Eigen::MatrixXd d = dy;
    for (size_t l = layer_count(); l-- > 0;) {
        if (l + 1 < layer_count()) d = d.cwiseProduct(cache.pre[l].unaryExpr([](double v) { return sigmoid(v); }));
        Eigen::Map<Eigen::MatrixXd> gw(grad.data() + offsets_[l], widths_[l + 1], widths_[l]);
        Eigen::Map<Eigen::VectorXd> gb(grad.data() + bias_offset(l), widths_[l + 1]);
        gw.noalias() += d * cache.inputs[l].transpose();
        gb += d.rowwise().sum();
        d = weight(l).transpose() * d;
    }
    return d;
}

} // namespace gavatar::nn
