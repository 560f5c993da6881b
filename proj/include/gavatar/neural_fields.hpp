#pragma once

// Hash-grid encoded neural fields: the Gaussian attribute field, the signed
// distance field and the bell-shaped opacity kernel applied to it.

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gavatar/math.hpp"
#include "gavatar/mlp.hpp"

namespace gavatar::fields {

struct HashGridConfig {
    int levels = 16;
    int features = 2;
    int log2_table = 19;
    int base_resolution = 16;
    double growth = 1.5;
    Vec3d box_min{-1.1, -1.1, -1.1};
    Vec3d box_max{1.1, 1.1, 1.1};
};

class HashGrid {
public:
    HashGrid() = default;
    HashGrid(const HashGridConfig& config, uint64_t seed);

    const HashGridConfig& config() const { return config_; }
    int output_dim() const { return config_.levels * config_.features; }
    int resolution(int level) const { return resolutions_[level]; }
    size_t table_size(int level) const { return table_sizes_[level]; }
    bool dense(int level) const { return dense_[level]; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    // The 8 surrounding lattice entries of p at one level. index is the
    // offset of the entry's first feature in params(); dweight is the
    // derivative of each weight w.r.t. p (zero along clamped axes).
    struct Corners {
        std::array<size_t, 8> index;
        std::array<double, 8> weight;
        std::array<Vec3d, 8> dweight;
    };
    Corners corners(const Vec3d& p, int level) const;

    // Columns of out are samples: (levels * features) x N.
    void encode(std::span<const Vec3d> points, Eigen::MatrixXd& out) const;

    // Accumulates dL/dtable into grad and, when dp is non-empty, dL/dp.
    void backward(std::span<const Vec3d> points, const Eigen::MatrixXd& dout, std::span<double> grad,
                  std::span<Vec3d> dp) const;

private:
    HashGridConfig config_;
    std::vector<int> resolutions_;
    std::vector<size_t> table_sizes_;
    std::vector<size_t> level_offsets_;
    std::vector<bool> dense_;
    std::vector<double> params_;
};

// Number of single-point field queries since process start (or the last
// reset). Baked playback must leave it unchanged.
uint64_t field_eval_count();
void reset_field_eval_count();

struct FieldGrad {
    std::vector<double> grid;
    std::vector<double> mlp;
    void zero();
};

// Hash grid followed by an MLP. The MLP input is the grid features
// concatenated with the box-normalized position in [-1, 1]^3.
class HashField {
public:
    HashField() = default;
    HashField(const HashGridConfig& grid, int hidden, int outputs, uint64_t seed);

    HashGrid grid;
    nn::Mlp mlp;

    int output_dim() const { return mlp.output_dim(); }

    struct Forward {
        std::vector<Vec3d> points;
        Eigen::MatrixXd input;
        nn::Mlp::Cache cache;
        Eigen::MatrixXd out; // outputs x N
    };
    Forward forward(std::span<const Vec3d> points, bool keep_cache = true) const;
    void backward(const Forward& f, const Eigen::MatrixXd& dout, FieldGrad& grad, std::span<Vec3d> dp = {}) const;

    FieldGrad make_grad() const;
    size_t param_count() const { return grid.params().size() + mlp.params().size(); }
};

struct Attributes {
    Vec3d scale;      // world units
    Quatd rotation;   // unit
    std::array<double, 48> sh; // c[channel * 16 + k]
};

// 55 outputs: 3 log-scale, 4 rotation (added to identity, then normalized),
// 48 spherical-harmonics coefficients.
class AttributeField : public HashField {
public:
    static constexpr int kOutputs = 55;
    AttributeField() = default;
    AttributeField(const HashGridConfig& grid, int hidden, uint64_t seed) : HashField(grid, hidden, kOutputs, seed) {}

    std::vector<Attributes> eval(std::span<const Vec3d> points) const;
    static Attributes decode(const double* raw);
    // Gradient of decode w.r.t. raw outputs given gradients of the decoded
    // scale, (normalized) rotation and SH coefficients.
    static void decode_backward(const double* raw, const Vec3d& dscale, const Quatd& drot, const double* dsh,
                                double* draw);
};

class SdfField : public HashField {
public:
    SdfField() = default;
    SdfField(const HashGridConfig& grid, int hidden, uint64_t seed) : HashField(grid, hidden, 1, seed) {}

    // Signed distance in meters, negative inside. Throws NumericError on
    // non-finite output.
    std::vector<double> eval(std::span<const Vec3d> points) const;
    double eval(const Vec3d& p) const;
};

// K(x) = gamma e^{-lambda x} / (1 + e^{-lambda x})^2, with both parameters
// stored as logarithms.
struct OpacityKernel {
    double log_gamma = std::log(2.0);
    double log_lambda = std::log(300.0);

    double gamma() const { return std::exp(log_gamma); }
    double lambda() const { return std::exp(log_lambda); }

    double value(double x) const;
    // dK/dx, dK/dlog_gamma, dK/dlog_lambda.
    std::array<double, 3> grad(double x) const;
};

double kernel_value(double gamma, double lambda, double x);

// Opacity used for rendering: K clamped to [0, 1].
inline double opacity(const OpacityKernel& k, double sdf_value) { return std::min(1.0, k.value(sdf_value)); }

// Mean of (|grad S| - 1)^2 over points, the gradient taken by central
// differences of step h. When grad is given, accumulates weight * dL/dparams.
double sdf_eikonal(const SdfField& sdf, std::span<const Vec3d> points, FieldGrad* grad, double h = 1e-3,
                   double weight = 1.0);

struct PretrainOptions {
    double target_scale = 0.004; // meters
    double sdf_tolerance = 0.005;
    double scale_tolerance = 0.05; // relative
    double noise_std = 0.02;
    double uniform_fraction = 0.25;
    int batch = 4096;
    int max_steps = 3000;
    int check_every = 100;
    double lr = 1e-3;
    double eikonal_weight = 0.01;
    int eikonal_batch = 256;
    uint64_t seed = 1;
};

struct PretrainReport {
    int steps = 0;
    double sdf_mean_abs_error = 0.0; // held-out
    double scale_mean = 0.0;
    double scale_max_rel_error = 0.0;
};

// Regresses the SDF field to target_sdf near the given canonical points and
// sets the attribute field to the target world scale with identity rotation.
// Throws ConvergenceError if the tolerances are not met within max_steps.
PretrainReport pretrain_fields(AttributeField& attributes, SdfField& sdf, std::span<const Vec3d> points,
                               const std::function<double(const Vec3d&)>& target_sdf,
                               const PretrainOptions& options = {});

} // namespace gavatar::fields
