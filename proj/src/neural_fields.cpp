#include "gavatar/neural_fields.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "gavatar/adam.hpp"
#include "gavatar/errors.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar::fields {

namespace {

std::atomic<uint64_t> g_eval_count{0};

constexpr uint32_t kPrimes[3] = {1u, 2654435761u, 805459861u};

} // namespace

uint64_t field_eval_count() { return g_eval_count.load(); }
void reset_field_eval_count() { g_eval_count.store(0); }

HashGrid::HashGrid(const HashGridConfig& config, uint64_t seed) : config_(config)
{
    if (config.levels < 1 || config.features < 1 || config.base_resolution < 1 || config.growth < 1.0)
        throw ParameterError("hash grid: invalid configuration");
    if (config.log2_table < 4 || config.log2_table > 26) throw ParameterError("hash grid: log2_table out of range");
    for (int a = 0; a < 3; ++a)
        if (!(config.box_max[a] > config.box_min[a])) throw ParameterError("hash grid: empty bounding box");
    const size_t cap = size_t{1} << config.log2_table;
    size_t offset = 0;
    int previous = 0;
    for (int l = 0; l < config.levels; ++l) {
        int res = static_cast<int>(std::floor(config.base_resolution * std::pow(config.growth, l)));
        res = std::max(res, previous + 1);
        previous = res;
        const size_t full = static_cast<size_t>(res + 1) * (res + 1) * (res + 1);
        resolutions_.push_back(res);
        dense_.push_back(full <= cap);
        table_sizes_.push_back(std::min(full, cap));
        level_offsets_.push_back(offset);
        offset += table_sizes_.back() * static_cast<size_t>(config.features);
    }
    params_.resize(offset);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1e-4, 1e-4);
    for (auto& v : params_) v = u(rng);
}

HashGrid::Corners HashGrid::corners(const Vec3d& p, int level) const
{
    const int res = resolutions_[level];
    std::array<int, 3> cell{};
    std::array<double, 3> frac{}, dfrac{};
    for (int a = 0; a < 3; ++a) {
        const double extent = config_.box_max[a] - config_.box_min[a];
        double u = (p[a] - config_.box_min[a]) / extent;
        double du = 1.0 / extent;
        if (u <= 0.0 || u >= 1.0) {
            u = std::clamp(u, 0.0, 1.0);
            du = 0.0;
        }
        const double x = u * res;
        int i = static_cast<int>(std::floor(x));
        i = std::clamp(i, 0, res - 1);
        cell[a] = i;
        frac[a] = x - i;
        dfrac[a] = du * res;
    }
    Corners c;
    const size_t f = static_cast<size_t>(config_.features);
    for (int k = 0; k < 8; ++k) {
        std::array<double, 3> w{};
        std::array<uint32_t, 3> q{};
        for (int a = 0; a < 3; ++a) {
            const int bit = (k >> a) & 1;
            w[a] = bit ? frac[a] : 1.0 - frac[a];
            q[a] = static_cast<uint32_t>(cell[a] + bit);
        }
        size_t idx;
        if (dense_[level]) {
            const size_t n = static_cast<size_t>(res) + 1;
            idx = q[0] + n * (q[1] + n * q[2]);
        } else {
            const uint32_t h = (q[0] * kPrimes[0]) ^ (q[1] * kPrimes[1]) ^ (q[2] * kPrimes[2]);
            idx = h & static_cast<uint32_t>(table_sizes_[level] - 1);
        }
        c.index[k] = level_offsets_[level] + idx * f;
        c.weight[k] = w[0] * w[1] * w[2];
        for (int a = 0; a < 3; ++a) {
            const double sign = ((k >> a) & 1) ? 1.0 : -1.0;
            c.dweight[k][a] = sign * dfrac[a] * w[(a + 1) % 3] * w[(a + 2) % 3];
        }
    }
    return c;
}

void HashGrid::encode(std::span<const Vec3d> points, Eigen::MatrixXd& out) const
{
    const int f = config_.features;
    out.resize(output_dim(), static_cast<Eigen::Index>(points.size()));
    parallel_for(points.size(), [&](size_t b, size_t e, size_t) {
        for (size_t n = b; n < e; ++n) {
            for (int l = 0; l < config_.levels; ++l) {
                const Corners c = corners(points[n], l);
                for (int j = 0; j < f; ++j) {
                    double v = 0.0;
                    for (int k = 0; k < 8; ++k) v += c.weight[k] * params_[c.index[k] + j];
                    out(l * f + j, static_cast<Eigen::Index>(n)) = v;
                }
            }
        }
    });
}

void HashGrid::backward(std::span<const Vec3d> points, const Eigen::MatrixXd& dout, std::span<double> grad,
                        std::span<Vec3d> dp) const
{
    if (grad.size() != params_.size()) throw ParameterError("hash grid: gradient size mismatch");
    if (!dp.empty() && dp.size() != points.size()) throw ParameterError("hash grid: position gradient size mismatch");
    const int f = config_.features;
    for (size_t n = 0; n < points.size(); ++n) {
        const auto col = static_cast<Eigen::Index>(n);
        for (int l = 0; l < config_.levels; ++l) {
            const Corners c = corners(points[n], l);
            for (int k = 0; k < 8; ++k) {
                double dw = 0.0;
                for (int j = 0; j < f; ++j) {
                    const double g = dout(l * f + j, col);
                    grad[c.index[k] + j] += c.weight[k] * g;
                    dw += params_[c.index[k] + j] * g;
                }
                if (!dp.empty()) dp[n] += c.dweight[k] * dw;
            }
        }
    }
}

void FieldGrad::zero()
{
    std::fill(grid.begin(), grid.end(), 0.0);
    std::fill(mlp.begin(), mlp.end(), 0.0);
}

HashField::HashField(const HashGridConfig& grid_config, int hidden, int outputs, uint64_t seed)
    : grid(grid_config, seed), mlp({grid_config.levels * grid_config.features + 3, hidden, hidden, outputs}, seed + 1)
{
}

FieldGrad HashField::make_grad() const
{
    FieldGrad g;
    g.grid.assign(grid.params().size(), 0.0);
    g.mlp.assign(mlp.params().size(), 0.0);
    return g;
}

HashField::Forward HashField::forward(std::span<const Vec3d> points, bool keep_cache) const
{
    Forward f;
    f.points.assign(points.begin(), points.end());
    Eigen::MatrixXd enc;
    grid.encode(points, enc);
    const int e = grid.output_dim();
    f.input.resize(e + 3, enc.cols());
    f.input.topRows(e) = enc;
    const auto& cfg = grid.config();
    for (size_t n = 0; n < points.size(); ++n)
        for (int a = 0; a < 3; ++a) {
            const double u = std::clamp((points[n][a] - cfg.box_min[a]) / (cfg.box_max[a] - cfg.box_min[a]), 0.0, 1.0);
            f.input(e + a, static_cast<Eigen::Index>(n)) = 2.0 * u - 1.0;
        }
    f.out = mlp.forward(f.input, keep_cache ? &f.cache : nullptr);
    g_eval_count += points.size();
    return f;
}

void HashField::backward(const Forward& f, const Eigen::MatrixXd& dout, FieldGrad& g, std::span<Vec3d> dp) const
{
    if (f.cache.inputs.empty()) throw ParameterError("hash field: forward pass kept no cache");
    const Eigen::MatrixXd din = mlp.backward(f.cache, dout, g.mlp);
    const int e = grid.output_dim();
    grid.backward(f.points, din.topRows(e), g.grid, dp);
    if (dp.empty()) return;
    const auto& cfg = grid.config();
    for (size_t n = 0; n < f.points.size(); ++n)
        for (int a = 0; a < 3; ++a) {
            const double ext = cfg.box_max[a] - cfg.box_min[a];
            const double u = (f.points[n][a] - cfg.box_min[a]) / ext;
            if (u > 0.0 && u < 1.0) dp[n][a] += din(e + a, static_cast<Eigen::Index>(n)) * 2.0 / ext;
        }
}

Attributes AttributeField::decode(const double* raw)
{
    Attributes a;
    a.scale = {std::exp(raw[0]), std::exp(raw[1]), std::exp(raw[2])};
    a.rotation = normalized(Quatd{1.0 + raw[3], raw[4], raw[5], raw[6]});
    std::copy(raw + 7, raw + kOutputs, a.sh.begin());
    return a;
}

void AttributeField::decode_backward(const double* raw, const Vec3d& dscale, const Quatd& drot, const double* dsh,
                                     double* draw)
{
    for (int a = 0; a < 3; ++a) draw[a] += dscale[a] * std::exp(raw[a]);
    const Quatd u{1.0 + raw[3], raw[4], raw[5], raw[6]};
    const double n = norm(u);
    const Quatd q{u.w / n, u.x / n, u.y / n, u.z / n};
    const double qd = q.w * drot.w + q.x * drot.x + q.y * drot.y + q.z * drot.z;
    draw[3] += (drot.w - q.w * qd) / n;
    draw[4] += (drot.x - q.x * qd) / n;
    draw[5] += (drot.y - q.y * qd) / n;
    draw[6] += (drot.z - q.z * qd) / n;
    if (dsh)
        for (int k = 0; k < 48; ++k) draw[7 + k] += dsh[k];
}

std::vector<Attributes> AttributeField::eval(std::span<const Vec3d> points) const
{
    const Forward f = forward(points, false);
    std::vector<Attributes> out(points.size());
    for (size_t n = 0; n < points.size(); ++n) {
        const double* raw = f.out.col(static_cast<Eigen::Index>(n)).data();
        for (int k = 0; k < kOutputs; ++k)
            if (!std::isfinite(raw[k])) throw NumericError("attribute field: non-finite output");
        out[n] = decode(raw);
    }
    return out;
}

std::vector<double> SdfField::eval(std::span<const Vec3d> points) const
{
    const Forward f = forward(points, false);
    std::vector<double> out(points.size());
    for (size_t n = 0; n < points.size(); ++n) {
        out[n] = f.out(0, static_cast<Eigen::Index>(n));
        if (!std::isfinite(out[n])) throw NumericError("sdf field: non-finite output");
    }
    return out;
}

double SdfField::eval(const Vec3d& p) const { return eval(std::span<const Vec3d>(&p, 1))[0]; }

double kernel_value(double gamma, double lambda, double x)
{
    const double c = std::cosh(0.5 * lambda * x);
    return gamma / (4.0 * c * c);
}

double OpacityKernel::value(double x) const { return kernel_value(gamma(), lambda(), x); }

std::array<double, 3> OpacityKernel::grad(double x) const
{
    const double l = lambda();
    const double k = value(x);
    const double t = std::tanh(0.5 * l * x);
    return {-l * t * k, k, -l * x * t * k};
}

double sdf_eikonal(const SdfField& sdf, std::span<const Vec3d> points, FieldGrad* grad, double h, double weight)
{
    if (points.empty()) return 0.0;
    constexpr size_t kChunk = 2048;
    const double inv_n = 1.0 / double(points.size());
    double total = 0.0;
    std::vector<Vec3d> probe;
    for (size_t b = 0; b < points.size(); b += kChunk) {
        const size_t n = std::min(kChunk, points.size() - b);
        probe.resize(6 * n);
        for (size_t i = 0; i < n; ++i)
            for (int a = 0; a < 3; ++a) {
                Vec3d lo = points[b + i], hi = points[b + i];
                lo[a] -= h;
                hi[a] += h;
                probe[6 * i + 2 * a] = hi;
                probe[6 * i + 2 * a + 1] = lo;
            }
        const auto f = sdf.forward(probe, grad != nullptr);
        Eigen::MatrixXd dout(1, static_cast<Eigen::Index>(6 * n));
        for (size_t i = 0; i < n; ++i) {
            Vec3d g;
            for (int a = 0; a < 3; ++a)
                g[a] = (f.out(0, static_cast<Eigen::Index>(6 * i + 2 * a)) -
                        f.out(0, static_cast<Eigen::Index>(6 * i + 2 * a + 1))) /
                       (2 * h);
            const double len = norm(g);
            if (!std::isfinite(len)) throw NumericError("eikonal: non-finite SDF gradient");
            const double r = len - 1.0;
            total += r * r;
            for (int a = 0; a < 3; ++a) {
                const double dg = len > 0 ? weight * 2.0 * r * g[a] / len * inv_n : 0.0;
                dout(0, static_cast<Eigen::Index>(6 * i + 2 * a)) = dg / (2 * h);
                dout(0, static_cast<Eigen::Index>(6 * i + 2 * a + 1)) = -dg / (2 * h);
            }
        }
        if (grad) sdf.backward(f, dout, *grad);
    }
    return total * inv_n;
}

namespace {

std::vector<Vec3d> sample_points(std::span<const Vec3d> anchors, const HashGridConfig& box, size_t count,
                                 double noise_std, double uniform_fraction, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, noise_std);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<size_t> pick(0, anchors.size() - 1);
    std::vector<Vec3d> out(count);
    for (auto& p : out) {
        if (unit(rng) < uniform_fraction) {
            for (int a = 0; a < 3; ++a) p[a] = box.box_min[a] + unit(rng) * (box.box_max[a] - box.box_min[a]);
        } else {
            const Vec3d& c = anchors[pick(rng)];
            p = {c.x + normal(rng), c.y + normal(rng), c.z + normal(rng)};
        }
    }
    return out;
}

} // namespace

PretrainReport pretrain_fields(AttributeField& attributes, SdfField& sdf, std::span<const Vec3d> points,
                               const std::function<double(const Vec3d&)>& target_sdf, const PretrainOptions& options)
{
    if (points.empty()) throw ParameterError("pretrain: no sample points");
    if (!(options.target_scale > 0.0)) throw ParameterError("pretrain: target scale must be positive");

    // The scale and rotation rows of the attribute head become constants:
    // zero weights, bias at the target.
    {
        auto& p = attributes.mlp.params();
        const size_t last = attributes.mlp.layer_count() - 1;
        const size_t rows = static_cast<size_t>(attributes.mlp.output_dim());
        const size_t cols = static_cast<size_t>(attributes.mlp.widths()[last]);
        const size_t w0 = attributes.mlp.weight_offset(last);
        for (size_t c = 0; c < cols; ++c)
            for (size_t r = 0; r < 7; ++r) p[w0 + c * rows + r] = 0.0;
        const size_t b0 = attributes.mlp.bias_offset(last);
        for (size_t r = 0; r < 3; ++r) p[b0 + r] = std::log(options.target_scale);
        for (size_t r = 3; r < 7; ++r) p[b0 + r] = 0.0;
    }

    std::mt19937_64 rng(options.seed);
    const auto& box = sdf.grid.config();
    const std::vector<Vec3d> held = sample_points(points, box, 2048, options.noise_std, 0.0, rng);
    std::vector<double> held_target(held.size());
    for (size_t i = 0; i < held.size(); ++i) held_target[i] = target_sdf(held[i]);

    FieldGrad grad = sdf.make_grad();
    Adam adam;
    adam.add_group("sdf", options.lr, {{&sdf.grid.params(), &grad.grid}, {&sdf.mlp.params(), &grad.mlp}});

    PretrainReport report;
    auto check = [&]() {
        const auto s = sdf.eval(held);
        double err = 0.0;
        for (size_t i = 0; i < s.size(); ++i) err += std::abs(s[i] - held_target[i]);
        report.sdf_mean_abs_error = err / static_cast<double>(s.size());
        const size_t n = std::min<size_t>(points.size(), 4096);
        const auto attr = attributes.eval(points.subspan(0, n));
        double sum = 0.0, worst = 0.0;
        for (const auto& a : attr)
            for (int k = 0; k < 3; ++k) {
                sum += a.scale[k];
                worst = std::max(worst, std::abs(a.scale[k] / options.target_scale - 1.0));
            }
        report.scale_mean = sum / (3.0 * static_cast<double>(attr.size()));
        report.scale_max_rel_error = worst;
        return report.sdf_mean_abs_error < options.sdf_tolerance && worst < options.scale_tolerance;
    };

    for (int step = 1; step <= options.max_steps; ++step) {
        const auto batch = sample_points(points, box, static_cast<size_t>(options.batch), options.noise_std,
                                         options.uniform_fraction, rng);
        const auto f = sdf.forward(batch);
        Eigen::MatrixXd dout(1, f.out.cols());
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (size_t i = 0; i < batch.size(); ++i)
            dout(0, static_cast<Eigen::Index>(i)) = 2.0 * (f.out(0, static_cast<Eigen::Index>(i)) - target_sdf(batch[i])) * inv;
        grad.zero();
        sdf.backward(f, dout, grad);
        if (options.eikonal_weight > 0.0) {
            const size_t m = std::min(batch.size(), static_cast<size_t>(options.eikonal_batch));
            sdf_eikonal(sdf, std::span<const Vec3d>(batch).first(m), &grad, 1e-3, options.eikonal_weight);
        }
        adam.step();
        report.steps = step;
        if (step % options.check_every == 0 && check()) return report;
    }
    if (check()) return report;
    std::ostringstream msg;
    msg << "pretrain: no convergence after " << report.steps << " steps (sdf mean abs error "
        << report.sdf_mean_abs_error << " m, scale max rel error " << report.scale_max_rel_error << ")";
    throw ConvergenceError(msg.str());
}

} // namespace gavatar::fields
