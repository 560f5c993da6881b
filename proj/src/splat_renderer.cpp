#include "gavatar/splat_renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gavatar/errors.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar::render {

namespace {

constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                           0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                           -0.4570457994644658, 1.445305721320277, -0.5900435899266435};

bool valid_coeffs(int k) { return k == 1 || k == 4 || k == 9 || k == 16; }

} // namespace

void Camera::validate() const
{
    if (!(fx > 0.0) || !(fy > 0.0)) throw ParameterError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ParameterError("camera: image size must be positive");
    const Mat3d rrt = rotation * rotation.transposed();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (std::abs(rrt(i, j) - (i == j ? 1.0 : 0.0)) > 1e-6)
                throw ParameterError("camera: rotation is not orthonormal");
}

Camera Camera::look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double fovy, int width, int height)
{
    const Vec3d f = normalized(target - eye);
    const Vec3d r = normalized(cross(f, up));
    const Vec3d d = cross(f, r);
    Camera c;
    c.rotation = Mat3d::from_columns(r, d, f).transposed();
    c.translation = -(c.rotation * eye);
    c.width = width;
    c.height = height;
    c.fy = 0.5 * height / std::tan(0.5 * fovy);
    c.fx = c.fy;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    return c;
}

void GaussianCloud::validate() const
{
    const size_t n = size();
    if (!valid_coeffs(sh_coeffs)) throw ParameterError("cloud: SH coefficient count must be 1, 4, 9 or 16");
    if (rotation.size() != n || scale.size() != n || opacity.size() != n ||
        sh.size() != n * 3 * static_cast<size_t>(sh_coeffs))
        throw ParameterError("cloud: attribute array sizes disagree");
}

void CloudGrad::resize(size_t n, int sh_coeffs)
{
    position.assign(n, Vec3d{});
    rotation.assign(n, Quatd{0, 0, 0, 0});
    scale.assign(n, Vec3d{});
    sh.assign(n * 3 * static_cast<size_t>(sh_coeffs), 0.0);
    opacity.assign(n, 0.0);
    screen_grad.assign(n, 0.0);
}

void sh_basis(const Vec3d& d, double* y, Vec3d* dy)
{
    const double x = d.x, yy_ = d.y, z = d.z;
    const double xx = x * x, yy = yy_ * yy_, zz = z * z;
    const double Y = yy_;
    y[0] = kShC0;
    y[1] = -kC1 * Y;
    y[2] = kC1 * z;
    y[3] = -kC1 * x;
    y[4] = kC2[0] * x * Y;
    y[5] = kC2[1] * Y * z;
    y[6] = kC2[2] * (2.0 * zz - xx - yy);
    y[7] = kC2[3] * x * z;
    y[8] = kC2[4] * (xx - yy);
    y[9] = kC3[0] * Y * (3.0 * xx - yy);
    y[10] = kC3[1] * x * Y * z;
    y[11] = kC3[2] * Y * (4.0 * zz - xx - yy);
    y[12] = kC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    y[13] = kC3[4] * x * (4.0 * zz - xx - yy);
    y[14] = kC3[5] * z * (xx - yy);
    y[15] = kC3[6] * x * (xx - 3.0 * yy);
    if (!dy) return;
    dy[0] = {0, 0, 0};
    dy[1] = {0, -kC1, 0};
    dy[2] = {0, 0, kC1};
    dy[3] = {-kC1, 0, 0};
    dy[4] = {kC2[0] * Y, kC2[0] * x, 0};
    dy[5] = {0, kC2[1] * z, kC2[1] * Y};
    dy[6] = {-2.0 * kC2[2] * x, -2.0 * kC2[2] * Y, 4.0 * kC2[2] * z};
    dy[7] = {kC2[3] * z, 0, kC2[3] * x};
    dy[8] = {2.0 * kC2[4] * x, -2.0 * kC2[4] * Y, 0};
    dy[9] = {6.0 * kC3[0] * x * Y, kC3[0] * (3.0 * xx - 3.0 * yy), 0};
    dy[10] = {kC3[1] * Y * z, kC3[1] * x * z, kC3[1] * x * Y};
    dy[11] = {-2.0 * kC3[2] * x * Y, kC3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * kC3[2] * Y * z};
    dy[12] = {-6.0 * kC3[3] * x * z, -6.0 * kC3[3] * Y * z, kC3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)};
    dy[13] = {kC3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * kC3[4] * x * Y, 8.0 * kC3[4] * x * z};
    dy[14] = {2.0 * kC3[5] * x * z, -2.0 * kC3[5] * Y * z, kC3[5] * (xx - yy)};
    dy[15] = {kC3[6] * (3.0 * xx - 3.0 * yy), -6.0 * kC3[6] * x * Y, 0};
}

std::array<double, 3> eval_sh(std::span<const double> coeffs, int per_channel, const Vec3d& dir)
{
    if (!valid_coeffs(per_channel) || coeffs.size() != 3 * static_cast<size_t>(per_channel))
        throw ParameterError("eval_sh: bad coefficient count");
    double y[16];
    sh_basis(dir, y);
    std::array<double, 3> rgb{0.5, 0.5, 0.5};
    for (int ch = 0; ch < 3; ++ch)
        for (int k = 0; k < per_channel; ++k) rgb[ch] += coeffs[ch * per_channel + k] * y[k];
    return rgb;
}

namespace {

// Covariance of a Gaussian in world space: M M^T with M = R(q) diag(s).
Mat3d covariance3d(const Quatd& q, const Vec3d& s)
{
    const Mat3d r = quat_to_mat(q);
    Mat3d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = r(i, j) * s[j];
    return m * m.transposed();
}

} // namespace

std::vector<Splat2D> project(const GaussianCloud& cloud, const Camera& cam)
{
    cloud.validate();
    cam.validate();
    std::vector<Splat2D> out(cloud.size());
    const Vec3d campos = cam.center();
    const int nc = cloud.sh_coeffs;
    parallel_for(cloud.size(), [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            Splat2D& s = out[i];
            const Vec3d t = cam.to_camera(cloud.position[i]);
            if (t.z < cam.near) continue;
            const double iz = 1.0 / t.z;
            const double j00 = cam.fx * iz, j02 = -cam.fx * t.x * iz * iz;
            const double j11 = cam.fy * iz, j12 = -cam.fy * t.y * iz * iz;
            const Mat3d sc = cam.rotation * covariance3d(cloud.rotation[i], cloud.scale[i]) * cam.rotation.transposed();
            // T = J Sigma_c J^T with J = [[j00, 0, j02], [0, j11, j12]].
            const double a = j00 * j00 * sc(0, 0) + 2.0 * j00 * j02 * sc(0, 2) + j02 * j02 * sc(2, 2);
            const double bb = j00 * j11 * sc(0, 1) + j00 * j12 * sc(0, 2) + j02 * j11 * sc(2, 1) + j02 * j12 * sc(2, 2);
            const double c = j11 * j11 * sc(1, 1) + 2.0 * j11 * j12 * sc(1, 2) + j12 * j12 * sc(2, 2);
            s.cov = {a + kCovarianceFloor, bb, c + kCovarianceFloor};
            const double det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
            if (!(det > 0.0)) continue;
            s.conic = {s.cov[2] / det, -s.cov[1] / det, s.cov[0] / det};
            s.mean = {cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy};
            const double mid = 0.5 * (s.cov[0] + s.cov[2]);
            const double lmax = mid + std::sqrt(std::max(0.1, mid * mid - det));
            s.radius = static_cast<int>(std::ceil(3.0 * std::sqrt(lmax)));
            if (s.mean.x + s.radius < 0.0 || s.mean.x - s.radius > cam.width || s.mean.y + s.radius < 0.0 ||
                s.mean.y - s.radius > cam.height)
                continue;
            s.depth = t.z;
            const Vec3d dir = normalized(cloud.position[i] - campos);
            const auto rgb = eval_sh(std::span<const double>(cloud.sh.data() + i * 3 * nc, 3 * nc), nc, dir);
            for (int ch = 0; ch < 3; ++ch) {
                s.color_clamped[ch] = rgb[ch] < 0.0 || rgb[ch] > 1.0;
                s.color[ch] = std::clamp(rgb[ch], 0.0, 1.0);
            }
            s.opacity = cloud.opacity[i];
            s.valid = true;
        }
    });
    return out;
}

namespace {

void tile_range(const Splat2D& s, const RasterState& st, int& x0, int& x1, int& y0, int& y1)
{
    x0 = std::max(0, static_cast<int>(std::floor((s.mean.x - s.radius) / kTile)));
    x1 = std::min(st.tiles_x - 1, static_cast<int>(std::floor((s.mean.x + s.radius) / kTile)));
    y0 = std::max(0, static_cast<int>(std::floor((s.mean.y - s.radius) / kTile)));
    y1 = std::min(st.tiles_y - 1, static_cast<int>(std::floor((s.mean.y + s.radius) / kTile)));
}

void build_tiles(std::span<const Splat2D> splats, RasterState& st)
{
    const size_t tiles = static_cast<size_t>(st.tiles_x) * st.tiles_y;
    std::vector<uint32_t> counts(tiles + 1, 0);
    for (const auto& s : splats) {
        if (!s.valid) continue;
        int x0, x1, y0, y1;
        tile_range(s, st, x0, x1, y0, y1);
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx) ++counts[static_cast<size_t>(ty) * st.tiles_x + tx + 1];
    }
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    st.tile_begin = counts;
    st.order.assign(counts.back(), 0);
    std::vector<uint32_t> cursor(counts.begin(), counts.end() - 1);
    // Appending in index order keeps ties in index order under a stable sort.
    for (size_t i = 0; i < splats.size(); ++i) {
        const auto& s = splats[i];
        if (!s.valid) continue;
        int x0, x1, y0, y1;
        tile_range(s, st, x0, x1, y0, y1);
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx) st.order[cursor[static_cast<size_t>(ty) * st.tiles_x + tx]++] = static_cast<uint32_t>(i);
    }
    parallel_for(tiles, [&](size_t b, size_t e, size_t) {
        for (size_t t = b; t < e; ++t)
            std::stable_sort(st.order.begin() + st.tile_begin[t], st.order.begin() + st.tile_begin[t + 1],
                             [&](uint32_t a, uint32_t c) { return splats[a].depth < splats[c].depth; });
    });
}

inline double mahalanobis(const Splat2D& s, double px, double py, double& dx, double& dy)
{
    dx = px - s.mean.x;
    dy = py - s.mean.y;
    return s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
}

} // namespace

RenderTarget rasterize(std::span<const Splat2D> splats, const std::array<double, 3>& background, int width, int height,
                       RasterState* state)
{
    if (width <= 0 || height <= 0) throw ParameterError("rasterize: image size must be positive");
    RasterState local;
    RasterState& st = state ? *state : local;
    st.width = width;
    st.height = height;
    st.tiles_x = (width + kTile - 1) / kTile;
    st.tiles_y = (height + kTile - 1) / kTile;
    st.background = background;
    build_tiles(splats, st);
    st.final_t.assign(static_cast<size_t>(width) * height, 1.0);
    st.n_contrib.assign(static_cast<size_t>(width) * height, 0);

    RenderTarget out{Image(width, height, 3), Image(width, height, 1)};
    const size_t tiles = static_cast<size_t>(st.tiles_x) * st.tiles_y;
    parallel_for(tiles, [&](size_t tb, size_t te, size_t) {
        for (size_t t = tb; t < te; ++t) {
            const int tx = static_cast<int>(t % st.tiles_x), ty = static_cast<int>(t / st.tiles_x);
            const uint32_t lb = st.tile_begin[t], le = st.tile_begin[t + 1];
            for (int py = ty * kTile; py < std::min(height, (ty + 1) * kTile); ++py)
                for (int px = tx * kTile; px < std::min(width, (tx + 1) * kTile); ++px) {
                    const double cx = px + 0.5, cy = py + 0.5;
                    double T = 1.0;
                    double c[3] = {0, 0, 0};
                    uint32_t consumed = 0;
                    for (uint32_t l = lb; l < le; ++l) {
                        const Splat2D& s = splats[st.order[l]];
                        double dx, dy;
                        const double q = mahalanobis(s, cx, cy, dx, dy);
                        if (q > kCutoff) continue;
                        const double alpha = std::min(kAlphaMax, s.opacity * std::exp(-0.5 * q));
                        const double next = T * (1.0 - alpha);
                        if (next < kTransmittanceMin) break;
                        for (int ch = 0; ch < 3; ++ch) c[ch] += alpha * s.color[ch] * T;
                        T = next;
                        consumed = l - lb + 1;
                    }
                    const size_t pix = static_cast<size_t>(py) * width + px;
                    st.final_t[pix] = T;
                    st.n_contrib[pix] = consumed;
                    for (int ch = 0; ch < 3; ++ch) out.rgb.data[pix * 3 + ch] = c[ch] + T * background[ch];
                    out.alpha.data[pix] = 1.0 - T;
                }
        }
    });
    return out;
}

void SplatGrad::resize(size_t n)
{
    mean.assign(n, Vec2d{});
    conic.assign(n, {0, 0, 0});
    color.assign(n, {0, 0, 0});
    opacity.assign(n, 0.0);
}

SplatGrad rasterize_backward(std::span<const Splat2D> splats, const RasterState& st, const Image& drgb,
                             const Image& dalpha)
{
    if (drgb.width != st.width || drgb.height != st.height || drgb.channels != 3)
        throw ParameterError("rasterize_backward: rgb gradient shape mismatch");
    const bool has_alpha = !dalpha.data.empty();
    if (has_alpha && (dalpha.width != st.width || dalpha.height != st.height || dalpha.channels != 1))
        throw ParameterError("rasterize_backward: alpha gradient shape mismatch");

    const size_t tiles = static_cast<size_t>(st.tiles_x) * st.tiles_y;
    const size_t workers = std::min(worker_count(), std::max<size_t>(tiles, 1));
    std::vector<SplatGrad> partial(workers);
    parallel_for(tiles, [&](size_t tb, size_t te, size_t w) {
        SplatGrad& g = partial[w];
        if (g.opacity.empty()) g.resize(splats.size());
        for (size_t t = tb; t < te; ++t) {
            const int tx = static_cast<int>(t % st.tiles_x), ty = static_cast<int>(t / st.tiles_x);
            const uint32_t lb = st.tile_begin[t];
            for (int py = ty * kTile; py < std::min(st.height, (ty + 1) * kTile); ++py)
                for (int px = tx * kTile; px < std::min(st.width, (tx + 1) * kTile); ++px) {
                    const size_t pix = static_cast<size_t>(py) * st.width + px;
                    const double cx = px + 0.5, cy = py + 0.5;
                    const double T_final = st.final_t[pix];
                    const double dc[3] = {drgb.data[pix * 3], drgb.data[pix * 3 + 1], drgb.data[pix * 3 + 2]};
                    const double da_img = has_alpha ? dalpha.data[pix] : 0.0;
                    double T = T_final;
                    double accum[3] = {st.background[0], st.background[1], st.background[2]};
                    for (uint32_t l = lb + st.n_contrib[pix]; l-- > lb;) {
                        const uint32_t idx = st.order[l];
                        const Splat2D& s = splats[idx];
                        double dx, dy;
                        const double q = mahalanobis(s, cx, cy, dx, dy);
                        if (q > kCutoff) continue;
                        const double G = std::exp(-0.5 * q);
                        const double raw_alpha = s.opacity * G;
                        const double alpha = std::min(kAlphaMax, raw_alpha);
                        T /= (1.0 - alpha);
                        double dL_dalpha = 0.0;
                        for (int ch = 0; ch < 3; ++ch) {
                            g.color[idx][ch] += alpha * T * dc[ch];
                            dL_dalpha += (s.color[ch] - accum[ch]) * T * dc[ch];
                            accum[ch] = alpha * s.color[ch] + (1.0 - alpha) * accum[ch];
                        }
                        dL_dalpha += da_img * T_final / (1.0 - alpha);
                        if (raw_alpha > kAlphaMax) continue;
                        g.opacity[idx] += G * dL_dalpha;
                        const double dq = -0.5 * G * s.opacity * dL_dalpha;
                        g.conic[idx][0] += dq * dx * dx;
                        g.conic[idx][1] += dq * 2.0 * dx * dy;
                        g.conic[idx][2] += dq * dy * dy;
                        g.mean[idx].x += -dq * (2.0 * s.conic[0] * dx + 2.0 * s.conic[1] * dy);
                        g.mean[idx].y += -dq * (2.0 * s.conic[1] * dx + 2.0 * s.conic[2] * dy);
                    }
                }
        }
    });
    SplatGrad out = std::move(partial[0]);
    if (out.opacity.empty()) out.resize(splats.size());
    for (size_t w = 1; w < partial.size(); ++w) {
        if (partial[w].opacity.empty()) continue;
        for (size_t i = 0; i < splats.size(); ++i) {
            out.mean[i].x += partial[w].mean[i].x;
            out.mean[i].y += partial[w].mean[i].y;
            for (int k = 0; k < 3; ++k) {
                out.conic[i][k] += partial[w].conic[i][k];
                out.color[i][k] += partial[w].color[i][k];
            }
            out.opacity[i] += partial[w].opacity[i];
        }
    }
    return out;
}

void project_backward(const GaussianCloud& cloud, const Camera& cam, std::span<const Splat2D> splats,
                      const SplatGrad& dsplat, CloudGrad& grad)
{
    const size_t n = cloud.size();
    if (splats.size() != n || dsplat.opacity.size() != n) throw ParameterError("project_backward: size mismatch");
    if (grad.opacity.size() != n) grad.resize(n, cloud.sh_coeffs);
    const Vec3d campos = cam.center();
    const int nc = cloud.sh_coeffs;
    const double ndc = 0.5 * std::max(cam.width, cam.height);
    parallel_for(n, [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const Splat2D& s = splats[i];
            if (!s.valid) continue;
            grad.opacity[i] += dsplat.opacity[i];

            // Color through SH and the view direction.
            const Vec3d v = cloud.position[i] - campos;
            const double vn = norm(v);
            const Vec3d dir = v / vn;
            double y[16];
            Vec3d dy[16];
            sh_basis(dir, y, dy);
            Vec3d ddir;
            for (int ch = 0; ch < 3; ++ch) {
                if (s.color_clamped[ch]) continue;
                const double g = dsplat.color[i][ch];
                if (g == 0.0) continue;
                const double* c = cloud.sh.data() + i * 3 * nc + ch * nc;
                double* gc = grad.sh.data() + i * 3 * nc + ch * nc;
                for (int k = 0; k < nc; ++k) {
                    gc[k] += g * y[k];
                    ddir += dy[k] * (g * c[k]);
                }
            }
            Vec3d dpos = (ddir - dir * dot(dir, ddir)) / vn;

            // Conic -> 2D covariance.
            const double A = s.cov[0], B = s.cov[1], C = s.cov[2];
            const double det = A * C - B * B, d2 = det * det;
            const auto& gk = dsplat.conic[i];
            const double dA = gk[0] * (-C * C / d2) + gk[1] * (B * C / d2) + gk[2] * (-B * B / d2);
            const double dB = gk[0] * (2.0 * B * C / d2) + gk[1] * (-(det + 2.0 * B * B) / d2) + gk[2] * (2.0 * A * B / d2);
            const double dC = gk[0] * (-B * B / d2) + gk[1] * (B * A / d2) + gk[2] * (-A * A / d2);

            const Vec3d t = cam.to_camera(cloud.position[i]);
            const double iz = 1.0 / t.z, iz2 = iz * iz;
            Mat3d J; // third row zero
            J(0, 0) = cam.fx * iz;
            J(0, 2) = -cam.fx * t.x * iz2;
            J(1, 1) = cam.fy * iz;
            J(1, 2) = -cam.fy * t.y * iz2;
            const Mat3d sigma = covariance3d(cloud.rotation[i], cloud.scale[i]);
            const Mat3d& W = cam.rotation;
            const Mat3d sc = W * sigma * W.transposed();
            Mat3d dcov; // symmetric upstream gradient in the 2x2 block
            dcov(0, 0) = dA;
            dcov(0, 1) = dcov(1, 0) = 0.5 * dB;
            dcov(1, 1) = dC;
            const Mat3d dsc = J.transposed() * dcov * J;
            Mat3d dJ = dcov * J * sc;
            for (auto& x : dJ.m) x *= 2.0;
            Vec3d dt;
            dt.x = dJ(0, 2) * (-cam.fx * iz2);
            dt.y = dJ(1, 2) * (-cam.fy * iz2);
            dt.z = dJ(0, 0) * (-cam.fx * iz2) + dJ(0, 2) * (2.0 * cam.fx * t.x * iz2 * iz) +
                   dJ(1, 1) * (-cam.fy * iz2) + dJ(1, 2) * (2.0 * cam.fy * t.y * iz2 * iz);
            // Mean.
            const Vec2d dm = dsplat.mean[i];
            dt.x += dm.x * cam.fx * iz;
            dt.y += dm.y * cam.fy * iz;
            dt.z += -dm.x * cam.fx * t.x * iz2 - dm.y * cam.fy * t.y * iz2;
            dpos += W.transposed() * dt;
            grad.position[i] += dpos;
            grad.screen_grad[i] += std::sqrt(dm.x * dm.x + dm.y * dm.y) * ndc;

            // Sigma = M M^T, M = R(q) diag(s).
            const Mat3d dsigma = W.transposed() * dsc * W;
            const Mat3d r = quat_to_mat(cloud.rotation[i]);
            Mat3d m;
            for (int a = 0; a < 3; ++a)
                for (int c2 = 0; c2 < 3; ++c2) m(a, c2) = r(a, c2) * cloud.scale[i][c2];
            Mat3d dm3 = dsigma * m;
            for (auto& x : dm3.m) x *= 2.0;
            Mat3d dr;
            Vec3d ds;
            for (int a = 0; a < 3; ++a)
                for (int c2 = 0; c2 < 3; ++c2) {
                    dr(a, c2) = dm3(a, c2) * cloud.scale[i][c2];
                    ds[c2] += dm3(a, c2) * r(a, c2);
                }
            grad.scale[i] += ds;
            const Quatd dq = quat_to_mat_backward(cloud.rotation[i], dr);
            grad.rotation[i] = {grad.rotation[i].w + dq.w, grad.rotation[i].x + dq.x, grad.rotation[i].y + dq.y,
                                grad.rotation[i].z + dq.z};
        }
    });
}

RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const std::array<double, 3>& background)
{
    RenderOutput out;
    out.splats = project(cloud, cam);
    out.target = rasterize(out.splats, background, cam.width, cam.height, &out.state);
    return out;
}

CloudGrad render_backward(const GaussianCloud& cloud, const Camera& cam, const RenderOutput& out, const Image& drgb,
                          const Image& dalpha)
{
    const SplatGrad ds = rasterize_backward(out.splats, out.state, drgb, dalpha);
    CloudGrad g;
    g.resize(cloud.size(), cloud.sh_coeffs);
    project_backward(cloud, cam, out.splats, ds, g);
    return g;
}

} // namespace gavatar::render
