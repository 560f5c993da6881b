#pragma once

// Tile-based differentiable Gaussian splatting on the CPU.
//
// Camera convention: x right, y down, z forward (OpenCV). Pixel (i, j) has
// its center at (i + 0.5, j + 0.5).

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "gavatar/image.hpp"
#include "gavatar/math.hpp"

namespace gavatar::render {

constexpr int kTile = 16;
constexpr double kCovarianceFloor = 0.3; // px^2
constexpr double kAlphaMax = 0.99;
constexpr double kTransmittanceMin = 1e-4;
constexpr double kCutoff = 9.0; // Mahalanobis distance squared (3 sigma)

struct Camera {
    Mat3d rotation = Mat3d::identity(); // world to camera
    Vec3d translation;
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    double near = 0.01;

    Vec3d to_camera(const Vec3d& p) const { return rotation * p + translation; }
    Vec3d center() const { return -(rotation.transposed() * translation); }
    void validate() const;

    // Square pixels, principal point at the image center.
    static Camera look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double fovy, int width,
                          int height);
};

// Gaussians ready to render. sh holds 3 * coeffs values per Gaussian laid
// out c[channel * coeffs + k], coeffs in {1, 4, 9, 16}.
struct GaussianCloud {
    std::vector<Vec3d> position;
    std::vector<Quatd> rotation;
    std::vector<Vec3d> scale;
    std::vector<double> sh;
    std::vector<double> opacity;
    int sh_coeffs = 16;

    size_t size() const { return position.size(); }
    void validate() const;
};

struct CloudGrad {
    std::vector<Vec3d> position;
    std::vector<Quatd> rotation;
    std::vector<Vec3d> scale;
    std::vector<double> sh;
    std::vector<double> opacity;
    // |dL/dmean2d| per Gaussian in normalized device units, for densification.
    std::vector<double> screen_grad;

    void resize(size_t n, int sh_coeffs);
};

constexpr double kShC0 = 0.28209479177387814;

// Real SH basis up to degree 3 (16 values) and its gradient w.r.t. the
// direction components.
void sh_basis(const Vec3d& dir, double* y, Vec3d* dy = nullptr);

// Per channel 0.5 + sum_k c[ch * coeffs + k] Y_k(dir); unclamped.
std::array<double, 3> eval_sh(std::span<const double> coeffs, int per_channel, const Vec3d& dir);

struct Splat2D {
    bool valid = false;
    Vec2d mean;
    std::array<double, 3> cov{};   // a, b, c of [[a, b], [b, c]], floor included
    std::array<double, 3> conic{}; // inverse of cov
    double depth = 0.0;
    std::array<double, 3> color{};
    std::array<bool, 3> color_clamped{};
    double opacity = 0.0;
    int radius = 0;
};

// EWA projection of every Gaussian. Culled entries have valid = false.
std::vector<Splat2D> project(const GaussianCloud& cloud, const Camera& cam);

struct RenderTarget {
    Image rgb;   // W x H x 3
    Image alpha; // W x H x 1
};

// Retained forward state for the backward pass.
struct RasterState {
    int width = 0, height = 0, tiles_x = 0, tiles_y = 0;
    std::vector<uint32_t> order;        // splat indices grouped by tile, front to back
    std::vector<uint32_t> tile_begin;   // tiles_x * tiles_y + 1
    std::vector<double> final_t;        // per pixel
    std::vector<uint32_t> n_contrib;    // per pixel: list entries consumed
    std::array<double, 3> background{};
};

RenderTarget rasterize(std::span<const Splat2D> splats, const std::array<double, 3>& background, int width,
                       int height, RasterState* state = nullptr);

struct SplatGrad {
    std::vector<Vec2d> mean;
    std::vector<std::array<double, 3>> conic;
    std::vector<std::array<double, 3>> color;
    std::vector<double> opacity;

    void resize(size_t n);
};

// dL/dsplat from dL/dI (W x H x 3) and dL/dI_alpha (W x H x 1, may be
// empty). Gradients w.r.t. colors are before clamping.
SplatGrad rasterize_backward(std::span<const Splat2D> splats, const RasterState& state, const Image& drgb,
                             const Image& dalpha);

// Chains splat gradients to the cloud, accumulating into grad.
void project_backward(const GaussianCloud& cloud, const Camera& cam, std::span<const Splat2D> splats,
                      const SplatGrad& dsplat, CloudGrad& grad);

struct RenderOutput {
    RenderTarget target;
    std::vector<Splat2D> splats;
    RasterState state;
};

RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const std::array<double, 3>& background);

// Convenience: full backward from image gradients to the cloud.
CloudGrad render_backward(const GaussianCloud& cloud, const Camera& cam, const RenderOutput& out, const Image& drgb,
                          const Image& dalpha);

} // namespace gavatar::render
