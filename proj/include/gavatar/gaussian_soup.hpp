#pragma once

// Per-primitive local Gaussians: storage, world transform, densification
// and the local-position regularizer.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gavatar/math.hpp"
#include "gavatar/primitive_rig.hpp"

namespace gavatar::soup {

constexpr size_t kDefaultCap = 2'000'000;
constexpr int kShCoeffs = 48;

// Flat storage grouped by primitive: Gaussians of primitive k occupy
// [offsets[k], offsets[k + 1]). Positions are the learnable local
// coordinates. The attribute arrays hold local rotation/scale, SH and
// opacity; they are authoritative only once baked, otherwise the fields
// are queried and these serve as a cache.
struct GaussianBank {
    std::vector<double> positions; // 3N
    std::vector<int32_t> primitive; // N
    std::vector<size_t> offsets;    // K + 1
    std::vector<double> rotations;  // 4N, w x y z
    std::vector<double> scales;     // 3N, primitive-local
    std::vector<double> sh;         // 48N
    std::vector<double> opacity;    // N
    bool baked = false;

    size_t size() const { return primitive.size(); }
    size_t primitive_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
    size_t count(size_t k) const { return offsets[k + 1] - offsets[k]; }
    Vec3d position(size_t i) const { return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]}; }
    Quatd rotation(size_t i) const
    {
        return {rotations[4 * i], rotations[4 * i + 1], rotations[4 * i + 2], rotations[4 * i + 3]};
    }
    Vec3d scale(size_t i) const { return {scales[3 * i], scales[3 * i + 1], scales[3 * i + 2]}; }

    // Throws ParameterError when array sizes, offsets or membership disagree.
    void validate(size_t cap = kDefaultCap) const;
};

// per_primitive must be a perfect cube; the lattice spans [-0.5, 0.5]^3.
GaussianBank init_bank(size_t primitives, size_t per_primitive);
// Explicit lattice dimensions (e.g. 4 x 4 x 1).
GaussianBank init_bank(size_t primitives, std::array<int, 3> lattice);

struct LocalGaussian {
    Vec3d position;
    Quatd rotation;
    Vec3d scale;
};

struct WorldGaussian {
    Vec3d position;
    Quatd rotation;
    Vec3d scale;
};

// p' = R (S * p) + P, s' = S * s, r' = normalize(R r).
WorldGaussian to_world(const LocalGaussian& g, const Vec3d& P, const Quatd& R, const Vec3d& S);

struct LocalGaussianGrad {
    Vec3d position;
    Quatd rotation{0, 0, 0, 0};
    Vec3d scale;
};

// Accumulates gradients of the local Gaussian and of the primitive.
void to_world_backward(const LocalGaussian& g, const Vec3d& P, const Quatd& R, const Vec3d& S,
                       const WorldGaussian& dworld, LocalGaussianGrad& dlocal, Vec3d& dP, Quatd& dR, Vec3d& dS);

struct DensifyConfig {
    double grad_threshold = 2e-4;
    double min_opacity = 0.01;
    double size_threshold = 0.01; // world meters
    double split_divisor = 1.6;
    size_t cap = kDefaultCap;
    bool enabled = true;
};

struct DensifyResult {
    GaussianBank bank;
    // For every Gaussian of the new bank: index in the old bank it was
    // carried over from, or -1 for a newly created child.
    std::vector<int64_t> source;
    // Old-bank index each new Gaussian derives from (itself for survivors).
    std::vector<int64_t> parent;
    size_t cloned = 0;
    size_t split = 0;
    size_t pruned = 0;
};

// grad_norm: mean accumulated position-gradient norm per Gaussian;
// world_scale: largest world-space axis scale per Gaussian.
DensifyResult densify_prune(const GaussianBank& bank, std::span<const double> grad_norm,
                            std::span<const double> opacity, std::span<const double> world_scale,
                            const DensifyConfig& config, std::mt19937_64& rng);

// Sum of squared local positions; gradient 2 p is accumulated into grad
// when non-empty.
double local_position_loss(const GaussianBank& bank, std::span<double> grad = {});

} // namespace gavatar::soup
