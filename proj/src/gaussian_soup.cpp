#include "gavatar/gaussian_soup.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gavatar/errors.hpp"

namespace gavatar::soup {

void GaussianBank::validate(size_t cap) const
{
    const size_t n = size();
    if (positions.size() != 3 * n || rotations.size() != 4 * n || scales.size() != 3 * n ||
        sh.size() != kShCoeffs * n || opacity.size() != n)
        throw ParameterError("bank: attribute array sizes disagree");
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n)
        throw ParameterError("bank: offsets do not cover the bank");
    for (size_t k = 0; k + 1 < offsets.size(); ++k) {
        if (offsets[k + 1] <= offsets[k]) throw ParameterError("bank: offsets must be strictly increasing");
        for (size_t i = offsets[k]; i < offsets[k + 1]; ++i)
            if (primitive[i] != static_cast<int32_t>(k)) throw ParameterError("bank: primitive membership mismatch");
    }
    if (n > cap) throw ParameterError("bank: Gaussian count exceeds the cap");
}

GaussianBank init_bank(size_t primitives, std::array<int, 3> lattice)
{
    if (primitives == 0) throw ParameterError("init_bank: no primitives");
    for (int d : lattice)
        if (d < 1) throw ParameterError("init_bank: lattice dimensions must be positive");
    const size_t per = static_cast<size_t>(lattice[0]) * lattice[1] * lattice[2];
    const size_t n = primitives * per;
    GaussianBank b;
    b.positions.reserve(3 * n);
    b.primitive.reserve(n);
    b.rotations.reserve(4 * n);
    b.scales.reserve(3 * n);
    auto coord = [](int i, int d) { return d == 1 ? 0.0 : -0.5 + static_cast<double>(i) / (d - 1); };
    const double s = 1.0 / std::max({lattice[0], lattice[1], lattice[2]});
    for (size_t k = 0; k < primitives; ++k) {
        b.offsets.push_back(k * per);
        for (int z = 0; z < lattice[2]; ++z)
            for (int y = 0; y < lattice[1]; ++y)
                for (int x = 0; x < lattice[0]; ++x) {
                    b.positions.insert(b.positions.end(), {coord(x, lattice[0]), coord(y, lattice[1]), coord(z, lattice[2])});
                    b.primitive.push_back(static_cast<int32_t>(k));
                    b.rotations.insert(b.rotations.end(), {1.0, 0.0, 0.0, 0.0});
                    b.scales.insert(b.scales.end(), {s, s, s});
                }
    }
    b.offsets.push_back(n);
    b.sh.assign(kShCoeffs * n, 0.0);
    b.opacity.assign(n, 1.0);
    return b;
}

GaussianBank init_bank(size_t primitives, size_t per_primitive)
{
    const int side = static_cast<int>(std::lround(std::cbrt(static_cast<double>(per_primitive))));
    if (per_primitive == 0 || static_cast<size_t>(side) * side * side != per_primitive)
        throw ParameterError("init_bank: per_primitive must be a perfect cube");
    return init_bank(primitives, {side, side, side});
}

WorldGaussian to_world(const LocalGaussian& g, const Vec3d& P, const Quatd& R, const Vec3d& S)
{
    WorldGaussian w;
    w.position = rotate(R, hadamard(S, g.position)) + P;
    w.scale = hadamard(S, g.scale);
    // Unit times unit stays unit to rounding; no renormalization keeps the identity exact.
    w.rotation = R * g.rotation;
    return w;
}

void to_world_backward(const LocalGaussian& g, const Vec3d& P, const Quatd& R, const Vec3d& S,
                       const WorldGaussian& dworld, LocalGaussianGrad& dlocal, Vec3d& dP, Quatd& dR, Vec3d& dS)
{
    (void)P;
    const Mat3d m = quat_to_mat(R);
    const Vec3d u = hadamard(S, g.position);
    dP += dworld.position;
    const Vec3d du = m.transposed() * dworld.position;
    dlocal.position += hadamard(S, du);
    dS += hadamard(g.position, du);
    const Quatd dRpos = quat_to_mat_backward(R, outer(dworld.position, u));

    dlocal.scale += hadamard(S, dworld.scale);
    dS += hadamard(g.scale, dworld.scale);

    Quatd da, db;
    rig::quat_mul_backward(R, g.rotation, dworld.rotation, da, db);
    dR = {dR.w + dRpos.w + da.w, dR.x + dRpos.x + da.x, dR.y + dRpos.y + da.y, dR.z + dRpos.z + da.z};
    dlocal.rotation = {dlocal.rotation.w + db.w, dlocal.rotation.x + db.x, dlocal.rotation.y + db.y,
                       dlocal.rotation.z + db.z};
}

namespace {

void append(GaussianBank& out, const GaussianBank& in, size_t i)
{
    out.positions.insert(out.positions.end(), in.positions.begin() + 3 * i, in.positions.begin() + 3 * i + 3);
    out.primitive.push_back(in.primitive[i]);
    out.rotations.insert(out.rotations.end(), in.rotations.begin() + 4 * i, in.rotations.begin() + 4 * i + 4);
    out.scales.insert(out.scales.end(), in.scales.begin() + 3 * i, in.scales.begin() + 3 * i + 3);
    out.sh.insert(out.sh.end(), in.sh.begin() + kShCoeffs * i, in.sh.begin() + kShCoeffs * (i + 1));
    out.opacity.push_back(in.opacity[i]);
}

} // namespace

DensifyResult densify_prune(const GaussianBank& bank, std::span<const double> grad_norm,
                            std::span<const double> opacity, std::span<const double> world_scale,
                            const DensifyConfig& config, std::mt19937_64& rng)
{
    const size_t n = bank.size();
    if (grad_norm.size() != n || opacity.size() != n || world_scale.size() != n)
        throw ParameterError("densify_prune: statistics do not cover the bank");

    DensifyResult r;
    if (!config.enabled) {
        r.bank = bank;
        r.source.resize(n);
        std::iota(r.source.begin(), r.source.end(), 0);
        r.parent = r.source;
        return r;
    }

    // 0 keep, 1 prune, 2 clone, 3 split.
    std::vector<uint8_t> action(n, 0);
    for (size_t k = 0; k < bank.primitive_count(); ++k) {
        size_t kept = bank.count(k);
        for (size_t i = bank.offsets[k]; i < bank.offsets[k + 1]; ++i)
            if (opacity[i] < config.min_opacity && kept > 1) {
                action[i] = 1;
                --kept;
                ++r.pruned;
            }
    }
    const size_t survivors = n - r.pruned;
    if (n <= config.cap && survivors < config.cap) {
        std::vector<size_t> candidates;
        for (size_t i = 0; i < n; ++i)
            if (action[i] == 0 && grad_norm[i] > config.grad_threshold) candidates.push_back(i);
        std::stable_sort(candidates.begin(), candidates.end(),
                         [&](size_t a, size_t b) { return grad_norm[a] > grad_norm[b]; });
        const size_t budget = std::min(candidates.size(), config.cap - survivors);
        for (size_t c = 0; c < budget; ++c) {
            const size_t i = candidates[c];
            if (world_scale[i] < config.size_threshold) {
                action[i] = 2;
                ++r.cloned;
            } else {
                action[i] = 3;
                ++r.split;
            }
        }
    }

    std::normal_distribution<double> normal(0.0, 1.0);
    GaussianBank& out = r.bank;
    out.baked = bank.baked;
    for (size_t k = 0; k < bank.primitive_count(); ++k) {
        out.offsets.push_back(out.size());
        for (size_t i = bank.offsets[k]; i < bank.offsets[k + 1]; ++i) {
            if (action[i] == 1) continue;
            if (action[i] == 3) {
                const Quatd q = bank.rotation(i);
                const Vec3d s = bank.scale(i);
                for (int child = 0; child < 2; ++child) {
                    append(out, bank, i);
                    const Vec3d offset = rotate(q, Vec3d{s.x * normal(rng), s.y * normal(rng), s.z * normal(rng)});
                    const size_t j = out.size() - 1;
                    for (int a = 0; a < 3; ++a) {
                        out.positions[3 * j + a] += offset[a];
                        out.scales[3 * j + a] /= config.split_divisor;
                    }
                    r.source.push_back(-1);
                    r.parent.push_back(static_cast<int64_t>(i));
                }
                continue;
            }
            append(out, bank, i);
            r.source.push_back(static_cast<int64_t>(i));
            r.parent.push_back(static_cast<int64_t>(i));
            if (action[i] == 2) {
                append(out, bank, i);
                r.source.push_back(-1);
                r.parent.push_back(static_cast<int64_t>(i));
            }
        }
    }
    out.offsets.push_back(out.size());
    return r;
}

double local_position_loss(const GaussianBank& bank, std::span<double> grad)
{
    if (!grad.empty() && grad.size() != bank.positions.size())
        throw ParameterError("local_position_loss: gradient size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < bank.positions.size(); ++i) {
        s += bank.positions[i] * bank.positions[i];
        if (!grad.empty()) grad[i] += 2.0 * bank.positions[i];
    }
    return s;
}

} // namespace gavatar::soup
