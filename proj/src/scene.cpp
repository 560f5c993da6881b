#include "gavatar/scene.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <unordered_map>

#include <Eigen/Dense>

#include "gavatar/autodiff.hpp"
#include "gavatar/errors.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar::scene {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::array<int, 3> lattice_for(int per_primitive)
{
    const int c = static_cast<int>(std::lround(std::cbrt(static_cast<double>(per_primitive))));
    if (c * c * c == per_primitive) return {c, c, c};
    const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(per_primitive))));
    if (s * s == per_primitive) return {s, s, 1};
    throw ParameterError("scene: gaussians_per_primitive must be a perfect cube or square");
}

std::vector<body::RigidTransform<double>> transforms_for(const Scene& s, const body::BodyParams& params)
{
    return body::skinning_transforms<double>(s.body.skeleton, params.pose, params.shape);
}

body::BodyParams rest_params(const Scene& s)
{
    body::BodyParams p = s.rest;
    p.shape.assign(s.body.skeleton.size(), 0.0);
    return p;
}

Vec3d divide(const Vec3d& a, const Vec3d& b) { return {a.x / b.x, a.y / b.y, a.z / b.z}; }

// Uniform bins over a point set for nearest-neighbour queries.
class PointBins {
public:
    PointBins(std::span<const Vec3d> points, double cell) : points_(points), cell_(cell)
    {
        for (uint32_t i = 0; i < points.size(); ++i) bins_[key(cell_of(points[i]))].push_back(i);
    }

    uint32_t nearest(const Vec3d& q) const
    {
        const auto c = cell_of(q);
        double best = std::numeric_limits<double>::infinity();
        uint32_t arg = 0;
        for (int r = 0;; ++r) {
            for (int dz = -r; dz <= r; ++dz)
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
                        const auto it = bins_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
                        if (it == bins_.end()) continue;
                        for (uint32_t i : it->second) {
                            const Vec3d d = points_[i] - q;
                            const double d2 = dot(d, d);
                            if (d2 < best || (d2 == best && i < arg)) {
                                best = d2;
                                arg = i;
                            }
                        }
                    }
            // Every unvisited point is at least r * cell away.
            if (best <= (r * cell_) * (r * cell_) || r > 4096) return arg;
        }
    }

private:
    std::array<int64_t, 3> cell_of(const Vec3d& p) const
    {
        return {static_cast<int64_t>(std::floor(p.x / cell_)), static_cast<int64_t>(std::floor(p.y / cell_)),
                static_cast<int64_t>(std::floor(p.z / cell_))};
    }
    static uint64_t key(const std::array<int64_t, 3>& c)
    {
        const auto u = [](int64_t v) { return static_cast<uint64_t>(v + (1 << 20)) & 0x1fffff; };
        return (u(c[0]) << 42) | (u(c[1]) << 21) | u(c[2]);
    }

    std::span<const Vec3d> points_;
    double cell_;
    std::unordered_map<uint64_t, std::vector<uint32_t>> bins_;
};

} // namespace

void SceneConfig::validate() const
{
    if (anchor_grid < 1) throw ParameterError("scene: anchor_grid must be positive");
    if (gaussians_per_primitive < 1) throw ParameterError("scene: gaussians_per_primitive must be positive");
    lattice_for(gaussians_per_primitive);
    if (corrective_hidden < 1 || field_hidden < 1) throw ParameterError("scene: hidden widths must be positive");
}

void Scene::update_canonical()
{
    const auto frames = body::posed_anchor_frames<double>(body.mesh, anchors, transforms_for(*this, rest_params(*this)));
    canonical = rig::compose(frames, nullptr);
}

void Scene::validate() const
{
    body.skeleton.validate();
    const size_t k = anchors.size();
    if (nets.primitives() != k || bank.primitive_count() != k || canonical.size() != k)
        throw ParameterError("scene: primitive count mismatch");
    bank.validate(std::numeric_limits<size_t>::max());
    natural.validate(body.skeleton.size());
    rest.validate(body.skeleton.size());
    if (attributes.output_dim() != fields::AttributeField::kOutputs || sdf.output_dim() != 1)
        throw ParameterError("scene: field output sizes");
}

Scene make_scene(const SceneConfig& config) { return make_scene(config, body::make_capsule_person()); }

Scene make_scene(const SceneConfig& config, body::BodyModel body)
{
    config.validate();
    body.skeleton.validate();
    body.mesh.validate(body.skeleton.size());
    Scene s;
    s.body = std::move(body);
    s.anchors = body::compute_anchors(s.body.mesh, config.anchor_grid);
    const size_t k = s.anchors.size();
    const size_t j = s.body.skeleton.size();
    s.nets = rig::CorrectiveNets(k, j, config.corrective_hidden, config.seed + 1);
    s.bank = soup::init_bank(k, lattice_for(config.gaussians_per_primitive));
    s.attributes = fields::AttributeField(config.attribute_grid, config.field_hidden, config.seed + 2);
    s.sdf = fields::SdfField(config.sdf_grid, config.field_hidden, config.seed + 3);
    s.rest = body::canonical_pose(s.body.skeleton);
    s.natural = s.rest;
    s.update_canonical();
    return s;
}

std::vector<Vec3d> canonical_centers(const Scene& scene)
{
    const auto& bank = scene.bank;
    std::vector<Vec3d> out(bank.size());
    parallel_for(bank.size(), [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const size_t k = static_cast<size_t>(bank.primitive[i]);
            out[i] = rotate(scene.canonical.rotation[k], hadamard(scene.canonical.scale[k], bank.position(i))) +
                     scene.canonical.position[k];
        }
    });
    return out;
}

double rest_shell_sdf(const Scene& scene, const Vec3d& p)
{
    return body::body_shell_sdf(scene.body, transforms_for(scene, rest_params(scene)), p);
}

fields::PretrainReport pretrain_scene(Scene& scene, const fields::PretrainOptions& options)
{
    const auto transforms = transforms_for(scene, rest_params(scene));
    const auto points = canonical_centers(scene);
    return fields::pretrain_fields(scene.attributes, scene.sdf, points,
                                   [&](const Vec3d& p) { return body::body_shell_sdf(scene.body, transforms, p); },
                                   options);
}

namespace {

void check_finite(const Eigen::MatrixXd& m, const char* what)
{
    if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite field output");
}

LocalAttributes decode_attributes(const Scene& scene, const Eigen::MatrixXd& raw, const Eigen::MatrixXd& sdf)
{
    const auto& bank = scene.bank;
    const size_t n = bank.size();
    LocalAttributes a;
    a.rotation.resize(n);
    a.scale.resize(n);
    a.world_scale.resize(n);
    a.sh.resize(n * soup::kShCoeffs);
    a.opacity.resize(n);
    parallel_for(n, [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const auto d = fields::AttributeField::decode(raw.col(static_cast<Eigen::Index>(i)).data());
            const size_t k = static_cast<size_t>(bank.primitive[i]);
            a.rotation[i] = d.rotation;
            a.world_scale[i] = d.scale;
            a.scale[i] = divide(d.scale, scene.canonical.scale[k]);
            std::copy(d.sh.begin(), d.sh.end(), a.sh.begin() + static_cast<std::ptrdiff_t>(i * soup::kShCoeffs));
            a.opacity[i] = fields::opacity(scene.kernel, sdf(0, static_cast<Eigen::Index>(i)));
        }
    });
    return a;
}

} // namespace

LocalAttributes local_attributes(const Scene& scene)
{
    const auto& bank = scene.bank;
    const size_t n = bank.size();
    if (!bank.baked) {
        const auto centers = canonical_centers(scene);
        const auto fa = scene.attributes.forward(centers, false);
        const auto fs = scene.sdf.forward(centers, false);
        check_finite(fa.out, "attribute field");
        check_finite(fs.out, "sdf field");
        return decode_attributes(scene, fa.out, fs.out);
    }
    LocalAttributes a;
    a.rotation.resize(n);
    a.scale.resize(n);
    a.world_scale.resize(n);
    a.sh = bank.sh;
    a.opacity = bank.opacity;
    for (size_t i = 0; i < n; ++i) {
        a.rotation[i] = bank.rotation(i);
        a.scale[i] = bank.scale(i);
        a.world_scale[i] = hadamard(a.scale[i], scene.canonical.scale[static_cast<size_t>(bank.primitive[i])]);
    }
    return a;
}

void bake_attributes(Scene& scene)
{
    auto& bank = scene.bank;
    bank.baked = false;
    const auto a = local_attributes(scene);
    for (size_t i = 0; i < bank.size(); ++i) {
        const Quatd& r = a.rotation[i];
        bank.rotations[4 * i] = r.w;
        bank.rotations[4 * i + 1] = r.x;
        bank.rotations[4 * i + 2] = r.y;
        bank.rotations[4 * i + 3] = r.z;
        for (int c = 0; c < 3; ++c) bank.scales[3 * i + c] = a.scale[i][c];
    }
    bank.sh = a.sh;
    bank.opacity = a.opacity;
    bank.baked = true;
}

rig::Primitives posed_primitives(const Scene& scene, const body::BodyParams& params, FrameTiming* timing)
{
    params.validate(scene.body.skeleton.size());
    auto t0 = Clock::now();
    const auto transforms = transforms_for(scene, params);
    if (timing) timing->lbs_ms += ms_since(t0);
    t0 = Clock::now();
    const auto frames = body::posed_anchor_frames<double>(scene.body.mesh, scene.anchors, transforms);
    const Eigen::VectorXd raw = scene.nets.forward(params.pose);
    auto prims = rig::compose(frames, raw.data());
    if (timing) timing->primitives_ms += ms_since(t0);
    return prims;
}

render::GaussianCloud world_cloud(const rig::Primitives& prims, const soup::GaussianBank& bank,
                                  const LocalAttributes& attrs)
{
    const size_t n = bank.size();
    if (attrs.size() != n) throw ParameterError("world_cloud: attribute count mismatch");
    render::GaussianCloud c;
    c.sh_coeffs = 16;
    c.position.resize(n);
    c.rotation.resize(n);
    c.scale.resize(n);
    c.sh = attrs.sh;
    c.opacity = attrs.opacity;
    parallel_for(n, [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const size_t k = static_cast<size_t>(bank.primitive[i]);
            const auto w = soup::to_world({bank.position(i), attrs.rotation[i], attrs.scale[i]}, prims.position[k],
                                          prims.rotation[k], prims.scale[k]);
            c.position[i] = w.position;
            c.rotation[i] = w.rotation;
            c.scale[i] = w.scale;
        }
    });
    return c;
}

render::RenderTarget render_frame(const Scene& scene, const body::BodyParams& params, const render::Camera& cam,
                                  const std::array<double, 3>& background, FrameTiming* timing)
{
    const auto prims = posed_primitives(scene, params, timing);
    auto t0 = Clock::now();
    const auto cloud = world_cloud(prims, scene.bank, local_attributes(scene));
    if (timing) timing->transform_ms += ms_since(t0);
    t0 = Clock::now();
    auto out = render::render(cloud, cam, background);
    if (timing) timing->raster_ms += ms_since(t0);
    return std::move(out.target);
}

namespace {

void truncate_sh(const std::vector<double>& sh48, int coeffs, std::vector<double>& out)
{
    const size_t n = sh48.size() / 48;
    out.resize(n * 3 * static_cast<size_t>(coeffs));
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < coeffs; ++k)
                out[(i * 3 + static_cast<size_t>(c)) * static_cast<size_t>(coeffs) + static_cast<size_t>(k)] =
                    sh48[i * 48 + static_cast<size_t>(c) * 16 + static_cast<size_t>(k)];
}

} // namespace

Playback::Playback(const Scene& scene, int sh_coeffs) : scene_(&scene)
{
    if (sh_coeffs != 1 && sh_coeffs != 4 && sh_coeffs != 9 && sh_coeffs != 16)
        throw ParameterError("playback: SH coefficient count must be 1, 4, 9 or 16");
    const auto attrs = local_attributes(scene);
    const auto& bank = scene.bank;
    primitive_ = bank.primitive;
    local_position_.resize(bank.size());
    for (size_t i = 0; i < bank.size(); ++i) local_position_[i] = bank.position(i);
    local_rotation_ = attrs.rotation;
    local_scale_ = attrs.scale;
    cloud_.sh_coeffs = sh_coeffs;
    if (sh_coeffs == 16) cloud_.sh = attrs.sh;
    else truncate_sh(attrs.sh, sh_coeffs, cloud_.sh);
    cloud_.opacity = attrs.opacity;
    cloud_.position.resize(size());
    cloud_.rotation.resize(size());
    cloud_.scale.resize(size());
}

Playback Playback::resampled(const Scene& scene, size_t n, uint64_t seed, int sh_coeffs)
{
    Playback src(scene, sh_coeffs);
    const auto& bank = scene.bank;
    const size_t k = bank.primitive_count();
    if (n < k) throw ParameterError("playback: need at least one Gaussian per primitive");
    const size_t nc = 3 * static_cast<size_t>(sh_coeffs);
    Playback p(scene, Empty{});
    p.primitive_.resize(n);
    p.local_position_.resize(n);
    p.local_rotation_.resize(n);
    p.local_scale_.resize(n);
    p.cloud_.sh_coeffs = sh_coeffs;
    p.cloud_.sh.resize(n * nc);
    p.cloud_.opacity.resize(n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    size_t out = 0;
    for (size_t q = 0; q < k; ++q) {
        const size_t count = n / k + (q < n % k ? 1 : 0);
        const size_t first = bank.offsets[q], have = bank.count(q);
        for (size_t j = 0; j < count; ++j, ++out) {
            const size_t s = first + j % have;
            p.primitive_[out] = static_cast<int32_t>(q);
            p.local_position_[out] = {u(rng), u(rng), u(rng)};
            p.local_rotation_[out] = src.local_rotation_[s];
            p.local_scale_[out] = src.local_scale_[s];
            std::copy_n(src.cloud_.sh.begin() + static_cast<std::ptrdiff_t>(s * nc), nc,
                        p.cloud_.sh.begin() + static_cast<std::ptrdiff_t>(out * nc));
            p.cloud_.opacity[out] = src.cloud_.opacity[s];
        }
    }
    p.cloud_.position.resize(n);
    p.cloud_.rotation.resize(n);
    p.cloud_.scale.resize(n);
    return p;
}

render::RenderTarget Playback::render(const body::BodyParams& params, const render::Camera& cam,
                                      const std::array<double, 3>& background, FrameTiming* timing)
{
    const auto prims = posed_primitives(*scene_, params, timing);
    auto t0 = Clock::now();
    parallel_for(size(), [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const size_t k = static_cast<size_t>(primitive_[i]);
            const auto w = soup::to_world({local_position_[i], local_rotation_[i], local_scale_[i]},
                                          prims.position[k], prims.rotation[k], prims.scale[k]);
            cloud_.position[i] = w.position;
            cloud_.rotation[i] = w.rotation;
            cloud_.scale[i] = w.scale;
        }
    });
    if (timing) timing->transform_ms += ms_since(t0);
    t0 = Clock::now();
    auto out = render::render(cloud_, cam, background);
    if (timing) timing->raster_ms += ms_since(t0);
    return std::move(out.target);
}

SceneGrad SceneGrad::like(const Scene& scene)
{
    SceneGrad g;
    g.positions.assign(scene.bank.positions.size(), 0.0);
    g.attributes = scene.attributes.make_grad();
    g.sdf = scene.sdf.make_grad();
    g.kernel.assign(2, 0.0);
    g.nets.assign(scene.nets.mlp.params().size(), 0.0);
    g.shape.assign(scene.natural.shape.size(), 0.0);
    g.pose.assign(3 * scene.natural.pose.size(), 0.0);
    g.screen_grad.assign(scene.bank.size(), 0.0);
    g.visible.assign(scene.bank.size(), 0);
    return g;
}

void SceneGrad::zero()
{
    std::fill(positions.begin(), positions.end(), 0.0);
    attributes.zero();
    sdf.zero();
    std::fill(kernel.begin(), kernel.end(), 0.0);
    std::fill(nets.begin(), nets.end(), 0.0);
    std::fill(shape.begin(), shape.end(), 0.0);
    std::fill(pose.begin(), pose.end(), 0.0);
    std::fill(screen_grad.begin(), screen_grad.end(), 0.0);
    std::fill(visible.begin(), visible.end(), 0);
}

ScenePass::ScenePass(const Scene& scene, const body::BodyParams& params)
    : scene_(&scene), rig_(scene.body, scene.anchors, scene.nets, params)
{
    if (scene.bank.baked) {
        attrs_ = local_attributes(scene);
    } else {
        centers_ = canonical_centers(scene);
        attr_fwd_ = scene.attributes.forward(centers_, true);
        sdf_fwd_ = scene.sdf.forward(centers_, true);
        check_finite(attr_fwd_->out, "attribute field");
        check_finite(sdf_fwd_->out, "sdf field");
        attrs_ = decode_attributes(scene, attr_fwd_->out, sdf_fwd_->out);
    }
    cloud_ = world_cloud(rig_.primitives(), scene.bank, attrs_);
}

void ScenePass::backward(const render::CloudGrad& dcloud, SceneGrad& grad, bool natural_pose)
{
    const Scene& s = *scene_;
    const auto& bank = s.bank;
    const auto& prims = rig_.primitives();
    const size_t n = bank.size();
    const size_t k = prims.size();
    if (dcloud.position.size() != n) throw ParameterError("scene backward: gradient size mismatch");
    if (grad.positions.size() != 3 * n) throw ParameterError("scene backward: stale gradient buffers");

    rig::PrimitiveGrad pg(k);
    std::vector<Vec3d> dlocal_scale(n);
    std::vector<Quatd> dlocal_rot(n);
    parallel_for(k, [&](size_t kb, size_t ke, size_t) {
        for (size_t kk = kb; kk < ke; ++kk)
            for (size_t i = bank.offsets[kk]; i < bank.offsets[kk + 1]; ++i) {
                soup::LocalGaussianGrad dl;
                const soup::WorldGaussian dw{dcloud.position[i], dcloud.rotation[i], dcloud.scale[i]};
                soup::to_world_backward({bank.position(i), attrs_.rotation[i], attrs_.scale[i]}, prims.position[kk],
                                        prims.rotation[kk], prims.scale[kk], dw, dl, pg.position[kk],
                                        pg.rotation[kk], pg.scale[kk]);
                for (int a = 0; a < 3; ++a) grad.positions[3 * i + a] += dl.position[a];
                dlocal_scale[i] = dl.scale;
                dlocal_rot[i] = dl.rotation;
            }
    });
    for (size_t i = 0; i < n; ++i) {
        grad.screen_grad[i] += dcloud.screen_grad[i];
        if (dcloud.screen_grad[i] > 0.0) grad.visible[i] = 1;
    }

    if (!bank.baked) {
        Eigen::MatrixXd draw = Eigen::MatrixXd::Zero(fields::AttributeField::kOutputs, static_cast<Eigen::Index>(n));
        Eigen::MatrixXd dsdf = Eigen::MatrixXd::Zero(1, static_cast<Eigen::Index>(n));
        std::vector<double> dkernel(2 * n, 0.0);
        parallel_for(n, [&](size_t b, size_t e, size_t) {
            for (size_t i = b; i < e; ++i) {
                const auto col = static_cast<Eigen::Index>(i);
                const size_t kk = static_cast<size_t>(bank.primitive[i]);
                const Vec3d dworld = divide(dlocal_scale[i], s.canonical.scale[kk]);
                fields::AttributeField::decode_backward(attr_fwd_->out.col(col).data(), dworld, dlocal_rot[i],
                                                        dcloud.sh.data() + i * soup::kShCoeffs,
                                                        draw.col(col).data());
                const double x = sdf_fwd_->out(0, col);
                if (s.kernel.value(x) < 1.0) {
                    const auto kg = s.kernel.grad(x);
                    const double dop = dcloud.opacity[i];
                    dsdf(0, col) = kg[0] * dop;
                    dkernel[2 * i] = kg[1] * dop;
                    dkernel[2 * i + 1] = kg[2] * dop;
                }
            }
        });
        for (size_t i = 0; i < n; ++i) {
            grad.kernel[0] += dkernel[2 * i];
            grad.kernel[1] += dkernel[2 * i + 1];
        }
        std::vector<Vec3d> dp(n), dps(n);
        s.attributes.backward(*attr_fwd_, draw, grad.attributes, dp);
        s.sdf.backward(*sdf_fwd_, dsdf, grad.sdf, dps);
        for (size_t i = 0; i < n; ++i) {
            const size_t kk = static_cast<size_t>(bank.primitive[i]);
            const Vec3d local = quat_to_mat(s.canonical.rotation[kk]).transposed() * (dp[i] + dps[i]);
            const Vec3d d = hadamard(s.canonical.scale[kk], local);
            for (int a = 0; a < 3; ++a) grad.positions[3 * i + a] += d[a];
        }
    }

    std::vector<Vec3d> dpose(s.body.skeleton.size());
    rig_.backward(pg, grad.nets, dpose, grad.shape);
    if (natural_pose)
        for (size_t j = 0; j < dpose.size(); ++j)
            for (int a = 0; a < 3; ++a) grad.pose[3 * j + a] += dpose[j][a];
}

void extract_mesh(const Scene& scene, MeshState& state)
{
    state.extraction = mesh::marching_tets(scene.sdf, state.grid);
    const auto rest = body::skin_mesh(scene.body.mesh, scene.body.skeleton, rest_params(scene));
    const PointBins bins(rest.vertices, 0.05);
    const auto& verts = state.extraction.mesh.vertices;
    state.binding.resize(verts.size());
    parallel_for(verts.size(), [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) state.binding[i] = bins.nearest(verts[i]);
    });
}

MeshState extract_mesh(const Scene& scene, int resolution)
{
    MeshState st;
    st.grid = mesh::TetGrid::make(resolution, scene.sdf.grid.config().box_min, scene.sdf.grid.config().box_max);
    extract_mesh(scene, st);
    return st;
}

void refresh_mesh(const Scene& scene, MeshState& state)
{
    if (!state.empty()) mesh::refresh(state.extraction, scene.sdf, state.grid);
}

MeshPosing mesh_posing(const Scene& scene, const MeshState& state, const body::BodyParams& params)
{
    const auto t_pose = transforms_for(scene, params);
    const auto t_rest = transforms_for(scene, rest_params(scene));
    const auto& m = scene.body.mesh;
    auto blend = [&](const std::vector<body::RigidTransform<double>>& t, uint32_t v, Eigen::Matrix3d& l,
                     Eigen::Vector3d& o) {
        l.setZero();
        o.setZero();
        for (int a = 0; a < 4; ++a) {
            const double w = m.skin_weights[v][a];
            if (w == 0.0) continue;
            const auto& tj = t[static_cast<size_t>(m.skin_joints[v][a])];
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) l(r, c) += w * tj.rotation(r, c);
                o(r) += w * tj.translation[r];
            }
        }
    };
    std::unordered_map<uint32_t, std::pair<Mat3d, Vec3d>> cache;
    MeshPosing p;
    p.linear.resize(state.binding.size());
    p.offset.resize(state.binding.size());
    for (size_t i = 0; i < state.binding.size(); ++i) {
        const uint32_t v = state.binding[i];
        auto it = cache.find(v);
        if (it == cache.end()) {
            Eigen::Matrix3d lp, lr;
            Eigen::Vector3d op, orr;
            blend(t_pose, v, lp, op);
            blend(t_rest, v, lr, orr);
            const Eigen::Matrix3d l = lp * lr.inverse();
            const Eigen::Vector3d o = op - l * orr;
            Mat3d lm;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) lm(r, c) = l(r, c);
            it = cache.emplace(v, std::make_pair(lm, Vec3d{o(0), o(1), o(2)})).first;
        }
        p.linear[i] = it->second.first;
        p.offset[i] = it->second.second;
    }
    return p;
}

mesh::TriMesh pose_mesh(const mesh::TriMesh& canonical, const MeshPosing& posing)
{
    if (posing.linear.size() != canonical.vertices.size()) throw ParameterError("pose_mesh: binding size mismatch");
    mesh::TriMesh out;
    out.triangles = canonical.triangles;
    out.colors = canonical.colors;
    out.uv = canonical.uv;
    out.atlas = canonical.atlas;
    out.vertices.resize(canonical.vertices.size());
    for (size_t i = 0; i < canonical.vertices.size(); ++i)
        out.vertices[i] = posing.linear[i] * canonical.vertices[i] + posing.offset[i];
    out.compute_normals();
    return out;
}

void mesh_posing_backward(const Scene& scene, const MeshState& state, const body::BodyParams& params,
                          std::span<const Vec3d> dposed, std::span<Vec3d> dpose, std::span<double> dshape)
{
    const auto& m = scene.body.mesh;
    const auto& verts = state.extraction.mesh.vertices;
    const size_t J = scene.body.skeleton.size();
    if (dposed.size() != verts.size() || state.binding.size() != verts.size())
        throw ParameterError("mesh_posing_backward: vertex count mismatch");
    if (dpose.size() != J || dshape.size() != params.shape.size())
        throw ParameterError("mesh_posing_backward: parameter size mismatch");

    // x' = sum_a w_a (R_j xr + t_j) with xr the vertex pulled back to the
    // template rest frame.
    const auto t_rest = transforms_for(scene, rest_params(scene));
    std::unordered_map<uint32_t, std::pair<Eigen::Matrix3d, Eigen::Vector3d>> pull;
    std::vector<Eigen::Matrix3d> dR(J, Eigen::Matrix3d::Zero());
    std::vector<Eigen::Vector3d> dt(J, Eigen::Vector3d::Zero());
    for (size_t i = 0; i < verts.size(); ++i) {
        const uint32_t v = state.binding[i];
        auto it = pull.find(v);
        if (it == pull.end()) {
            Eigen::Matrix3d l = Eigen::Matrix3d::Zero();
            Eigen::Vector3d o = Eigen::Vector3d::Zero();
            for (int a = 0; a < 4; ++a) {
                const double w = m.skin_weights[v][a];
                if (w == 0.0) continue;
                const auto& tj = t_rest[static_cast<size_t>(m.skin_joints[v][a])];
                for (int r = 0; r < 3; ++r) {
                    for (int c = 0; c < 3; ++c) l(r, c) += w * tj.rotation(r, c);
                    o(r) += w * tj.translation[r];
                }
            }
            it = pull.emplace(v, std::make_pair(Eigen::Matrix3d(l.inverse()), o)).first;
        }
        const Eigen::Vector3d x(verts[i].x, verts[i].y, verts[i].z);
        const Eigen::Vector3d xr = it->second.first * (x - it->second.second);
        const Eigen::Vector3d g(dposed[i].x, dposed[i].y, dposed[i].z);
        for (int a = 0; a < 4; ++a) {
            const double w = m.skin_weights[v][a];
            if (w == 0.0) continue;
            const auto j = static_cast<size_t>(m.skin_joints[v][a]);
            dR[j] += w * g * xr.transpose();
            dt[j] += w * g;
        }
    }

    ad::Tape tape;
    ad::TapeScope scope(tape);
    std::vector<Vec3<ad::Var>> pose;
    std::vector<ad::Var> shape;
    for (const auto& p : params.pose) pose.push_back({ad::Var::leaf(p.x), ad::Var::leaf(p.y), ad::Var::leaf(p.z)});
    for (double b : params.shape) shape.push_back(ad::Var::leaf(b));
    const auto t = body::skinning_transforms<ad::Var>(scene.body.skeleton, pose, shape);
    for (size_t j = 0; j < J; ++j)
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) tape.seed(t[j].rotation(r, c).id, dR[j](r, c));
            tape.seed(t[j].translation[r].id, dt[j](r));
        }
    tape.propagate();
    for (size_t j = 0; j < J; ++j)
        for (int a = 0; a < 3; ++a) dpose[j][a] += tape.adjoint(pose[j][a].id);
    for (size_t b = 0; b < shape.size(); ++b) dshape[b] += tape.adjoint(shape[b].id);
}

} // namespace gavatar::scene
