#include "gavatar/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "gavatar/errors.hpp"

namespace gavatar::optim {

double total_loss(const LossWeights& weights, const LossParts& parts)
{
    const auto w = weights.values();
    const auto v = parts.values();
    double total = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) throw NumericError("loss term '" + std::string(kTermNames[i]) + "' is not finite");
        total += w[i] * v[i];
    }
    return total;
}

std::string_view camera_mode_name(CameraMode mode)
{
    switch (mode) {
    case CameraMode::FullBody: return "full_body";
    case CameraMode::Face: return "face";
    case CameraMode::BackHead: return "back_head";
    case CameraMode::Arms: return "arms";
    case CameraMode::UpperBody: return "upper_body";
    case CameraMode::LowerBody: return "lower_body";
    }
    return "unknown";
}

CameraSampler CameraSampler::for_body(const body::BodyModel& body, const body::BodyParams& params, int width,
                                      int height)
{
    CameraSampler s;
    s.width = width;
    s.height = height;
    const auto joints = body::joint_positions(body.skeleton, params);
    auto joint = [&](const std::string& name) {
        for (size_t j = 0; j < body.skeleton.size(); ++j)
            if (body.skeleton.joints[j].name == name) return joints[j];
        throw ParameterError("camera sampler: skeleton has no joint '" + name + "'");
    };
    const auto posed = body::skin_mesh(body.mesh, body.skeleton, params);
    Vec3d lo = posed.vertices.front(), hi = lo;
    for (const auto& v : posed.vertices)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], v[a]);
            hi[a] = std::max(hi[a], v[a]);
        }
    s.center = (lo + hi) * 0.5;

    const Vec3d head = joint("head") + Vec3d{0.0, 0.11, 0.0};
    auto& p = s.presets;
    p[static_cast<int>(CameraMode::Face)] = {{head}, 0.7, -60.0, 60.0};
    p[static_cast<int>(CameraMode::BackHead)] = {{head}, 0.7, 120.0, 240.0};
    p[static_cast<int>(CameraMode::Arms)] = {{joint("left_elbow"), joint("right_elbow")}, 1.3, 0.0, 360.0};
    p[static_cast<int>(CameraMode::UpperBody)] = {{joint("spine3")}, 1.8, 0.0, 360.0};
    p[static_cast<int>(CameraMode::LowerBody)] = {{(joint("left_knee") + joint("right_knee")) * 0.5}, 1.8, 0.0, 360.0};
    return s;
}

void CameraSampler::set_ranges(const CameraRanges& r)
{
    radius = r.radius;
    elevation_min = r.elevation_min;
    elevation_max = r.elevation_max;
    fovy_min = r.fovy_min;
    fovy_max = r.fovy_max;
    azimuth_min = r.azimuth_min;
    azimuth_max = r.azimuth_max;
}

CameraMode CameraSampler::sample_mode(std::mt19937_64& rng, bool zoom_in) const
{
    if (!zoom_in) return CameraMode::FullBody;
    return static_cast<CameraMode>(std::uniform_int_distribution<int>(0, kCameraModes - 1)(rng));
}

CameraSample CameraSampler::sample(std::mt19937_64& rng, CameraMode mode) const
{
    using U = std::uniform_real_distribution<double>;
    CameraSample c;
    c.mode = mode;
    double az_lo = azimuth_min, az_hi = azimuth_max;
    if (mode == CameraMode::FullBody) {
        c.target = center;
        c.radius = radius;
    } else {
        const auto& pr = presets[static_cast<size_t>(mode)];
        if (pr.targets.empty()) throw ParameterError("camera sampler: preset has no target");
        const size_t pick =
            pr.targets.size() == 1 ? 0 : std::uniform_int_distribution<size_t>(0, pr.targets.size() - 1)(rng);
        c.target = pr.targets[pick];
        c.radius = pr.radius;
        az_lo = pr.azimuth_min;
        az_hi = pr.azimuth_max;
    }
    c.azimuth = U(az_lo, az_hi)(rng);
    c.elevation = U(elevation_min, elevation_max)(rng);
    c.fovy = U(fovy_min, fovy_max)(rng);
    const double az = deg2rad(c.azimuth), el = deg2rad(c.elevation);
    const Vec3d dir{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
    c.camera = render::Camera::look_at(c.target + dir * c.radius, c.target, {0.0, 1.0, 0.0}, deg2rad(c.fovy), width,
                                       height);
    return c;
}

PoseSampler::Choice PoseSampler::choose(int64_t iteration, int64_t natural_only, std::mt19937_64& rng) const
{
    Choice c;
    if (iteration < natural_only || animation_.empty() || iteration % 2 == 0) return c;
    c.natural = false;
    c.index = static_cast<int>(std::uniform_int_distribution<size_t>(0, animation_.size() - 1)(rng));
    return c;
}

body::BodyParams PoseSampler::params(const Choice& choice, const body::BodyParams& natural) const
{
    if (choice.natural) return natural;
    body::BodyParams p = animation_.at(static_cast<size_t>(choice.index));
    p.shape = natural.shape;
    return p;
}

void TrainConfig::validate() const
{
    if (iterations < 0) throw ParameterError("config: iterations must be >= 0");
    if (natural_only < 0 || natural_only > iterations) throw ParameterError("config: natural_only must lie in [0, iterations]");
    if (zoom_in_start < 0 || zoom_in_start > iterations) throw ParameterError("config: zoom_in_start must lie in [0, iterations]");
    if (densify_interval < 1) throw ParameterError("config: densify_interval must be positive");
    if (mesh_interval < 1 || mesh_resolution < 2) throw ParameterError("config: mesh interval/resolution");
    for (double w : weights.values())
        if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("config: loss weights must be finite and >= 0");
    for (double r : {lr.positions, lr.attributes, lr.sdf, lr.kernel, lr.correctives, lr.shape, lr.natural_pose})
        if (!(r >= 0.0) || !std::isfinite(r)) throw ParameterError("config: learning rates must be finite and >= 0");
    if (width < 1 || height < 1) throw ParameterError("config: render size must be positive");
    if (eikonal_centers < 0 || eikonal_perturbed < 0 || !(eikonal_std > 0.0))
        throw ParameterError("config: eikonal sampling");
    if (!(t_min > 0.0 && t_min <= t_max && t_max < 1.0 && t_max_final >= t_min && t_max_final < 1.0))
        throw ParameterError("config: noise range must satisfy 0 < t_min <= t_max < 1");
    if (!(divergence_threshold > 0.0)) throw ParameterError("config: divergence threshold must be positive");
    if (snapshot_interval < 1) throw ParameterError("config: snapshot_interval must be positive");
    if (gaussian_cap < 1) throw ParameterError("config: gaussian cap must be positive");
    const auto& c = camera;
    if (!(c.radius > 0.0) || !(c.elevation_min <= c.elevation_max) || c.elevation_min < -90.0 ||
        c.elevation_max > 90.0 || !(c.fovy_min > 0.0 && c.fovy_min <= c.fovy_max && c.fovy_max < 180.0) ||
        !(c.azimuth_min <= c.azimuth_max))
        throw ParameterError("config: camera ranges");
}

namespace {

double surrogate(const Image& grad, const Image& image)
{
    double s = 0.0;
    for (size_t i = 0; i < grad.size(); ++i) s += grad.data[i] * image.data[i];
    return s;
}

Image scaled(const Image& img, double w)
{
    Image out = img;
    for (auto& v : out.data) v *= w;
    return out;
}

} // namespace

Evaluation evaluate(const scene::Scene& scene, const StepSample& sample, guidance::Guidance& guidance,
                    const LossWeights& weights, scene::MeshState* mesh, std::span<const Vec3d> eikonal_points,
                    scene::SceneGrad* grad)
{
    const auto& cam = sample.camera;
    scene::ScenePass pass(scene, sample.params);
    auto out = render::render(pass.cloud(), cam, sample.background);

    Evaluation ev;
    guidance::GuidanceContext ctx = sample.context;
    ctx.kind = guidance::Channel::Rgb;
    const Image g = guidance.gradient(out.target.rgb, ctx);
    if (const auto l = guidance.last_loss()) {
        ev.parts.sds = *l;
        ev.photometric_mse = *l;
    } else {
        ev.parts.sds = surrogate(g, out.target.rgb);
    }

    std::vector<double> dpos(grad && weights.pos > 0.0 ? scene.bank.positions.size() : 0);
    ev.parts.pos = soup::local_position_loss(scene.bank, dpos);

    if (!eikonal_points.empty())
        ev.parts.eik = fields::sdf_eikonal(scene.sdf, eikonal_points, grad && weights.eik > 0.0 ? &grad->sdf : nullptr,
                                           1e-3, weights.eik);

    Image dalpha;
    const bool mesh_terms = weights.alpha > 0.0 || weights.nsds > 0.0 || weights.nc > 0.0;
    if (mesh && mesh_terms) {
        scene::refresh_mesh(scene, *mesh);
        const int w = cam.width, h = cam.height;
        if (mesh->empty()) {
            const auto al = mesh::alpha_loss(Image(w, h, 1), out.target.alpha);
            ev.parts.alpha = al.value;
            if (grad && weights.alpha > 0.0) dalpha = scaled(al.dalpha, weights.alpha);
        } else {
            const auto posing = scene::mesh_posing(scene, *mesh, sample.params);
            const auto posed = scene::pose_mesh(mesh->extraction.mesh, posing);
            const auto mr = mesh::rasterize_mesh(posed, cam, sample.background);
            const auto al = mesh::alpha_loss(mr.mask, out.target.alpha);
            ev.parts.alpha = al.value;

            Image dnormal;
            if (weights.nsds > 0.0) {
                guidance::GuidanceContext nctx = sample.context;
                nctx.kind = guidance::Channel::Normal;
                nctx.seed = sample.context.seed ^ 0x9e3779b97f4a7c15ull;
                const Image gn = guidance.gradient(mr.normal, nctx);
                const auto l = guidance.last_loss();
                ev.parts.nsds = l ? *l : surrogate(gn, mr.normal);
                if (grad) dnormal = scaled(gn, weights.nsds);
            }
            std::vector<Vec3d> dnc(grad && weights.nc > 0.0 ? posed.vertices.size() : 0);
            ev.parts.nc = mesh::normal_consistency_loss(posed, dnc);

            if (grad) {
                Image dmask;
                if (weights.alpha > 0.0) {
                    dmask = scaled(al.dmask, weights.alpha);
                    dalpha = scaled(al.dalpha, weights.alpha);
                }
                auto dverts = mesh::rasterize_mesh_backward(posed, cam, mr, dnormal, dmask);
                for (size_t i = 0; i < dnc.size(); ++i) dverts[i] += dnc[i] * weights.nc;
                std::vector<Vec3d> dpose(scene.body.skeleton.size());
                scene::mesh_posing_backward(scene, *mesh, sample.params, dverts, dpose, grad->shape);
                if (sample.natural)
                    for (size_t j = 0; j < dpose.size(); ++j)
                        for (int a = 0; a < 3; ++a) grad->pose[3 * j + a] += dpose[j][a];
                std::vector<Vec3d> dcanon(dverts.size());
                for (size_t i = 0; i < dverts.size(); ++i) dcanon[i] = posing.linear[i].transposed() * dverts[i];
                mesh::extraction_backward(scene.sdf, mesh->grid, mesh->extraction, dcanon, grad->sdf);
            }
        }
    }

    ev.total = total_loss(weights, ev.parts);

    if (grad) {
        for (size_t i = 0; i < dpos.size(); ++i) grad->positions[i] += weights.pos * dpos[i];
        const Image drgb = scaled(g, weights.sds);
        const auto cg = render::render_backward(pass.cloud(), cam, out, drgb, dalpha);
        pass.backward(cg, *grad, sample.natural);
    }
    ev.render = std::move(out.target);
    return ev;
}

std::string metrics_line(const StepRecord& r, const LossWeights& weights, bool timing)
{
    nlohmann::ordered_json j;
    j["iter"] = r.iteration;
    nlohmann::ordered_json loss, w;
    const auto v = r.parts.values();
    const auto wv = weights.values();
    for (size_t i = 0; i < v.size(); ++i) {
        loss[std::string(kTermNames[i])] = v[i];
        w[std::string(kTermNames[i])] = wv[i];
    }
    loss["total"] = r.total;
    j["loss"] = loss;
    j["weights"] = w;
    j["gaussians"] = r.gaussians;
    j["pose"] = r.natural_pose ? "natural" : "animation";
    j["camera"] = std::string(camera_mode_name(r.mode));
    if (r.view >= 0) j["view"] = r.view;
    j["densify"] = r.densify_tick;
    j["skipped"] = r.skipped;
    if (r.psnr) j["psnr"] = *r.psnr;
    if (timing) j["ms"] = r.ms;
    return j.dump();
}

Trainer::Trainer(scene::Scene& scene, guidance::Guidance& guidance, TrainConfig config, TrainInputs inputs)
    : scene_(scene), guidance_(guidance), config_(std::move(config)), inputs_(std::move(inputs)),
      poses_(inputs_.animation), rng_(config_.seed)
{
    config_.validate();
    scene_.validate();
    if (scene_.bank.baked) throw ParameterError("trainer: the bank is baked; training needs field-backed attributes");
    for (const auto& p : inputs_.animation) p.validate(scene_.body.skeleton.size());
    for (const auto& c : inputs_.views) c.validate();
    cameras_ = CameraSampler::for_body(scene_.body, scene_.natural, config_.width, config_.height);
    cameras_.set_ranges(config_.camera);

    sync_from_scene();
    grad_ = scene::SceneGrad::like(scene_);
    const auto& lr = config_.lr;
    adam_.add_group("positions", lr.positions, {{&scene_.bank.positions, &grad_.positions}});
    adam_.add_group("attributes", lr.attributes,
                    {{&scene_.attributes.grid.params(), &grad_.attributes.grid},
                     {&scene_.attributes.mlp.params(), &grad_.attributes.mlp}});
    adam_.add_group("sdf", lr.sdf,
                    {{&scene_.sdf.grid.params(), &grad_.sdf.grid}, {&scene_.sdf.mlp.params(), &grad_.sdf.mlp}});
    adam_.add_group("kernel", lr.kernel, {{&kernel_params_, &grad_.kernel}});
    adam_.add_group("correctives", lr.correctives, {{&scene_.nets.mlp.params(), &grad_.nets}});
    adam_.add_group("shape", lr.shape, {{&scene_.natural.shape, &grad_.shape}});
    adam_.add_group("natural_pose", lr.natural_pose, {{&pose_params_, &grad_.pose}});

    grad_accum_.assign(scene_.bank.size(), 0.0);
    grad_count_.assign(scene_.bank.size(), 0);
    if (config_.mesh_terms())
        mesh_.grid = mesh::TetGrid::make(config_.mesh_resolution, scene_.sdf.grid.config().box_min,
                                         scene_.sdf.grid.config().box_max);
    snapshot_ = scene_;
}

void Trainer::sync_from_scene()
{
    kernel_params_ = {scene_.kernel.log_gamma, scene_.kernel.log_lambda};
    pose_params_.resize(3 * scene_.natural.pose.size());
    for (size_t j = 0; j < scene_.natural.pose.size(); ++j)
        for (int a = 0; a < 3; ++a) pose_params_[3 * j + a] = scene_.natural.pose[j][a];
}

void Trainer::sync_to_scene()
{
    scene_.kernel.log_gamma = kernel_params_[0];
    scene_.kernel.log_lambda = kernel_params_[1];
    for (size_t j = 0; j < scene_.natural.pose.size(); ++j)
        for (int a = 0; a < 3; ++a) scene_.natural.pose[j][a] = pose_params_[3 * j + a];
}

StepSample Trainer::sample(int64_t iteration)
{
    StepSample s;
    s.background = config_.background;
    const auto choice = poses_.choose(iteration, config_.natural_only, rng_);
    s.natural = choice.natural;
    s.params = poses_.params(choice, scene_.natural);
    if (!inputs_.views.empty()) {
        const auto v = std::uniform_int_distribution<size_t>(0, inputs_.views.size() - 1)(rng_);
        s.camera = inputs_.views[v];
        s.context.view = static_cast<int>(v);
    } else {
        s.mode = cameras_.sample_mode(rng_, iteration >= config_.zoom_in_start);
        s.camera = cameras_.sample(rng_, s.mode).camera;
    }
    auto& ctx = s.context;
    ctx.prompt = config_.prompt;
    ctx.t_min = config_.t_min;
    const double f = config_.iterations > 0 ? static_cast<double>(iteration) / config_.iterations : 0.0;
    ctx.t_max = std::max(config_.t_min, config_.t_max + (config_.t_max_final - config_.t_max) * f);
    ctx.seed = rng_();
    return s;
}

StepRecord Trainer::step()
{
    const auto t0 = std::chrono::steady_clock::now();
    const int64_t it = iteration_ + 1;
    auto abort = [&](const std::string& reason) -> TrainingAborted {
        scene_ = *snapshot_;
        return TrainingAborted(it, reason);
    };

    const StepSample s = sample(it);
    Evaluation ev;
    try {
        if (config_.mesh_terms() && (mesh_.extracted_at < 0 || (it - 1) % config_.mesh_interval == 0)) {
            scene::extract_mesh(scene_, mesh_);
            mesh_.extracted_at = it;
        }
        std::vector<Vec3d> eik;
        if (config_.eikonal_centers + config_.eikonal_perturbed > 0) {
            const auto centers = scene::canonical_centers(scene_);
            std::vector<Vec3d> picked;
            if (centers.size() <= static_cast<size_t>(config_.eikonal_centers)) {
                picked = centers;
            } else {
                std::uniform_int_distribution<size_t> u(0, centers.size() - 1);
                for (int i = 0; i < config_.eikonal_centers; ++i) picked.push_back(centers[u(rng_)]);
            }
            eik = mesh::eikonal_samples(picked, static_cast<size_t>(config_.eikonal_perturbed), config_.eikonal_std,
                                        rng_);
        }
        grad_.zero();
        ev = evaluate(scene_, s, guidance_, config_.weights, config_.mesh_terms() ? &mesh_ : nullptr, eik, &grad_);
    } catch (const NumericError& e) {
        throw abort(e.what());
    } catch (const TransientError& e) {
        throw abort(e.what());
    } catch (const GuidanceError& e) {
        throw abort(e.what());
    } catch (const ProtocolError& e) {
        throw abort(e.what());
    }
    if (!(ev.total <= config_.divergence_threshold)) throw abort("loss diverged (" + std::to_string(ev.total) + ")");

    for (size_t i = 0; i < grad_accum_.size(); ++i) {
        grad_accum_[i] += grad_.screen_grad[i];
        grad_count_[i] += grad_.visible[i];
    }
    adam_.step();
    sync_to_scene();

    StepRecord r;
    r.iteration = it;
    r.parts = ev.parts;
    r.total = ev.total;
    r.natural_pose = s.natural;
    r.mode = s.mode;
    r.view = s.context.view;
    if (ev.photometric_mse) r.psnr = *ev.photometric_mse > 0.0 ? -10.0 * std::log10(*ev.photometric_mse) : 99.0;

    const int64_t until = config_.densify_until < 0 ? config_.iterations : config_.densify_until;
    if (it % config_.densify_interval == 0 && it <= until) {
        r.densify_tick = true;
        densify_ticks_.push_back(it);
        densify();
    }
    r.gaussians = scene_.bank.size();
    r.skipped = adam_.skipped();
    iteration_ = it;
    if (it % config_.snapshot_interval == 0) snapshot_ = scene_;
    r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

void Trainer::densify()
{
    const size_t n = scene_.bank.size();
    if (!config_.densify.enabled || n > config_.gaussian_cap) {
        std::fill(grad_accum_.begin(), grad_accum_.end(), 0.0);
        std::fill(grad_count_.begin(), grad_count_.end(), 0u);
        return;
    }
    const auto attrs = scene::local_attributes(scene_);
    std::vector<double> mean(n), world(n);
    for (size_t i = 0; i < n; ++i) {
        mean[i] = grad_count_[i] ? grad_accum_[i] / grad_count_[i] : 0.0;
        const Vec3d& s = attrs.world_scale[i];
        world[i] = std::max({s.x, s.y, s.z});
    }
    auto cfg = config_.densify;
    cfg.cap = config_.gaussian_cap;
    auto res = soup::densify_prune(scene_.bank, mean, attrs.opacity, world, cfg, rng_);
    scene_.bank = std::move(res.bank);
    adam_.remap("positions", 0, res.source, 3);
    grad_ = scene::SceneGrad::like(scene_);
    grad_accum_.assign(scene_.bank.size(), 0.0);
    grad_count_.assign(scene_.bank.size(), 0);
}

std::vector<StepRecord> Trainer::run(std::ostream* metrics, const std::function<void(const StepRecord&)>& on_step)
{
    std::vector<StepRecord> records;
    while (iteration_ < config_.iterations) {
        records.push_back(step());
        if (metrics) (*metrics) << metrics_line(records.back(), config_.weights, config_.log_timing) << '\n';
        if (on_step) on_step(records.back());
    }
    if (metrics) metrics->flush();
    return records;
}

std::vector<StepRecord> train(scene::Scene& scene, guidance::Guidance& guidance, const TrainConfig& config,
                              TrainInputs inputs, std::ostream* metrics)
{
    Trainer t(scene, guidance, config, std::move(inputs));
    return t.run(metrics);
}

} // namespace gavatar::optim
