#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "gavatar/errors.hpp"
#include "gavatar/neural_fields.hpp"
#include "gavatar/optimizer.hpp"
#include "support/golden.hpp"
#include "support/synthetic.hpp"

using namespace gavatar;
using namespace gavatar::optim;

namespace {

std::vector<body::BodyParams> animation_bank(const scene::Scene& s, int count, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    std::vector<body::BodyParams> out;
    for (int i = 0; i < count; ++i) {
        auto p = s.rest;
        for (auto& r : p.pose) r += Vec3d{u(rng), u(rng), u(rng)};
        out.push_back(p);
    }
    return out;
}

// Wraps the pattern guidance and lets a test tamper with one iteration.
class ScriptedGuidance : public guidance::Guidance {
public:
    enum class Fault { None, HugeLoss, NanLoss, NanGradient, Throw };

    ScriptedGuidance(int w, int h) : inner_(fixture::pattern_guidance(w, h)) {}

    std::string name() const override { return "scripted"; }
    Image gradient(const Image& image, const guidance::GuidanceContext& ctx) override
    {
        Image g = inner_.gradient(image, ctx);
        loss_ = inner_.last_loss();
        if (ctx.kind == guidance::Channel::Rgb) ++calls_;
        if (calls_ != fault_at || ctx.kind != guidance::Channel::Rgb) return g;
        switch (fault) {
        case Fault::HugeLoss: loss_ = 1e9; break;
        case Fault::NanLoss: loss_ = std::nan(""); break;
        case Fault::NanGradient: g.data[0] = std::nan(""); break;
        case Fault::Throw: throw TransientError("guidance unreachable after 3 attempts");
        case Fault::None: break;
        }
        return g;
    }
    std::optional<double> last_loss() const override { return loss_; }

    Fault fault = Fault::None;
    int fault_at = -1;

private:
    guidance::PhotometricGuidance inner_;
    std::optional<double> loss_;
    int calls_ = 0;
};

TrainConfig fast_config()
{
    auto c = fixture::tiny_train_config();
    c.width = c.height = 24;
    c.weights.alpha = c.weights.nsds = c.weights.nc = 0.0;
    return c;
}

} // namespace

TEST(Config, DefaultsMatchTrainingSchedule)
{
    TrainConfig c;
    EXPECT_EQ(c.iterations, 20000);
    EXPECT_EQ(c.natural_only, 3000);
    EXPECT_EQ(c.zoom_in_start, 5000);
    EXPECT_EQ(c.densify_interval, 100);
    EXPECT_EQ(c.gaussian_cap, 2'000'000u);
    EXPECT_EQ(c.mesh_interval, 10);
    EXPECT_NO_THROW(c.validate());

    LearningRates lr;
    EXPECT_EQ(lr.positions, 0.00016);
    EXPECT_EQ(lr.attributes, 0.001);
    EXPECT_EQ(lr.sdf, 0.0001);
    EXPECT_EQ(lr.kernel, 0.001);
    EXPECT_EQ(lr.correctives, 0.0001);
    EXPECT_EQ(lr.shape, 0.0003);

    LossWeights w;
    const std::array<double, 6> expect{1.0, 0.1, 0.1, 1.0, 0.5, 0.01};
    EXPECT_EQ(w.values(), expect);

    CameraSampler cs;
    EXPECT_EQ(cs.radius, 3.5);
    EXPECT_EQ(cs.elevation_min, -10.0);
    EXPECT_EQ(cs.elevation_max, 45.0);
}

TEST(Config, DefaultSceneHas4096PrimitivesOf64)
{
    scene::SceneConfig c;
    auto s = scene::make_scene(c);
    EXPECT_EQ(s.primitive_count(), 4096u);
    EXPECT_EQ(s.bank.size(), 262144u);
    for (size_t k = 0; k < s.bank.primitive_count(); ++k) ASSERT_EQ(s.bank.count(k), 64u);
}

TEST(Config, RejectsBadValues)
{
    TrainConfig c;
    c.natural_only = c.iterations + 1;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.weights.nc = -1.0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.t_max = 1.0;
    EXPECT_THROW(c.validate(), ParameterError);
}

TEST(Trainer, AdamGroupsUseConfiguredRates)
{
    auto s = fixture::tiny_scene();
    auto g = fixture::pattern_guidance(24, 24);
    Trainer t(s, g, fast_config());
    const LearningRates lr;
    EXPECT_EQ(t.adam().group("positions").lr, lr.positions);
    EXPECT_EQ(t.adam().group("attributes").lr, lr.attributes);
    EXPECT_EQ(t.adam().group("sdf").lr, lr.sdf);
    EXPECT_EQ(t.adam().group("kernel").lr, lr.kernel);
    EXPECT_EQ(t.adam().group("correctives").lr, lr.correctives);
    EXPECT_EQ(t.adam().group("shape").lr, lr.shape);
    EXPECT_EQ(t.adam().hyper().beta1, 0.9);
    EXPECT_EQ(t.adam().hyper().beta2, 0.999);
    EXPECT_EQ(t.adam().hyper().eps, 1e-8);
}

TEST(TotalLoss, WeightedSum)
{
    LossWeights w{1, 1, 1, 1, 1, 1};
    LossParts p{1, 2, 3, 4, 5, 6};
    EXPECT_EQ(total_loss(w, p), 21.0);
    LossWeights d;
    EXPECT_NEAR(total_loss(d, p), 1 + 0.2 + 0.3 + 4 + 2.5 + 0.06, 1e-12);
}

TEST(TotalLoss, NonFiniteTermIsNamed)
{
    LossWeights w;
    for (size_t i = 0; i < kTermNames.size(); ++i) {
        LossParts p{1, 2, 3, 4, 5, 6};
        double* slot[] = {&p.sds, &p.pos, &p.eik, &p.alpha, &p.nsds, &p.nc};
        *slot[i] = i % 2 ? std::numeric_limits<double>::infinity() : std::nan("");
        try {
            total_loss(w, p);
            FAIL() << "no error for " << kTermNames[i];
        } catch (const NumericError& e) {
            EXPECT_NE(std::string(e.what()).find("'" + std::string(kTermNames[i]) + "'"), std::string::npos)
                << e.what();
        }
    }
}

namespace {

struct Probe {
    scene::Scene scene;
    StepSample sample;
    scene::MeshState mesh;
    std::vector<Vec3d> eik;
};

Probe make_probe(bool posed)
{
    Probe p{fixture::tiny_scene(), {}, {}, {}};
    std::mt19937_64 rng(21);
    auto& s = p.scene;
    if (posed) {
        std::uniform_real_distribution<double> u(-0.2, 0.2);
        for (auto& r : s.natural.pose) r += Vec3d{u(rng), u(rng), u(rng)};
        for (auto& b : s.natural.shape) b = u(rng);
    }
    const auto cams = CameraSampler::for_body(s.body, s.natural, 32, 32);
    p.sample.camera = cams.sample(rng, CameraMode::FullBody).camera;
    p.sample.params = s.natural;
    p.sample.background = {0.2, 0.3, 0.4};
    p.sample.context.seed = 99;
    p.mesh = scene::extract_mesh(s, 16);
    const auto centers = scene::canonical_centers(s);
    std::vector<Vec3d> some(centers.begin(), centers.begin() + 48);
    p.eik = mesh::eikonal_samples(some, 48, 0.02, rng);
    return p;
}

double probe_loss(Probe& p, const LossWeights& w, scene::SceneGrad* grad)
{
    auto g = fixture::pattern_guidance(32, 32);
    p.sample.params = p.scene.natural;
    auto mesh = p.mesh;
    return evaluate(p.scene, p.sample, g, w, &mesh, p.eik, grad).total;
}

// Addressable view of every learnable scalar.
struct ParamRef {
    std::string group;
    std::function<double&(scene::Scene&)> value;
    std::function<double(const scene::SceneGrad&)> grad;
};

std::vector<ParamRef> enumerate(const scene::Scene& s)
{
    std::vector<ParamRef> out;
    auto add_vec = [&](std::string name, size_t n, auto pget, auto gget) {
        for (size_t i = 0; i < n; ++i)
            out.push_back({name, [=](scene::Scene& sc) -> double& { return pget(sc)[i]; },
                           [=](const scene::SceneGrad& g) { return gget(g)[i]; }});
    };
    add_vec("positions", s.bank.positions.size(), [](scene::Scene& sc) -> auto& { return sc.bank.positions; },
            [](const scene::SceneGrad& g) -> auto& { return g.positions; });
    add_vec("attr.grid", s.attributes.grid.params().size(),
            [](scene::Scene& sc) -> auto& { return sc.attributes.grid.params(); },
            [](const scene::SceneGrad& g) -> auto& { return g.attributes.grid; });
    add_vec("attr.mlp", s.attributes.mlp.params().size(),
            [](scene::Scene& sc) -> auto& { return sc.attributes.mlp.params(); },
            [](const scene::SceneGrad& g) -> auto& { return g.attributes.mlp; });
    add_vec("sdf.grid", s.sdf.grid.params().size(), [](scene::Scene& sc) -> auto& { return sc.sdf.grid.params(); },
            [](const scene::SceneGrad& g) -> auto& { return g.sdf.grid; });
    add_vec("sdf.mlp", s.sdf.mlp.params().size(), [](scene::Scene& sc) -> auto& { return sc.sdf.mlp.params(); },
            [](const scene::SceneGrad& g) -> auto& { return g.sdf.mlp; });
    add_vec("nets", s.nets.mlp.params().size(), [](scene::Scene& sc) -> auto& { return sc.nets.mlp.params(); },
            [](const scene::SceneGrad& g) -> auto& { return g.nets; });
    add_vec("shape", s.natural.shape.size(), [](scene::Scene& sc) -> auto& { return sc.natural.shape; },
            [](const scene::SceneGrad& g) -> auto& { return g.shape; });
    out.push_back({"kernel", [](scene::Scene& sc) -> double& { return sc.kernel.log_gamma; },
                   [](const scene::SceneGrad& g) { return g.kernel[0]; }});
    out.push_back({"kernel", [](scene::Scene& sc) -> double& { return sc.kernel.log_lambda; },
                   [](const scene::SceneGrad& g) { return g.kernel[1]; }});
    for (size_t j = 0; j < s.natural.pose.size(); ++j)
        for (int a = 0; a < 3; ++a)
            out.push_back({"pose", [=](scene::Scene& sc) -> double& { return sc.natural.pose[j][a]; },
                           [=](const scene::SceneGrad& g) { return g.pose[3 * j + a]; }});
    return out;
}

} // namespace

TEST(TotalLoss, ZeroWeightRemovesGradient)
{
    auto p = make_probe(true);
    LossWeights all;
    // Per-term gradients.
    std::vector<scene::SceneGrad> per;
    for (size_t t = 0; t < kTermNames.size(); ++t) {
        LossWeights w{0, 0, 0, 0, 0, 0};
        double* slot[] = {&w.sds, &w.pos, &w.eik, &w.alpha, &w.nsds, &w.nc};
        *slot[t] = all.values()[t];
        auto g = scene::SceneGrad::like(p.scene);
        probe_loss(p, w, &g);
        per.push_back(std::move(g));
    }
    auto full = scene::SceneGrad::like(p.scene);
    probe_loss(p, all, &full);

    LossWeights none{0, 0, 0, 0, 0, 0};
    auto zero = scene::SceneGrad::like(p.scene);
    probe_loss(p, none, &zero);
    for (const auto& r : enumerate(p.scene)) ASSERT_EQ(r.grad(zero), 0.0) << r.group;

    // pos only touches positions; eik only touches the SDF.
    for (const auto& r : enumerate(p.scene)) {
        if (r.group != "positions") ASSERT_EQ(r.grad(per[1]), 0.0) << r.group;
        if (r.group.rfind("sdf", 0) != 0) ASSERT_EQ(r.grad(per[2]), 0.0) << r.group;
    }

    double max_diff = 0.0, scale = 0.0;
    for (const auto& r : enumerate(p.scene)) {
        double sum = 0.0;
        for (const auto& g : per) sum += r.grad(g);
        max_diff = std::max(max_diff, std::abs(sum - r.grad(full)));
        scale = std::max(scale, std::abs(r.grad(full)));
    }
    EXPECT_GT(scale, 0.0);
    EXPECT_LE(max_diff, 1e-9 * scale);
}

TEST(EndToEnd, GradientMatchesFiniteDifferences)
{
    auto p = make_probe(true);
    const LossWeights w;
    auto g = scene::SceneGrad::like(p.scene);
    probe_loss(p, w, &g);

    const auto refs = enumerate(p.scene);
    std::map<std::string, std::vector<size_t>> live;
    for (size_t i = 0; i < refs.size(); ++i)
        // Loss ~40 at h = 1e-7 resolves gradients to ~4e-8.
        if (std::abs(refs[i].grad(g)) > 1e-5) live[refs[i].group].push_back(i);
    ASSERT_GE(live.size(), 8u);

    // 20 parameters, spread over the groups with a live gradient.
    std::mt19937_64 rng(7);
    std::vector<size_t> picks;
    while (picks.size() < 20)
        for (const auto& [name, idx] : live) {
            if (picks.size() == 20) break;
            picks.push_back(idx[std::uniform_int_distribution<size_t>(0, idx.size() - 1)(rng)]);
        }

    for (size_t i : picks) {
        const auto& r = refs[i];
        double& v = r.value(p.scene);
        const double v0 = v;
        // The mesh mask has coverage jumps; a small stencil stays clear of them.
        const double h = 1e-7 * std::max(1.0, std::abs(v0));
        v = v0 + h;
        p.scene.update_canonical();
        const double lp = probe_loss(p, w, nullptr);
        v = v0 - h;
        p.scene.update_canonical();
        const double lm = probe_loss(p, w, nullptr);
        v = v0;
        p.scene.update_canonical();
        const double fd = (lp - lm) / (2 * h);
        const double an = r.grad(g);
        const double rel = std::abs(fd - an) / std::max(std::abs(fd), std::abs(an));
        EXPECT_LT(rel, 1e-2) << r.group << " #" << i << " analytic " << an << " fd " << fd;
    }
}

TEST(CameraSampler, FullBodyRanges)
{
    const auto s = fixture::tiny_scene();
    auto cs = CameraSampler::for_body(s.body, s.natural, 64, 64);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 10000; ++i) {
        const auto c = cs.sample(rng, CameraMode::FullBody);
        ASSERT_GE(c.elevation, -10.0);
        ASSERT_LE(c.elevation, 45.0);
        ASSERT_GE(c.fovy, 26.0);
        ASSERT_LE(c.fovy, 45.0);
        ASSERT_GE(c.azimuth, 0.0);
        ASSERT_LT(c.azimuth, 360.0);
        const Vec3d eye = c.camera.center();
        ASSERT_NEAR(norm(eye - cs.center), 3.5, 1e-9);
        // Elevation recovered from the eye position.
        const double el = std::asin((eye.y - cs.center.y) / 3.5);
        ASSERT_NEAR(el, deg2rad(c.elevation), 1e-9);
        ASSERT_NEAR(2.0 * std::atan(32.0 / c.camera.fy), deg2rad(c.fovy), 1e-9);
    }
}

TEST(CameraSampler, PartFramingsLookAtTheirTarget)
{
    const auto s = fixture::tiny_scene();
    auto cs = CameraSampler::for_body(s.body, s.natural, 64, 64);
    std::mt19937_64 rng(4);
    for (int m = 1; m < kCameraModes; ++m) {
        for (int i = 0; i < 200; ++i) {
            const auto c = cs.sample(rng, static_cast<CameraMode>(m));
            const auto& pr = cs.presets[static_cast<size_t>(m)];
            ASSERT_NEAR(norm(c.camera.center() - c.target), pr.radius, 1e-9);
            ASSERT_GE(c.azimuth, pr.azimuth_min);
            ASSERT_LE(c.azimuth, pr.azimuth_max);
            // Target projects to the image center.
            const Vec3d q = c.camera.to_camera(c.target);
            ASSERT_GT(q.z, 0.0);
            ASSERT_NEAR(c.camera.fx * q.x / q.z + c.camera.cx, 32.0, 1e-6);
            ASSERT_NEAR(c.camera.fy * q.y / q.z + c.camera.cy, 32.0, 1e-6);
        }
    }
}

TEST(CameraSampler, DeterministicUnderSeed)
{
    const auto s = fixture::tiny_scene();
    auto cs = CameraSampler::for_body(s.body, s.natural, 64, 64);
    std::mt19937_64 a(17), b(17);
    for (int i = 0; i < 500; ++i) {
        const auto ma = cs.sample_mode(a, true), mb = cs.sample_mode(b, true);
        ASSERT_EQ(ma, mb);
        const auto ca = cs.sample(a, ma), cb = cs.sample(b, mb);
        ASSERT_EQ(ca.azimuth, cb.azimuth);
        ASSERT_EQ(ca.elevation, cb.elevation);
        ASSERT_EQ(ca.fovy, cb.fovy);
        ASSERT_EQ(ca.camera.center().x, cb.camera.center().x);
    }
}

TEST(CameraSampler, ModesAreEvenOnceZoomInsStart)
{
    CameraSampler cs;
    std::mt19937_64 rng(8);
    std::array<int, kCameraModes> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<size_t>(cs.sample_mode(rng, true))];
    for (int m = 0; m < kCameraModes; ++m) {
        const double f = static_cast<double>(counts[m]) / n;
        EXPECT_NEAR(f, 1.0 / 6.0, 0.02) << camera_mode_name(static_cast<CameraMode>(m));
    }
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(cs.sample_mode(rng, false), CameraMode::FullBody);
}

TEST(PoseSampler, NaturalOnlyThenAlternating)
{
    const auto s = fixture::tiny_scene();
    PoseSampler ps(animation_bank(s, 5, 1));
    std::mt19937_64 rng(2);
    for (int64_t it = 1; it < 3000; ++it) ASSERT_TRUE(ps.choose(it, 3000, rng).natural) << it;
    int animated = 0;
    for (int64_t it = 3000; it < 4000; ++it) {
        const auto c = ps.choose(it, 3000, rng);
        ASSERT_EQ(c.natural, it % 2 == 0);
        if (!c.natural) {
            ASSERT_GE(c.index, 0);
            ASSERT_LT(c.index, 5);
            ++animated;
        }
    }
    EXPECT_EQ(animated, 500);

    auto natural = s.natural;
    natural.shape[0] = 0.1;
    const auto p = ps.params({false, 2}, natural);
    EXPECT_EQ(p.shape, natural.shape);
    EXPECT_EQ(p.pose, ps.animation()[2].pose);

    PoseSampler empty;
    for (int64_t it = 3000; it < 3010; ++it) EXPECT_TRUE(empty.choose(it, 3000, rng).natural);
}

TEST(Trainer, ScheduleFollowsPhases)
{
    auto s = fixture::tiny_scene();
    auto g = fixture::pattern_guidance(24, 24);
    auto cfg = fast_config();
    cfg.iterations = 24;
    cfg.natural_only = 12;
    cfg.zoom_in_start = 16;
    Trainer t(s, g, cfg, {animation_bank(s, 3, 5), {}});
    const auto rec = t.run();
    ASSERT_EQ(rec.size(), 24u);
    bool zoomed = false;
    for (const auto& r : rec) {
        if (r.iteration < 12) EXPECT_TRUE(r.natural_pose) << r.iteration;
        else EXPECT_EQ(r.natural_pose, r.iteration % 2 == 0) << r.iteration;
        if (r.iteration < 16) EXPECT_EQ(r.mode, CameraMode::FullBody) << r.iteration;
        else zoomed |= r.mode != CameraMode::FullBody;
    }
    EXPECT_TRUE(zoomed);
}

TEST(Trainer, DensifiesExactlyEveryInterval)
{
    auto s = fixture::tiny_scene();
    auto g = fixture::pattern_guidance(24, 24);
    auto cfg = fast_config();
    cfg.iterations = 300;
    cfg.natural_only = 0;
    cfg.zoom_in_start = 0;
    cfg.eikonal_centers = cfg.eikonal_perturbed = 16;
    Trainer t(s, g, cfg);
    const auto rec = t.run();
    EXPECT_EQ(t.densify_ticks(), (std::vector<int64_t>{100, 200, 300}));
    for (const auto& r : rec) EXPECT_EQ(r.densify_tick, r.iteration % 100 == 0) << r.iteration;
    EXPECT_NO_THROW(s.bank.validate());
    EXPECT_EQ(s.bank.primitive_count(), s.primitive_count());
}

TEST(Trainer, GaussianCountBoundedByCap)
{
    auto s = fixture::tiny_scene();
    const size_t n0 = s.bank.size();
    auto g = fixture::pattern_guidance(24, 24);
    auto cfg = fast_config();
    cfg.iterations = 20;
    cfg.densify_interval = 4;
    cfg.densify.grad_threshold = 0.0;
    cfg.densify.min_opacity = 0.0;
    cfg.gaussian_cap = n0 + 40;
    Trainer t(s, g, cfg);
    size_t prev = n0;
    bool grew = false;
    for (const auto& r : t.run()) {
        EXPECT_LE(r.gaussians, cfg.gaussian_cap);
        EXPECT_GE(r.gaussians, prev);
        grew |= r.gaussians > prev;
        prev = r.gaussians;
    }
    EXPECT_TRUE(grew);
    EXPECT_EQ(t.adam().group("positions").slots[0].m.size(), s.bank.positions.size());
}

TEST(Trainer, DeterministicMetricsLog)
{
    auto run = [] {
        auto s = fixture::tiny_scene();
        auto g = fixture::pattern_guidance(24, 24);
        auto cfg = fixture::tiny_train_config();
        cfg.width = cfg.height = 24;
        cfg.iterations = 100;
        cfg.natural_only = 20;
        cfg.zoom_in_start = 40;
        cfg.densify_interval = 50;
        std::ostringstream log;
        train(s, g, cfg, {animation_bank(s, 3, 9), {}}, &log);
        return log.str();
    };
    const auto a = run(), b = run();
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 100);
    EXPECT_EQ(a, b);
}

TEST(Trainer, RestPoseAndCanonicalFrameNeverChange)
{
    auto s = fixture::tiny_scene();
    const auto rest = s.rest;
    const auto canonical = s.canonical;
    const auto natural = s.natural;
    auto g = fixture::pattern_guidance(24, 24);
    auto cfg = fixture::tiny_train_config();
    cfg.width = cfg.height = 24;
    cfg.iterations = 12;
    cfg.natural_only = 4;
    Trainer t(s, g, cfg, {animation_bank(s, 2, 3), {}});
    t.run();
    EXPECT_EQ(s.rest.pose, rest.pose);
    EXPECT_EQ(s.rest.shape, rest.shape);
    ASSERT_EQ(s.canonical.size(), canonical.size());
    for (size_t k = 0; k < canonical.size(); ++k) {
        EXPECT_EQ(s.canonical.position[k], canonical.position[k]);
        EXPECT_EQ(s.canonical.scale[k], canonical.scale[k]);
    }
    bool moved = false;
    for (size_t j = 0; j < natural.pose.size(); ++j) moved |= !(s.natural.pose[j] == natural.pose[j]);
    EXPECT_TRUE(moved);
}

TEST(Trainer, MetricsLineFields)
{
    StepRecord r;
    r.iteration = 7;
    r.parts = {1, 2, 3, 4, 5, 6};
    r.total = 9.5;
    r.gaussians = 512;
    r.natural_pose = false;
    r.mode = CameraMode::Face;
    r.ms = 3.25;
    const auto j = nlohmann::json::parse(metrics_line(r, {}, true));
    EXPECT_EQ(j["iter"], 7);
    EXPECT_EQ(j["loss"]["alpha"], 4.0);
    EXPECT_EQ(j["loss"]["total"], 9.5);
    EXPECT_EQ(j["weights"]["nsds"], 0.5);
    EXPECT_EQ(j["gaussians"], 512);
    EXPECT_EQ(j["pose"], "animation");
    EXPECT_EQ(j["camera"], "face");
    EXPECT_EQ(j["ms"], 3.25);
    EXPECT_FALSE(nlohmann::json::parse(metrics_line(r, {}, false)).contains("ms"));
}

TEST(Trainer, DivergenceAbortsWithLastSnapshot)
{
    auto s = fixture::tiny_scene();
    auto cfg = fast_config();
    cfg.iterations = 10;
    cfg.snapshot_interval = 5;

    // Reference state after 5 clean steps.
    auto ref = fixture::tiny_scene();
    {
        auto g = fixture::pattern_guidance(24, 24);
        Trainer t(ref, g, cfg);
        for (int i = 0; i < 5; ++i) t.step();
    }

    ScriptedGuidance g(24, 24);
    g.fault = ScriptedGuidance::Fault::HugeLoss;
    g.fault_at = 7;
    Trainer t(s, g, cfg);
    try {
        t.run();
        FAIL() << "no abort";
    } catch (const TrainingAborted& e) {
        EXPECT_EQ(e.iteration(), 7);
        EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    }
    EXPECT_EQ(s.bank.positions, ref.bank.positions);
    EXPECT_EQ(s.attributes.mlp.params(), ref.attributes.mlp.params());
    EXPECT_EQ(s.sdf.grid.params(), ref.sdf.grid.params());
}

TEST(Trainer, GuidanceFailureAbortsAndRestores)
{
    auto s = fixture::tiny_scene();
    const auto initial = s.bank.positions;
    ScriptedGuidance g(24, 24);
    g.fault = ScriptedGuidance::Fault::Throw;
    g.fault_at = 3;
    Trainer t(s, g, fast_config());
    try {
        t.run();
        FAIL() << "no abort";
    } catch (const TrainingAborted& e) {
        EXPECT_EQ(e.iteration(), 3);
        EXPECT_NE(std::string(e.what()).find("unreachable"), std::string::npos);
    }
    EXPECT_EQ(s.bank.positions, initial);
}

TEST(Trainer, NonFiniteLossAbortsNamingTerm)
{
    auto s = fixture::tiny_scene();
    ScriptedGuidance g(24, 24);
    g.fault = ScriptedGuidance::Fault::NanLoss;
    g.fault_at = 2;
    Trainer t(s, g, fast_config());
    try {
        t.run();
        FAIL() << "no abort";
    } catch (const TrainingAborted& e) {
        EXPECT_EQ(e.iteration(), 2);
        EXPECT_NE(std::string(e.what()).find("'sds'"), std::string::npos) << e.what();
    }
}

TEST(Trainer, NonFiniteGradientSkipsUpdate)
{
    auto s = fixture::tiny_scene();
    ScriptedGuidance g(24, 24);
    g.fault = ScriptedGuidance::Fault::NanGradient;
    g.fault_at = 2;
    auto cfg = fast_config();
    cfg.iterations = 3;
    cfg.natural_only = cfg.zoom_in_start = 0;
    Trainer t(s, g, cfg);
    t.step();
    const auto before = s.bank.positions;
    const auto r = t.step();
    EXPECT_EQ(r.skipped, 1);
    EXPECT_EQ(s.bank.positions, before);
    const auto r3 = t.step();
    EXPECT_EQ(r3.skipped, 1);
    EXPECT_NE(s.bank.positions, before);
}

TEST(Trainer, FixedViewsSetContextView)
{
    auto s = fixture::tiny_scene();
    auto g = fixture::pattern_guidance(24, 24);
    auto cs = CameraSampler::for_body(s.body, s.natural, 24, 24);
    std::mt19937_64 rng(1);
    TrainInputs in;
    for (int i = 0; i < 3; ++i) in.views.push_back(cs.sample(rng, CameraMode::FullBody).camera);
    auto cfg = fast_config();
    Trainer t(s, g, cfg, in);
    for (const auto& r : t.run()) {
        EXPECT_GE(r.view, 0);
        EXPECT_LT(r.view, 3);
        ASSERT_TRUE(r.psnr.has_value());
        EXPECT_TRUE(std::isfinite(*r.psnr));
    }
}

TEST(Bake, RenderIsBitIdentical)
{
    auto s = fixture::tiny_scene();
    auto cs = CameraSampler::for_body(s.body, s.natural, 48, 48);
    std::mt19937_64 rng(6);
    const auto cam = cs.sample(rng, CameraMode::FullBody).camera;
    auto pose = animation_bank(s, 1, 4)[0];
    const auto before = scene::render_frame(s, pose, cam, {0.1, 0.2, 0.3});
    scene::bake_attributes(s);
    ASSERT_TRUE(s.bank.baked);
    fields::reset_field_eval_count();
    const auto after = scene::render_frame(s, pose, cam, {0.1, 0.2, 0.3});
    EXPECT_EQ(fields::field_eval_count(), 0u);
    EXPECT_EQ(before.rgb.data, after.rgb.data);
    EXPECT_EQ(before.alpha.data, after.alpha.data);
}

TEST(Bake, TrainerRejectsBakedBank)
{
    auto s = fixture::tiny_scene();
    scene::bake_attributes(s);
    auto g = fixture::pattern_guidance(24, 24);
    EXPECT_THROW(Trainer(s, g, fast_config()), ParameterError);
}

TEST(Golden, LossTraceMatchesFixture)
{
    std::ifstream in(std::string(GAVATAR_FIXTURE_DIR) + "/golden_loss_trace.json");
    ASSERT_TRUE(in) << "missing golden_loss_trace.json";
    const auto j = nlohmann::json::parse(in);
    const auto rec = fixture::golden_run();
    ASSERT_EQ(j["steps"].size(), rec.size());
    ASSERT_EQ(rec.size(), 10u);
    for (size_t i = 0; i < rec.size(); ++i) {
        const auto& st = j["steps"][i];
        EXPECT_EQ(st["iter"].get<int64_t>(), rec[i].iteration);
        EXPECT_NEAR(st["total"].get<double>(), rec[i].total, 1e-6) << "step " << i + 1;
        const auto v = rec[i].parts.values();
        for (size_t k = 0; k < v.size(); ++k)
            EXPECT_NEAR(st[std::string(kTermNames[k])].get<double>(), v[k], 1e-6)
                << "step " << i + 1 << " " << kTermNames[k];
    }
}
