#include "gavatar/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gavatar/errors.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar::cli {

namespace {

using Clock = std::chrono::steady_clock;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyResult : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::array<double, 3> rgb_option(const std::vector<double>& v)
{
    if (v.size() != 3) throw UsageError("--background takes three values");
    return {v[0], v[1], v[2]};
}

std::string frame_name(const char* prefix, int64_t i, const char* ext)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%06lld%s", prefix, static_cast<long long>(i), ext);
    return buf;
}

Vec3d body_center(const scene::Scene& s, const body::BodyParams& params)
{
    return optim::CameraSampler::for_body(s.body, params, 1, 1).center;
}

body::BodyModel template_or_default(const std::string& path)
{
    return path.empty() ? body::make_capsule_person() : io::load_template(path);
}

// Camera options shared by render and animate.
struct View {
    double azimuth = 0.0, elevation = 0.0, radius = 3.5, fovy = 35.0;
    int width = 512, height = 512;
    std::vector<double> background{0.0, 0.0, 0.0};

    void add(CLI::App* app)
    {
        app->add_option("--azimuth", azimuth, "degrees, 0 looks at the front")->capture_default_str();
        app->add_option("--elevation", elevation, "degrees")->capture_default_str();
        app->add_option("--radius", radius, "meters")->capture_default_str();
        app->add_option("--fovy", fovy, "degrees")->capture_default_str();
        app->add_option("--width", width)->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--height", height)->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--background", background, "linear r g b")->expected(3);
    }
};

body::BodyParams pose_option(const scene::Scene& s, const std::string& which)
{
    if (which == "natural") return s.natural;
    if (which == "rest") return s.rest;
    throw UsageError("--pose must be natural or rest");
}

std::vector<body::BodyParams> animation_from(const std::vector<std::string>& files, size_t joints)
{
    std::vector<body::BodyParams> out;
    for (const auto& f : files) {
        const auto seq = io::load_pose_sequence(f);
        if (seq.joints() != joints)
            throw UsageError(f + ": sequence has " + std::to_string(seq.joints()) + " joints, the skeleton has " +
                             std::to_string(joints));
        for (const auto& pose : seq.poses) {
            body::BodyParams p = body::BodyParams::zeros(joints);
            p.pose = pose;
            out.push_back(std::move(p));
        }
    }
    return out;
}

double euler_characteristic(const mesh::TriMesh& m)
{
    std::set<std::pair<uint32_t, uint32_t>> edges;
    for (const auto& t : m.triangles)
        for (int e = 0; e < 3; ++e) {
            const uint32_t a = t[e], b = t[(e + 1) % 3];
            edges.insert({std::min(a, b), std::max(a, b)});
        }
    return static_cast<double>(m.vertices.size()) - static_cast<double>(edges.size()) +
           static_cast<double>(m.triangles.size());
}

double mean_psnr(const scene::Scene& s, const io::ViewSet& views)
{
    double sum = 0.0;
    for (size_t v = 0; v < views.size(); ++v) {
        const auto img = scene::render_frame(s, s.natural, views.cameras[v], views.background).rgb;
        sum += psnr(img, views.images[v]);
    }
    return views.size() ? sum / static_cast<double>(views.size()) : 0.0;
}

void check_views(const io::ViewSet& views, int w, int h, const std::string& what)
{
    if (views.size() == 0) throw UsageError(what + ": no views");
    for (const auto& img : views.images)
        if (img.width != w || img.height != h)
            throw UsageError(what + ": views are " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                             ", the config renders " + std::to_string(w) + "x" + std::to_string(h));
}

// ---- subcommands ----

struct FitArgs {
    std::string config, template_path, init, guidance = "photometric", refs, eval_refs, endpoint, prompt, out,
        metrics, preview_dir;
    std::vector<std::string> poses;
    int64_t preview_every = 0;
    int64_t iterations = -1;
    int64_t seed = -1;
    int retries = 3;
    double timeout = 60.0;
};

int cmd_fit(const FitArgs& a, std::ostream& out, std::ostream& err)
{
    auto cfg = io::load_config(a.config);
    if (a.iterations >= 0) {
        // Schedule boundaries past the new end collapse onto it.
        auto& t = cfg.train;
        t.iterations = a.iterations;
        t.natural_only = std::min(t.natural_only, t.iterations);
        t.zoom_in_start = std::min(t.zoom_in_start, t.iterations);
    }
    if (a.seed >= 0) cfg.train.seed = static_cast<uint64_t>(a.seed);
    if (!a.prompt.empty()) cfg.train.prompt = a.prompt;
    cfg.train.validate();

    optim::TrainInputs inputs;
    std::unique_ptr<guidance::Guidance> guide;
    io::ViewSet refs, eval_refs;
    if (a.guidance == "photometric") {
        if (a.refs.empty()) throw UsageError("photometric guidance needs --refs");
        if (cfg.train.weights.nsds > 0.0)
            throw UsageError("photometric guidance has no normal-map target; set weights.nsds to 0");
        refs = io::load_views(a.refs);
        check_views(refs, cfg.train.width, cfg.train.height, a.refs);
        cfg.train.background = refs.background;
        inputs.views = refs.cameras;
        guide = std::make_unique<guidance::PhotometricGuidance>(
            [&refs](const guidance::GuidanceContext& ctx) { return refs.images.at(static_cast<size_t>(ctx.view)); });
    } else if (a.guidance == "remote") {
        if (a.endpoint.empty()) throw UsageError("remote guidance needs --endpoint");
        if (cfg.train.prompt.empty()) throw UsageError("remote guidance needs a prompt (--prompt or train.prompt)");
        guidance::RetryPolicy retry;
        retry.attempts = a.retries;
        guide = std::make_unique<guidance::RemoteSdsGuidance>(a.endpoint, retry, a.timeout);
    } else {
        throw UsageError("--guidance must be photometric or remote");
    }
    if (!a.eval_refs.empty()) {
        eval_refs = io::load_views(a.eval_refs);
        check_views(eval_refs, cfg.train.width, cfg.train.height, a.eval_refs);
    }

    scene::Scene s;
    std::optional<AdamState> adam;
    if (!a.init.empty()) {
        auto ck = io::load_checkpoint(a.init);
        if (ck.scene.bank.baked) throw UsageError(a.init + ": checkpoint is baked and cannot be trained");
        // The checkpoint's scene layout wins over the config file.
        cfg.scene = ck.config.scene;
        cfg.pretrain = ck.config.pretrain;
        s = std::move(ck.scene);
        adam = std::move(ck.adam);
    } else {
        cfg.scene.validate();
        s = scene::make_scene(cfg.scene, template_or_default(a.template_path));
        const auto rep = scene::pretrain_scene(s, cfg.pretrain);
        err << "pretrain: " << rep.steps << " steps, sdf error " << rep.sdf_mean_abs_error << " m\n";
    }

    inputs.animation = animation_from(a.poses, s.body.skeleton.size());

    optim::Trainer trainer(s, *guide, cfg.train, inputs);
    if (adam) trainer.adam().load_state(*adam);

    std::ofstream metrics_file;
    std::ostream* metrics = nullptr;
    if (!a.metrics.empty()) {
        metrics_file.open(a.metrics);
        if (!metrics_file) throw UsageError("cannot write " + a.metrics);
        metrics = &metrics_file;
    }
    if (!a.preview_dir.empty()) io::fs::create_directories(a.preview_dir);
    const auto preview_cam = orbit_camera(body_center(s, s.natural), cfg.train.camera.radius, 0.0, 0.0, 35.0,
                                          cfg.train.width, cfg.train.height);
    auto on_step = [&](const optim::StepRecord& r) {
        if (a.preview_dir.empty() || a.preview_every <= 0 || r.iteration % a.preview_every != 0) return;
        const auto img = scene::render_frame(s, s.natural, preview_cam, cfg.train.background).rgb;
        io::write_png(io::fs::path(a.preview_dir) / frame_name("iter_", r.iteration, ".png"), img);
    };

    io::Checkpoint ck{cfg, {}, std::nullopt, 0};
    try {
        trainer.run(metrics, on_step);
    } catch (const TrainingAborted& e) {
        ck.scene = std::move(s);
        ck.iteration = e.iteration();
        io::save_checkpoint(a.out, ck);
        err << "fit: " << e.what() << "\nfit: wrote the last good state to " << a.out << '\n';
        return kAborted;
    }

    nlohmann::ordered_json fin;
    fin["final"] = true;
    fin["iterations"] = trainer.iteration();
    fin["gaussians"] = s.bank.size();
    if (refs.size()) fin["psnr_train"] = mean_psnr(s, refs);
    if (eval_refs.size()) fin["psnr_eval"] = mean_psnr(s, eval_refs);
    const std::string line = fin.dump();
    out << line << '\n';
    if (metrics) *metrics << line << '\n';

    ck.adam = trainer.adam().state();
    ck.iteration = trainer.iteration();
    ck.scene = std::move(s);
    io::save_checkpoint(a.out, ck);
    return kOk;
}

struct AnimateArgs {
    std::string checkpoint, poses, out_dir, timing;
    View view;
    int sh = 16;
};

int cmd_animate(AnimateArgs a, std::ostream& out, std::ostream& err)
{
    auto ck = io::load_checkpoint(a.checkpoint);
    auto& s = ck.scene;
    const auto seq = io::load_pose_sequence(a.poses);
    const size_t joints = s.body.skeleton.size();
    if (seq.joints() != joints)
        throw UsageError("joint count mismatch: the sequence has " + std::to_string(seq.joints()) +
                         " joints, the skeleton has " + std::to_string(joints));
    if (!seq.shape.empty() && seq.shape.size() != s.natural.shape.size())
        throw UsageError("shape size mismatch: the sequence has " + std::to_string(seq.shape.size()) +
                         " values, the skeleton needs " + std::to_string(s.natural.shape.size()));
    if (!s.bank.baked) {
        scene::bake_attributes(s);
        err << "animate: baked " << s.bank.size() << " Gaussians\n";
    }
    scene::Playback player(s, a.sh);
    const auto bg = rgb_option(a.view.background);
    const auto base = orbit_camera(body_center(s, s.natural), a.view.radius, a.view.azimuth, a.view.elevation,
                                   a.view.fovy, a.view.width, a.view.height);
    io::fs::create_directories(a.out_dir);

    scene::FrameTiming sum;
    for (size_t f = 0; f < seq.frames(); ++f) {
        body::BodyParams p{seq.poses[f], seq.shape.empty() ? s.natural.shape : seq.shape};
        auto cam = base;
        if (!seq.translation.empty()) cam.translation = base.translation + base.rotation * seq.translation[f];
        const auto target = player.render(p, cam, bg, &sum);
        io::write_png(io::fs::path(a.out_dir) / frame_name("frame_", static_cast<int64_t>(f), ".png"), target.rgb);
    }

    const double n = static_cast<double>(std::max<size_t>(seq.frames(), 1));
    nlohmann::ordered_json rep;
    rep["frames"] = seq.frames();
    rep["gaussians"] = player.size();
    rep["width"] = a.view.width;
    rep["height"] = a.view.height;
    rep["stages"] = {{"lbs", sum.lbs_ms / n},
                     {"primitives", sum.primitives_ms / n},
                     {"transform", sum.transform_ms / n},
                     {"raster", sum.raster_ms / n}};
    rep["total_ms"] = sum.total_ms() / n;
    rep["fps"] = sum.total_ms() > 0.0 ? 1000.0 * n / sum.total_ms() : 0.0;
    const auto path = a.timing.empty() ? io::fs::path(a.out_dir) / "timing.json" : io::fs::path(a.timing);
    io::write_file_atomic(path, rep.dump(2) + "\n");

    out << std::fixed << std::setprecision(3);
    out << "stage        ms/frame\n";
    out << "lbs          " << sum.lbs_ms / n << '\n';
    out << "primitives   " << sum.primitives_ms / n << '\n';
    out << "transform    " << sum.transform_ms / n << '\n';
    out << "raster       " << sum.raster_ms / n << '\n';
    out << "total        " << sum.total_ms() / n << '\n';
    out << seq.frames() << " frames, " << player.size() << " Gaussians\n";
    return kOk;
}

struct MeshArgs {
    std::string checkpoint, out, pose = "rest";
    int resolution = 64;
    int atlas = 0;
};

int cmd_extract_mesh(const MeshArgs& a, std::ostream& out, std::ostream&)
{
    const auto ext = io::fs::path(a.out).extension().string();
    if (ext != ".obj" && ext != ".ply") throw UsageError("--out must end in .obj or .ply");
    if (a.resolution < 2) throw UsageError("--resolution must be at least 2");
    const auto ck = io::load_checkpoint(a.checkpoint);
    const auto& s = ck.scene;
    const auto state = scene::extract_mesh(s, a.resolution);
    if (state.empty()) {
        const auto v = mesh::evaluate_grid(s.sdf, state.grid);
        double lo = v.front(), hi = v.front(), sum = 0.0;
        size_t inside = 0;
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
            sum += x;
            inside += x < 0.0;
        }
        std::ostringstream msg;
        msg << "empty isosurface at resolution " << a.resolution << ": sdf min " << lo << " max " << hi << " mean "
            << sum / static_cast<double>(v.size()) << ", " << inside << " of " << v.size() << " grid points inside";
        throw EmptyResult(msg.str());
    }
    auto m = mesh::bake_texture(state.extraction.mesh, s.attributes, {a.atlas});
    if (a.pose != "rest") m = scene::pose_mesh(m, scene::mesh_posing(s, state, pose_option(s, a.pose)));
    if (ext == ".obj") io::write_obj(a.out, m);
    else io::write_ply(a.out, m);
    out << "vertices " << m.vertices.size() << " faces " << m.triangles.size() << " euler "
        << euler_characteristic(m) << '\n';
    return kOk;
}

struct BenchArgs {
    std::string checkpoint, out;
    std::vector<size_t> counts{100'000, 200'000};
    std::vector<int> sizes{512};
    int repeats = 3;
    uint64_t seed = 0;
    int sh = 1;
    bool no_large_row = false;
};

int cmd_bench(const BenchArgs& a, std::ostream& out, std::ostream& err)
{
    auto ck = io::load_checkpoint(a.checkpoint);
    BenchOptions o;
    o.counts = a.counts;
    o.sizes = a.sizes;
    o.repeats = a.repeats;
    o.seed = a.seed;
    o.sh_coeffs = a.sh;
    o.large_row = !a.no_large_row;
    const auto rows = bench(ck.scene, o, &err);
    const auto csv = bench_csv(rows);
    if (a.out.empty()) out << csv;
    else {
        io::write_file_atomic(a.out, csv);
        out << csv;
    }
    return kOk;
}

struct RenderArgs {
    std::string checkpoint, out, pose = "natural";
    View view;
    size_t orbit = 0;
};

int cmd_render(const RenderArgs& a, std::ostream& out, std::ostream&)
{
    const auto ck = io::load_checkpoint(a.checkpoint);
    const auto& s = ck.scene;
    const auto params = pose_option(s, a.pose);
    const auto bg = rgb_option(a.view.background);
    const auto& v = a.view;
    if (a.orbit == 0) {
        const auto cam =
            orbit_camera(body_center(s, params), v.radius, v.azimuth, v.elevation, v.fovy, v.width, v.height);
        io::write_png(a.out, scene::render_frame(s, params, cam, bg).rgb);
        out << "wrote " << a.out << '\n';
        return kOk;
    }
    io::ViewSet views;
    views.background = bg;
    views.cameras = orbit_cameras(s, a.orbit, v.azimuth, v.elevation, v.radius, v.fovy, v.width, v.height);
    if (a.pose != "natural") throw UsageError("--orbit renders the natural pose");
    for (const auto& cam : views.cameras) views.images.push_back(scene::render_frame(s, params, cam, bg).rgb);
    io::save_views(a.out, views);
    out << "wrote " << views.size() << " views to " << a.out << '\n';
    return kOk;
}

int dispatch(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");
    int64_t threads = -1;
    app.add_option("--threads", threads, "worker threads (default: GAVATAR_THREADS or all cores)");

    FitArgs fit;
    auto* c_fit = app.add_subcommand("fit", "optimize an avatar");
    c_fit->add_option("--config", fit.config, "JSON config")->required();
    c_fit->add_option("--out", fit.out, "checkpoint to write")->required();
    c_fit->add_option("--guidance", fit.guidance, "photometric or remote")->capture_default_str();
    c_fit->add_option("--refs", fit.refs, "training views directory (photometric)");
    c_fit->add_option("--eval-refs", fit.eval_refs, "held-out views directory");
    c_fit->add_option("--endpoint", fit.endpoint, "guidance service URL (remote)");
    c_fit->add_option("--prompt", fit.prompt);
    c_fit->add_option("--template", fit.template_path, "template asset (default: capsule person)");
    c_fit->add_option("--init", fit.init, "start from a checkpoint instead of pretraining");
    c_fit->add_option("--poses", fit.poses, "pose sequences used as the animation set");
    c_fit->add_option("--metrics", fit.metrics, "metrics log (JSON lines)");
    c_fit->add_option("--preview-dir", fit.preview_dir);
    c_fit->add_option("--preview-every", fit.preview_every)->capture_default_str();
    c_fit->add_option("--iterations", fit.iterations, "override train.iterations");
    c_fit->add_option("--seed", fit.seed, "override train.seed");
    c_fit->add_option("--retries", fit.retries, "remote attempts per request")->capture_default_str();
    c_fit->add_option("--timeout", fit.timeout, "remote timeout, seconds")->capture_default_str();

    AnimateArgs anim;
    auto* c_anim = app.add_subcommand("animate", "render a pose sequence from a checkpoint");
    c_anim->add_option("--checkpoint", anim.checkpoint)->required();
    c_anim->add_option("--poses", anim.poses, "pose sequence JSON")->required();
    c_anim->add_option("--out", anim.out_dir, "frame directory")->required();
    c_anim->add_option("--timing", anim.timing, "timing report (default: OUT/timing.json)");
    c_anim->add_option("--sh", anim.sh, "SH coefficients per channel: 1, 4, 9 or 16")->capture_default_str();
    anim.view.add(c_anim);

    MeshArgs mesh;
    auto* c_mesh = app.add_subcommand("extract-mesh", "extract a textured mesh from the SDF");
    c_mesh->add_option("--checkpoint", mesh.checkpoint)->required();
    c_mesh->add_option("--out", mesh.out, ".obj or .ply")->required();
    c_mesh->add_option("--resolution", mesh.resolution)->capture_default_str();
    c_mesh->add_option("--atlas", mesh.atlas, "texture atlas side in pixels, 0 for vertex colors only")
        ->capture_default_str();
    c_mesh->add_option("--pose", mesh.pose, "rest or natural")->capture_default_str();

    BenchArgs bb;
    auto* c_bench = app.add_subcommand("bench", "time baked playback over Gaussian counts and resolutions");
    c_bench->add_option("--checkpoint", bb.checkpoint)->required();
    c_bench->add_option("--counts", bb.counts)->delimiter(',')->capture_default_str();
    c_bench->add_option("--sizes", bb.sizes, "square image sides")->delimiter(',')->capture_default_str();
    c_bench->add_option("--repeats", bb.repeats)->capture_default_str()->check(CLI::PositiveNumber);
    c_bench->add_option("--seed", bb.seed)->capture_default_str();
    c_bench->add_option("--sh", bb.sh, "SH coefficients per channel")->capture_default_str();
    c_bench->add_flag("--no-large-row", bb.no_large_row, "skip the 2.5M / 1024^2 row");
    c_bench->add_option("--out", bb.out, "CSV path (also printed)");

    std::string bake_in, bake_out;
    auto* c_bake = app.add_subcommand("bake", "freeze field attributes into the Gaussian bank");
    c_bake->add_option("--checkpoint", bake_in)->required();
    c_bake->add_option("--out", bake_out)->required();

    std::string tmpl_out;
    body::CapsulePersonOptions tmpl;
    auto* c_tmpl = app.add_subcommand("make-template", "write the procedural capsule-person template");
    c_tmpl->add_option("--out", tmpl_out)->required();
    c_tmpl->add_option("--segments", tmpl.segments_around)->capture_default_str();
    c_tmpl->add_option("--rings", tmpl.rings_along)->capture_default_str();

    RenderArgs rend;
    auto* c_render = app.add_subcommand("render", "render a checkpoint, or an orbit of reference views");
    c_render->add_option("--checkpoint", rend.checkpoint)->required();
    c_render->add_option("--out", rend.out, "PNG, or a directory with --orbit")->required();
    c_render->add_option("--orbit", rend.orbit, "number of views evenly spaced in azimuth");
    c_render->add_option("--pose", rend.pose, "natural or rest")->capture_default_str();
    rend.view.add(c_render);

    std::string cfg_out, cfg_preset = "default";
    auto* c_cfg = app.add_subcommand("make-config", "write a starting config");
    c_cfg->add_option("--preset", cfg_preset, "default, desk or tiny")->capture_default_str();
    c_cfg->add_option("--out", cfg_out, "path (default: stdout)");

    std::string tgt_config, tgt_template, tgt_out;
    auto* c_tgt = app.add_subcommand("make-target", "build a baked teacher avatar with procedural colors");
    c_tgt->add_option("--config", tgt_config)->required();
    c_tgt->add_option("--template", tgt_template);
    c_tgt->add_option("--out", tgt_out)->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << e.what() << '\n' << "run with --help for usage\n";
        return kUsage;
    }
    if (threads >= 0) set_worker_count(static_cast<size_t>(threads));

    if (c_fit->parsed()) return cmd_fit(fit, out, err);
    if (c_anim->parsed()) return cmd_animate(anim, out, err);
    if (c_mesh->parsed()) return cmd_extract_mesh(mesh, out, err);
    if (c_bench->parsed()) return cmd_bench(bb, out, err);
    if (c_render->parsed()) return cmd_render(rend, out, err);
    if (c_bake->parsed()) {
        auto ck = io::load_checkpoint(bake_in);
        if (!ck.scene.bank.baked) scene::bake_attributes(ck.scene);
        ck.adam.reset();
        io::save_checkpoint(bake_out, ck);
        out << "baked " << ck.scene.bank.size() << " Gaussians\n";
        return kOk;
    }
    if (c_tmpl->parsed()) {
        io::save_template(tmpl_out, body::make_capsule_person(tmpl));
        return kOk;
    }
    if (c_cfg->parsed()) {
        const auto text = io::dump_config(preset(cfg_preset));
        if (cfg_out.empty()) out << text;
        else io::write_file_atomic(cfg_out, text);
        return kOk;
    }
    if (c_tgt->parsed()) {
        const auto cfg = io::load_config(tgt_config);
        io::Checkpoint ck{cfg, make_teacher(cfg, template_or_default(tgt_template)), std::nullopt, 0};
        io::save_checkpoint(tgt_out, ck);
        out << "teacher with " << ck.scene.bank.size() << " Gaussians\n";
        return kOk;
    }
    return kUsage;
}

} // namespace

io::AppConfig preset(std::string_view name)
{
    io::AppConfig c;
    if (name == "default") return c;
    if (name == "desk") {
        auto& s = c.scene;
        s.anchor_grid = 16;
        s.gaussians_per_primitive = 16;
        s.corrective_hidden = 32;
        s.field_hidden = 32;
        s.attribute_grid = {12, 2, 16, 8, 1.5};
        s.sdf_grid = {12, 2, 16, 8, 1.5};
        s.seed = 3;
        auto& t = c.train;
        t.iterations = 2000;
        t.natural_only = 2000;
        t.zoom_in_start = 2000;
        t.width = 256;
        t.height = 256;
        t.weights = {1.0, 0.0, 0.01, 0.0, 0.0, 0.0};
        t.lr.attributes = 0.01;
        t.lr.positions = 0.0005;
        t.densify.enabled = false;
        t.eikonal_centers = 512;
        t.eikonal_perturbed = 512;
        t.seed = 7;
        return c;
    }
    if (name == "tiny") {
        auto& s = c.scene;
        s.anchor_grid = 8;
        s.gaussians_per_primitive = 8;
        s.corrective_hidden = 16;
        s.field_hidden = 16;
        s.attribute_grid = {4, 2, 12, 8, 1.6};
        s.sdf_grid = {6, 2, 14, 8, 1.6};
        s.seed = 5;
        auto& p = c.pretrain;
        p.batch = 1024;
        p.max_steps = 1500;
        p.sdf_tolerance = 0.02;
        p.eikonal_batch = 128;
        p.lr = 3e-3;
        auto& t = c.train;
        t.iterations = 20;
        t.natural_only = 10;
        t.zoom_in_start = 10;
        t.width = 48;
        t.height = 48;
        t.mesh_resolution = 16;
        t.mesh_interval = 5;
        t.eikonal_centers = 64;
        t.eikonal_perturbed = 64;
        t.weights.nsds = 0.0;
        t.log_timing = false;
        return c;
    }
    throw ParameterError("unknown preset '" + std::string(name) + "'");
}

render::Camera orbit_camera(const Vec3d& target, double radius, double azimuth_deg, double elevation_deg,
                            double fovy_deg, int width, int height)
{
    const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
    const Vec3d dir{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
    return render::Camera::look_at(target + dir * radius, target, {0.0, 1.0, 0.0}, deg2rad(fovy_deg), width, height);
}

std::vector<render::Camera> orbit_cameras(const scene::Scene& scene, size_t count, double azimuth_offset,
                                          double elevation_deg, double radius, double fovy_deg, int width, int height)
{
    const Vec3d c = body_center(scene, scene.natural);
    std::vector<render::Camera> cams;
    for (size_t i = 0; i < count; ++i)
        cams.push_back(orbit_camera(c, radius, azimuth_offset + 360.0 * static_cast<double>(i) / count, elevation_deg,
                                    fovy_deg, width, height));
    return cams;
}

scene::Scene make_teacher(const io::AppConfig& config, const body::BodyModel& body)
{
    config.scene.validate();
    auto s = scene::make_scene(config.scene, body);
    scene::pretrain_scene(s, config.pretrain);
    scene::bake_attributes(s);
    // Low-frequency color bands over the rest-pose body.
    const auto centers = scene::canonical_centers(s);
    auto& sh = s.bank.sh;
    std::fill(sh.begin(), sh.end(), 0.0);
    for (size_t i = 0; i < centers.size(); ++i) {
        const Vec3d& p = centers[i];
        const std::array<double, 3> rgb{0.5 + 0.3 * std::sin(3.0 * p.y + 1.0),
                                        0.5 + 0.3 * std::sin(2.5 * p.x + 2.0 * p.z + 2.0),
                                        0.5 + 0.25 * std::cos(4.0 * p.y - 1.5 * p.x)};
        for (int c = 0; c < 3; ++c) sh[i * soup::kShCoeffs + static_cast<size_t>(c) * 16] = (rgb[c] - 0.5) / render::kShC0;
    }
    return s;
}

size_t bench_bytes(size_t n, int width, int height, int sh_coeffs)
{
    // Local attributes, the world cloud, projected splats and tile lists.
    const size_t per = 4 + 24 + 32 + 24 + (24 + 32 + 24 + 8 + 24 * static_cast<size_t>(sh_coeffs)) + 160 + 4 * 8;
    return n * per + static_cast<size_t>(width) * static_cast<size_t>(height) * 64;
}

size_t available_memory()
{
    std::ifstream f("/proc/meminfo");
    std::string key;
    size_t kb = 0;
    std::string unit;
    while (f >> key >> kb >> unit)
        if (key == "MemAvailable:") return kb * 1024;
    return 0;
}

std::vector<BenchRow> bench(const scene::Scene& scene, const BenchOptions& options, std::ostream* log)
{
    if (options.repeats < 1) throw ParameterError("bench: repeats must be positive");
    struct Job {
        size_t n;
        int side;
    };
    std::vector<Job> jobs;
    for (size_t n : options.counts)
        for (int side : options.sizes) jobs.push_back({n, side});
    if (options.large_row) {
        const Job large{2'500'000, 1024};
        const bool listed = std::any_of(jobs.begin(), jobs.end(),
                                        [&](const Job& j) { return j.n == large.n && j.side == large.side; });
        if (!listed) {
            const size_t need = bench_bytes(large.n, large.side, large.side, options.sh_coeffs);
            const size_t have = available_memory();
            if (have == 0 || need < have * 8 / 10) jobs.push_back(large);
            else if (log)
                *log << "bench: skipping N=2500000 at 1024x1024, needs about " << need / (1 << 20) << " MiB, "
                     << have / (1 << 20) << " MiB available\n";
        }
    }

    scene::Scene src = scene;
    if (!src.bank.baked) scene::bake_attributes(src);
    const Vec3d center = body_center(src, src.natural);
    const std::array<double, 3> bg{0.0, 0.0, 0.0};
    std::vector<BenchRow> rows;
    for (const auto& job : jobs) {
        auto player = scene::Playback::resampled(src, job.n, options.seed ^ job.n, options.sh_coeffs);
        const auto cam = orbit_camera(center, 3.5, 0.0, 0.0, 35.0, job.side, job.side);
        for (int w = 0; w < options.warmup; ++w) player.render(src.natural, cam, bg);
        std::vector<scene::FrameTiming> t(static_cast<size_t>(options.repeats));
        for (auto& ti : t) player.render(src.natural, cam, bg, &ti);
        std::sort(t.begin(), t.end(), [](const auto& x, const auto& y) { return x.total_ms() < y.total_ms(); });
        const auto& med = t[t.size() / 2];
        BenchRow r;
        r.n = job.n;
        r.width = r.height = job.side;
        r.ms_raster = med.raster_ms;
        r.ms_total = med.total_ms();
        r.fps = 1000.0 / r.ms_total;
        r.ms_lbs = med.lbs_ms;
        r.ms_primitives = med.primitives_ms;
        r.ms_transform = med.transform_ms;
        if (log)
            *log << "bench: N=" << r.n << " " << r.width << "x" << r.height << " total " << r.ms_total
                 << " ms (raster " << r.ms_raster << ")\n";
        rows.push_back(r);
    }
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows)
{
    std::ostringstream s;
    s << "N,W,H,ms_raster,ms_total,fps\n";
    s << std::fixed;
    for (const auto& r : rows)
        s << r.n << ',' << r.width << ',' << r.height << ',' << std::setprecision(3) << r.ms_raster << ','
          << r.ms_total << ',' << std::setprecision(2) << r.fps << '\n';
    return s.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"gavatar: animatable Gaussian avatars", "gavatar"};
    try {
        return dispatch(app, args, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ParameterError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const TrainingAborted& e) {
        err << "error: " << e.what() << '\n';
        return kAborted;
    } catch (const EmptyResult& e) {
        err << "error: " << e.what() << '\n';
        return kEmpty;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

} // namespace gavatar::cli
