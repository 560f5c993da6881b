#pragma once

// Training orchestration: camera and pose schedules, the composite loss and
// the Adam loop with densification ticks.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gavatar/adam.hpp"
#include "gavatar/guidance.hpp"
#include "gavatar/scene.hpp"

namespace gavatar::optim {

struct LossWeights {
    double sds = 1.0;
    double pos = 0.1;
    double eik = 0.1;
    double alpha = 1.0;
    double nsds = 0.5;
    double nc = 0.01;

    std::array<double, 6> values() const { return {sds, pos, eik, alpha, nsds, nc}; }
};

struct LearningRates {
    double positions = 0.00016;
    double attributes = 0.001;
    double sdf = 0.0001;
    double kernel = 0.001;
    double correctives = 0.0001;
    double shape = 0.0003;
    double natural_pose = 0.0001;
};

inline constexpr std::array<std::string_view, 6> kTermNames = {"sds", "pos", "eik", "alpha", "nsds", "nc"};

struct LossParts {
    double sds = 0.0;
    double pos = 0.0;
    double eik = 0.0;
    double alpha = 0.0;
    double nsds = 0.0;
    double nc = 0.0;

    std::array<double, 6> values() const { return {sds, pos, eik, alpha, nsds, nc}; }
};

// Weighted sum of the six terms. Throws NumericError naming the first
// non-finite term.
double total_loss(const LossWeights& weights, const LossParts& parts);

enum class CameraMode { FullBody = 0, Face, BackHead, Arms, UpperBody, LowerBody };
inline constexpr int kCameraModes = 6;
std::string_view camera_mode_name(CameraMode mode);

struct PartPreset {
    std::vector<Vec3d> targets; // one is picked uniformly
    double radius = 1.0;
    double azimuth_min = 0.0, azimuth_max = 360.0; // degrees, 0 = in front (+z)
};

struct CameraSample {
    render::Camera camera;
    CameraMode mode = CameraMode::FullBody;
    Vec3d target;
    double radius = 0.0;
    double azimuth = 0.0;   // degrees
    double elevation = 0.0; // degrees
    double fovy = 0.0;      // degrees
};

struct CameraRanges {
    double radius = 3.5;
    double elevation_min = -10.0, elevation_max = 45.0; // degrees
    double fovy_min = 26.0, fovy_max = 45.0;            // degrees
    double azimuth_min = 0.0, azimuth_max = 360.0;      // degrees
};

struct CameraSampler {
    double radius = 3.5;
    double elevation_min = -10.0, elevation_max = 45.0;
    double fovy_min = 26.0, fovy_max = 45.0;
    double azimuth_min = 0.0, azimuth_max = 360.0;
    int width = 512, height = 512;
    Vec3d center;
    std::array<PartPreset, kCameraModes> presets; // indexed by CameraMode; FullBody unused

    // Center and part framings from the body posed by params.
    static CameraSampler for_body(const body::BodyModel& body, const body::BodyParams& params, int width, int height);
    void set_ranges(const CameraRanges& r);

    // Full body only before zoom-ins activate, then all six modes evenly.
    CameraMode sample_mode(std::mt19937_64& rng, bool zoom_in) const;
    CameraSample sample(std::mt19937_64& rng, CameraMode mode) const;
};

class PoseSampler {
public:
    explicit PoseSampler(std::vector<body::BodyParams> animation = {}) : animation_(std::move(animation)) {}

    struct Choice {
        bool natural = true;
        int index = -1; // animation pose when !natural
    };

    // Natural pose only before natural_only, then alternating with random
    // animation poses (natural on even iterations).
    Choice choose(int64_t iteration, int64_t natural_only, std::mt19937_64& rng) const;
    // Animation poses keep the learnable shape of the natural parameters.
    body::BodyParams params(const Choice& choice, const body::BodyParams& natural) const;
    const std::vector<body::BodyParams>& animation() const { return animation_; }

private:
    std::vector<body::BodyParams> animation_;
};

struct TrainConfig {
    int64_t iterations = 20000;
    int64_t natural_only = 3000;
    int64_t zoom_in_start = 5000;
    int64_t densify_interval = 100;
    int64_t densify_until = -1; // -1: through the last iteration
    size_t gaussian_cap = 2'000'000;
    int mesh_interval = 10;
    int mesh_resolution = 64;
    LossWeights weights;
    LearningRates lr;
    int width = 512, height = 512;
    std::array<double, 3> background{0.0, 0.0, 0.0};
    uint64_t seed = 0;
    soup::DensifyConfig densify;
    CameraRanges camera;
    int eikonal_centers = 2048;
    int eikonal_perturbed = 2048;
    double eikonal_std = 0.02;
    std::string prompt;
    double t_min = 0.02, t_max = 0.98;
    double t_max_final = 0.5; // upper noise bound annealed linearly to this
    double divergence_threshold = 1e6;
    int64_t snapshot_interval = 100;
    bool log_timing = true;

    void validate() const;
    bool mesh_terms() const { return weights.alpha > 0.0 || weights.nsds > 0.0 || weights.nc > 0.0; }
};

struct StepSample {
    render::Camera camera;
    CameraMode mode = CameraMode::FullBody;
    body::BodyParams params;
    bool natural = true;
    std::array<double, 3> background{0.0, 0.0, 0.0};
    guidance::GuidanceContext context;
};

struct Evaluation {
    LossParts parts;
    double total = 0.0;
    render::RenderTarget render;
    std::optional<double> photometric_mse;
};

// One forward (and, with grad, backward) pass of the composite loss. When
// mesh is non-null and holds a mesh, its vertices are refreshed from the
// current SDF before the mesh terms are evaluated.
Evaluation evaluate(const scene::Scene& scene, const StepSample& sample, guidance::Guidance& guidance,
                    const LossWeights& weights, scene::MeshState* mesh, std::span<const Vec3d> eikonal_points,
                    scene::SceneGrad* grad);

struct StepRecord {
    int64_t iteration = 0;
    LossParts parts;
    double total = 0.0;
    size_t gaussians = 0;
    bool natural_pose = true;
    CameraMode mode = CameraMode::FullBody;
    int view = -1;
    bool densify_tick = false;
    int64_t skipped = 0;
    std::optional<double> psnr;
    double ms = 0.0;
};

// One JSON object per line; ms is omitted when timing is off.
std::string metrics_line(const StepRecord& record, const LossWeights& weights, bool timing);

struct TrainInputs {
    std::vector<body::BodyParams> animation;
    // Fixed training cameras; when present each step picks one and sets
    // the guidance context's view index instead of sampling a camera.
    std::vector<render::Camera> views;
};

class Trainer {
public:
    Trainer(scene::Scene& scene, guidance::Guidance& guidance, TrainConfig config, TrainInputs inputs = {});

    // Runs iteration() + 1. Throws TrainingAborted (scene restored to the
    // last snapshot) on divergence, non-finite losses or guidance failure.
    StepRecord step();
    std::vector<StepRecord> run(std::ostream* metrics = nullptr,
                                const std::function<void(const StepRecord&)>& on_step = {});

    // Draws the pose, camera and guidance context for an iteration.
    StepSample sample(int64_t iteration);

    int64_t iteration() const { return iteration_; }
    const TrainConfig& config() const { return config_; }
    Adam& adam() { return adam_; }
    const std::vector<int64_t>& densify_ticks() const { return densify_ticks_; }
    const scene::MeshState& mesh() const { return mesh_; }

private:
    void densify();
    void sync_from_scene();
    void sync_to_scene();

    scene::Scene& scene_;
    guidance::Guidance& guidance_;
    TrainConfig config_;
    TrainInputs inputs_;
    CameraSampler cameras_;
    PoseSampler poses_;
    std::mt19937_64 rng_;
    Adam adam_;
    scene::SceneGrad grad_;
    std::vector<double> kernel_params_;
    std::vector<double> pose_params_;
    std::vector<double> grad_accum_;
    std::vector<uint32_t> grad_count_;
    scene::MeshState mesh_;
    std::optional<scene::Scene> snapshot_;
    std::vector<int64_t> densify_ticks_;
    int64_t iteration_ = 0;
};

std::vector<StepRecord> train(scene::Scene& scene, guidance::Guidance& guidance, const TrainConfig& config,
                              TrainInputs inputs = {}, std::ostream* metrics = nullptr);

} // namespace gavatar::optim
