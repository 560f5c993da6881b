#pragma once

// The full avatar: body rig, Gaussian bank, neural fields and opacity kernel,
// with the differentiable render path that ties them together.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gavatar/body_template.hpp"
#include "gavatar/gaussian_soup.hpp"
#include "gavatar/mesh_geometry.hpp"
#include "gavatar/neural_fields.hpp"
#include "gavatar/primitive_rig.hpp"
#include "gavatar/splat_renderer.hpp"

namespace gavatar::scene {

struct SceneConfig {
    int anchor_grid = 64;           // uv cells per side; 64 gives K = 4096 on the capsule person
    int gaussians_per_primitive = 64; // perfect cube, or 16 for a 4 x 4 x 1 sheet
    int corrective_hidden = 128;
    int field_hidden = 64;
    fields::HashGridConfig attribute_grid{8, 2, 19, 16, 1.5};
    fields::HashGridConfig sdf_grid{16, 2, 19, 16, 1.5};
    uint64_t seed = 0;

    void validate() const;
};

struct Scene {
    body::BodyModel body;
    body::AnchorSet anchors;
    rig::CorrectiveNets nets;
    soup::GaussianBank bank;
    fields::AttributeField attributes;
    fields::SdfField sdf;
    fields::OpacityKernel kernel;
    body::BodyParams natural; // learnable natural pose and shape
    body::BodyParams rest;    // fixed canonical pose

    // Primitives at the rest pose with zero shape and no correctives; the
    // frame in which the fields are queried. Derived from body and anchors.
    rig::Primitives canonical;

    size_t primitive_count() const { return anchors.size(); }
    void update_canonical();
    void validate() const;
};

// Capsule person by default.
Scene make_scene(const SceneConfig& config);
Scene make_scene(const SceneConfig& config, body::BodyModel body);

// Rest-pose world position of every Gaussian.
std::vector<Vec3d> canonical_centers(const Scene& scene);

// Signed distance to the capsule shell at the rest pose.
double rest_shell_sdf(const Scene& scene, const Vec3d& p);

// Regresses the SDF to the rest-pose body shell at the Gaussian centers and
// sets every world scale to the pretraining target.
fields::PretrainReport pretrain_scene(Scene& scene, const fields::PretrainOptions& options = {});

// Local (primitive-frame) attributes of every Gaussian.
struct LocalAttributes {
    std::vector<Quatd> rotation;
    std::vector<Vec3d> scale;
    std::vector<double> sh; // 48 per Gaussian
    std::vector<double> opacity;
    std::vector<Vec3d> world_scale; // rest-frame scale in meters

    size_t size() const { return rotation.size(); }
};

// Field query at the canonical centers (or the baked copy when the bank is
// baked).
LocalAttributes local_attributes(const Scene& scene);

// Evaluates the fields once and freezes the results into the bank.
void bake_attributes(Scene& scene);

struct FrameTiming {
    double lbs_ms = 0.0;
    double primitives_ms = 0.0;
    double transform_ms = 0.0;
    double raster_ms = 0.0;
    double total_ms() const { return lbs_ms + primitives_ms + transform_ms + raster_ms; }
};

rig::Primitives posed_primitives(const Scene& scene, const body::BodyParams& params, FrameTiming* timing = nullptr);

render::GaussianCloud world_cloud(const rig::Primitives& prims, const soup::GaussianBank& bank,
                                  const LocalAttributes& attrs);

// Playback path: pose, transform and rasterize one frame.
render::RenderTarget render_frame(const Scene& scene, const body::BodyParams& params, const render::Camera& cam,
                                  const std::array<double, 3>& background, FrameTiming* timing = nullptr);

// Baked playback. Attributes are held once and the world cloud buffer is
// reused, so a frame costs posing, the world transform and the raster. The
// scene must outlive the player.
class Playback {
public:
    // Uses the baked bank, or evaluates the fields once when not baked.
    // sh_coeffs in {1, 4, 9, 16} truncates the stored SH.
    explicit Playback(const Scene& scene, int sh_coeffs = 16);

    // n Gaussians spread evenly over the primitives, each copying the
    // attributes of a source Gaussian of its primitive at a random local
    // position. Deterministic in seed.
    static Playback resampled(const Scene& scene, size_t n, uint64_t seed, int sh_coeffs = 1);

    render::RenderTarget render(const body::BodyParams& params, const render::Camera& cam,
                                const std::array<double, 3>& background, FrameTiming* timing = nullptr);
    size_t size() const { return primitive_.size(); }

private:
    struct Empty {};
    Playback(const Scene& scene, Empty) : scene_(&scene) {}

    const Scene* scene_;
    std::vector<int32_t> primitive_;
    std::vector<Vec3d> local_position_;
    std::vector<Quatd> local_rotation_;
    std::vector<Vec3d> local_scale_;
    render::GaussianCloud cloud_;
};

// Gradients for every learnable parameter, laid out like the parameters.
struct SceneGrad {
    std::vector<double> positions;
    fields::FieldGrad attributes;
    fields::FieldGrad sdf;
    std::vector<double> kernel; // d log_gamma, d log_lambda
    std::vector<double> nets;
    std::vector<double> shape;
    std::vector<double> pose; // 3 per joint, natural pose only
    std::vector<double> screen_grad; // per Gaussian, not a parameter gradient
    std::vector<uint8_t> visible;    // per Gaussian

    static SceneGrad like(const Scene& scene);
    void zero();
};

// Retained differentiable forward pass for one pose.
class ScenePass {
public:
    ScenePass(const Scene& scene, const body::BodyParams& params);

    const render::GaussianCloud& cloud() const { return cloud_; }
    const LocalAttributes& attributes() const { return attrs_; }
    const rig::Primitives& primitives() const { return rig_.primitives(); }

    // Chains dL/dcloud into grad. Pose gradients go to grad.pose only when
    // natural_pose is set.
    void backward(const render::CloudGrad& dcloud, SceneGrad& grad, bool natural_pose);

private:
    const Scene* scene_;
    rig::RigPass rig_;
    std::vector<Vec3d> centers_;
    std::optional<fields::HashField::Forward> attr_fwd_, sdf_fwd_;
    LocalAttributes attrs_;
    render::GaussianCloud cloud_;
};

// Canonical mesh extracted from the SDF plus the skinning binding that poses
// it: each vertex follows the blended transform of its nearest rest-pose
// template vertex.
struct MeshState {
    mesh::TetGrid grid;
    mesh::MeshExtraction extraction;
    std::vector<uint32_t> binding;
    int64_t extracted_at = -1;

    bool empty() const { return extraction.mesh.empty(); }
};

MeshState extract_mesh(const Scene& scene, int resolution);
void extract_mesh(const Scene& scene, MeshState& state);
void refresh_mesh(const Scene& scene, MeshState& state);

// Per-vertex affine maps x -> L x + t taking canonical mesh vertices to the
// given pose.
struct MeshPosing {
    std::vector<Mat3d> linear;
    std::vector<Vec3d> offset;
};
MeshPosing mesh_posing(const Scene& scene, const MeshState& state, const body::BodyParams& params);
mesh::TriMesh pose_mesh(const mesh::TriMesh& canonical, const MeshPosing& posing);

// Accumulates dL/dpose (per joint) and dL/dshape given gradients of the
// posed mesh vertices.
void mesh_posing_backward(const Scene& scene, const MeshState& state, const body::BodyParams& params,
                          std::span<const Vec3d> dposed, std::span<Vec3d> dpose, std::span<double> dshape);

} // namespace gavatar::scene
