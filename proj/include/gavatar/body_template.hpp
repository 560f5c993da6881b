#pragma once

// Parametric skinned body: skeleton, linear blend skinning, and surface
// anchors placed on a uv grid.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "gavatar/errors.hpp"
#include "gavatar/math.hpp"

namespace gavatar::body {

struct Joint {
    std::string name;
    int parent = -1;
    Quatd rest_rotation = Quatd::identity();
    Vec3d rest_translation; // offset from the parent joint, meters
};

// Joints are topologically sorted: parent index < child index, one root.
struct Skeleton {
    std::vector<Joint> joints;

    size_t size() const { return joints.size(); }
    void validate() const;
};

// Pose is per-joint axis-angle (radians); shape is a per-bone length offset
// (meters) applied along each joint's rest offset direction.
struct BodyParams {
    std::vector<Vec3d> pose;
    std::vector<double> shape;

    static BodyParams zeros(size_t joint_count);
    void validate(size_t joint_count, double shape_range = 0.25) const;
};

struct TemplateMesh {
    std::vector<Vec3d> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<std::array<int, 4>> skin_joints;
    std::vector<std::array<double, 4>> skin_weights;
    std::vector<Vec2d> uv;

    size_t vertex_count() const { return vertices.size(); }
    void validate(size_t joint_count) const;
};

// Rigid segment-swept sphere bound to one joint; used for the analytic body
// shell distance.
struct Capsule {
    int joint = 0;
    Vec3d a, b; // rest-pose endpoints, meters
    double radius = 0.0;
};

struct BodyModel {
    Skeleton skeleton;
    TemplateMesh mesh;
    std::vector<Capsule> capsules;
};

struct CapsulePersonOptions {
    int segments_around = 24;
    int rings_along = 19;
};

// Procedural 24-joint "capsule person" in T-pose, y up, facing +z, pelvis at
// the origin. The uv atlas tiles the full unit square. Stored values are
// rounded to float32 so the asset round-trips exactly.
BodyModel make_capsule_person(const CapsulePersonOptions& options = {});

// Fixed canonical A-pose (arms lowered 45 degrees).
BodyParams canonical_pose(const Skeleton& skeleton);

template <class T>
struct RigidTransform {
    Mat3<T> rotation = Mat3<T>::identity();
    Vec3<T> translation;

    Vec3<T> apply(const Vec3<T>& v) const { return rotation * v + translation; }
};

// Skinning transforms A_j = G_j(pose, shape) * G_j(0, 0)^-1.
template <class T>
std::vector<RigidTransform<T>> skinning_transforms(const Skeleton& skeleton, std::span<const Vec3<T>> pose,
                                                    std::span<const T> shape);

// v' = v + sum_j w_j ((R_j - I) v + t_j); exact identity at rest.
template <class T>
Vec3<T> skin_vertex(const TemplateMesh& mesh, size_t vertex, std::span<const RigidTransform<T>> transforms);

TemplateMesh skin_mesh(const TemplateMesh& mesh, const Skeleton& skeleton, const BodyParams& params);

// Global joint positions for the given parameters.
std::vector<Vec3d> joint_positions(const Skeleton& skeleton, const BodyParams& params);

// Signed distance to the union of capsules posed by the skinning transforms
// (negative inside).
double body_shell_sdf(const BodyModel& body, std::span<const RigidTransform<double>> transforms, const Vec3d& p);

struct AnchorBinding {
    int triangle = -1;
    std::array<double, 3> bary{};
};

template <class T>
struct AnchorFrame {
    Vec3<T> position;
    Quat<T> rotation;
    Vec3<T> scale;
};

// Per-primitive rest anchors with the surface binding used to re-evaluate
// them on a posed mesh. Scale is the full uv-cell edge length per axis.
struct AnchorSet {
    int grid_n = 0;
    std::vector<int> cells; // row-major uv cell index per active anchor
    std::vector<AnchorBinding> bindings;
    std::vector<Vec3d> positions;
    std::vector<Quatd> rotations;
    std::vector<Vec3d> scales;

    // Faces incident to each vertex's weld group (vertices sharing a rest
    // position), used for area-weighted vertex normals.
    std::vector<std::vector<int>> vertex_faces;
    // Vertices whose posed positions the anchor frames depend on.
    std::vector<int> support_vertices;

    size_t size() const { return bindings.size(); }
};

AnchorSet compute_anchors(const TemplateMesh& mesh, int grid_n);

// Evaluates every anchor frame on the mesh skinned by the given transforms.
template <class T>
std::vector<AnchorFrame<T>> posed_anchor_frames(const TemplateMesh& mesh, const AnchorSet& anchors,
                                                std::span<const RigidTransform<T>> transforms);

// Area-weighted vertex normal using the weld-group face list.
template <class T>
Vec3<T> vertex_normal(const TemplateMesh& mesh, const AnchorSet& anchors, std::span<const Vec3<T>> positions,
                      int vertex);

} // namespace gavatar::body
