#include "gavatar/body_template.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

namespace gavatar::body {
namespace {

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }
Vec3d f32(const Vec3d& v) { return {f32(v.x), f32(v.y), f32(v.z)}; }

template <class T>
Mat3<T> mat_minus_identity(const Mat3<T>& m)
{
    Mat3<T> r = m;
    r.m[0] = r.m[0] - T(1.0);
    r.m[4] = r.m[4] - T(1.0);
    r.m[8] = r.m[8] - T(1.0);
    return r;
}

struct Rect {
    double x0, y0, x1, y1;
};

// Squarified treemap layout of areas (sorted descending) into the unit square.
std::vector<Rect> squarify(const std::vector<double>& areas)
{
    const double total = std::accumulate(areas.begin(), areas.end(), 0.0);
    std::vector<double> a(areas.size());
    for (size_t i = 0; i < areas.size(); ++i) a[i] = areas[i] / total;

    std::vector<Rect> out(a.size());
    Rect free{0.0, 0.0, 1.0, 1.0};
    size_t i = 0;
    auto worst = [](const std::vector<double>& row, double side) {
        const double s = std::accumulate(row.begin(), row.end(), 0.0);
        double w = 0.0;
        for (double r : row) {
            const double thickness = s / side;
            const double len = r / thickness;
            w = std::max(w, std::max(thickness / len, len / thickness));
        }
        return w;
    };
    while (i < a.size()) {
        const double fw = free.x1 - free.x0;
        const double fh = free.y1 - free.y0;
        const double side = std::min(fw, fh);
        std::vector<double> row{a[i]};
        size_t j = i + 1;
        while (j < a.size()) {
            std::vector<double> next = row;
            next.push_back(a[j]);
            if (worst(next, side) > worst(row, side)) break;
            row = std::move(next);
            ++j;
        }
        const double s = std::accumulate(row.begin(), row.end(), 0.0);
        const bool last = j == a.size();
        if (fw >= fh) {
            // Column along the left edge.
            const double thickness = last ? fw : s / fh;
            double y = free.y0;
            for (size_t k = 0; k < row.size(); ++k) {
                const double len = (k + 1 == row.size()) ? free.y1 - y : row[k] / s * fh;
                out[i + k] = {free.x0, y, free.x0 + thickness, y + len};
                y += len;
            }
            free.x0 += thickness;
        } else {
            const double thickness = last ? fh : s / fw;
            double x = free.x0;
            for (size_t k = 0; k < row.size(); ++k) {
                const double len = (k + 1 == row.size()) ? free.x1 - x : row[k] / s * fw;
                out[i + k] = {x, free.y0, x + len, free.y0 + thickness};
                x += len;
            }
            free.y0 += thickness;
        }
        i = j;
    }
    return out;
}

struct CapsuleSpec {
    int joint;
    int child; // blend partner near the far end, -1 for none
    Vec3d a, b;
    double radius;
};

// Capsule surface as a lat-long grid mapped into a uv rectangle.
void emit_capsule(const CapsuleSpec& c, const Rect& rect, const CapsulePersonOptions& opt, TemplateMesh& mesh)
{
    const Vec3d axis_full = c.b - c.a;
    const double length = norm(axis_full);
    const Vec3d axis = axis_full / length;
    Vec3d helper = std::abs(axis.y) < 0.9 ? Vec3d{0, 1, 0} : Vec3d{1, 0, 0};
    const Vec3d e1 = normalized(cross(axis, helper));
    const Vec3d e2 = cross(axis, e1);

    const double r = c.radius;
    const double pole_gap = 0.15; // radians kept open at each pole
    const double arc_total = std::numbers::pi * r + length;
    const double arc_min = r * pole_gap;
    const double arc_max = arc_total - r * pole_gap;

    const int n_around = opt.segments_around;
    const int n_along = opt.rings_along;

    // Map the longer uv side onto the longer surface direction.
    const double rect_w = rect.x1 - rect.x0;
    const double rect_h = rect.y1 - rect.y0;
    const double circumference = 2.0 * std::numbers::pi * r;
    const bool around_on_u = (circumference >= arc_total) == (rect_w >= rect_h);

    const int base = static_cast<int>(mesh.vertices.size());
    for (int j = 0; j < n_along; ++j) {
        const double v = static_cast<double>(j) / (n_along - 1);
        const double arc = arc_min + v * (arc_max - arc_min);
        double axial, rho;
        if (arc < 0.5 * std::numbers::pi * r) {
            const double phi = arc / r;
            rho = r * std::sin(phi);
            axial = -r * std::cos(phi);
        } else if (arc < 0.5 * std::numbers::pi * r + length) {
            rho = r;
            axial = arc - 0.5 * std::numbers::pi * r;
        } else {
            const double phi = (arc_total - arc) / r;
            rho = r * std::sin(phi);
            axial = length + r * std::cos(phi);
        }
        const double s = axial / length;
        const double w_child = c.child >= 0 ? 0.5 * std::clamp((s - 0.75) / 0.25, 0.0, 1.0) : 0.0;
        Vec3d first;
        for (int i = 0; i <= n_around; ++i) {
            const double u = static_cast<double>(i) / n_around;
            Vec3d p;
            if (i == n_around) {
                p = first; // seam duplicate at exactly the same position
            } else {
                const double ang = 2.0 * std::numbers::pi * u;
                p = f32(c.a + axis * axial + (e1 * std::cos(ang) + e2 * std::sin(ang)) * rho);
                if (i == 0) first = p;
            }
            mesh.vertices.push_back(p);
            const double uu = around_on_u ? u : v;
            const double vv = around_on_u ? v : u;
            mesh.uv.push_back({f32(rect.x0 + uu * rect_w), f32(rect.y0 + vv * rect_h)});
            const double wc = f32(w_child);
            mesh.skin_joints.push_back({c.joint, c.child >= 0 ? c.child : 0, 0, 0});
            mesh.skin_weights.push_back({f32(1.0 - wc), wc, 0.0, 0.0});
        }
    }
    const int cols = n_around + 1;
    for (int j = 0; j + 1 < n_along; ++j) {
        for (int i = 0; i < n_around; ++i) {
            const int v00 = base + j * cols + i;
            const int v10 = v00 + 1;
            const int v01 = v00 + cols;
            const int v11 = v01 + 1;
            // Ordered so face normals point away from the axis.
            mesh.triangles.push_back({v00, v10, v11});
            mesh.triangles.push_back({v00, v11, v01});
        }
    }
    // Fix winding if the first face points inward.
    const auto& t = mesh.triangles[mesh.triangles.size() - static_cast<size_t>(2 * n_around * (n_along - 1))];
    const Vec3d n = cross(mesh.vertices[t[1]] - mesh.vertices[t[0]], mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    const Vec3d centroid = (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0;
    const Vec3d rel = centroid - c.a;
    const Vec3d radial = rel - axis * dot(rel, axis);
    if (dot(n, radial) < 0.0) {
        for (size_t k = mesh.triangles.size() - static_cast<size_t>(2 * n_around * (n_along - 1));
             k < mesh.triangles.size(); ++k)
            std::swap(mesh.triangles[k][1], mesh.triangles[k][2]);
    }
}

double capsule_sdf(const Vec3d& p, const Vec3d& a, const Vec3d& b, double r)
{
    const Vec3d ab = b - a;
    const double t = std::clamp(dot(p - a, ab) / dot(ab, ab), 0.0, 1.0);
    return norm(p - (a + ab * t)) - r;
}

bool point_in_triangle_uv(const Vec2d& p, const Vec2d& a, const Vec2d& b, const Vec2d& c,
                          std::array<double, 3>& bary)
{
    const double det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
    if (std::abs(det) < 1e-18) return false;
    const double l0 = ((b.y - c.y) * (p.x - c.x) + (c.x - b.x) * (p.y - c.y)) / det;
    const double l1 = ((c.y - a.y) * (p.x - c.x) + (a.x - c.x) * (p.y - c.y)) / det;
    const double l2 = 1.0 - l0 - l1;
    constexpr double tol = -1e-12;
    if (l0 < tol || l1 < tol || l2 < tol) return false;
    bary = {l0, l1, l2};
    return true;
}

template <class T>
AnchorFrame<T> frame_from_triangle(const std::array<Vec3<T>, 3>& p, const std::array<Vec3<T>, 3>& n,
                                   const std::array<Vec2d, 3>& uv, const std::array<double, 3>& bary, int grid_n)
{
    AnchorFrame<T> f;
    f.position = p[0] * T(bary[0]) + p[1] * T(bary[1]) + p[2] * T(bary[2]);
    const Vec3<T> normal = normalized(n[0] * T(bary[0]) + n[1] * T(bary[1]) + n[2] * T(bary[2]));

    const Vec3<T> e1 = p[1] - p[0];
    const Vec3<T> e2 = p[2] - p[0];
    const double du1 = uv[1].x - uv[0].x, dv1 = uv[1].y - uv[0].y;
    const double du2 = uv[2].x - uv[0].x, dv2 = uv[2].y - uv[0].y;
    const double det = du1 * dv2 - du2 * dv1;
    const Vec3<T> pu = (e1 * T(dv2) - e2 * T(dv1)) / T(det);
    const Vec3<T> pv = (e2 * T(du1) - e1 * T(du2)) / T(det);

    const Vec3<T> x = normalized(pu - normal * dot(pu, normal));
    const Vec3<T> y = cross(normal, x);
    f.rotation = mat_to_quat(Mat3<T>::from_columns(x, y, normal));

    const T cell = T(1.0 / grid_n);
    const T su = norm(pu) * cell;
    const T sv = norm(pv) * cell;
    f.scale = {su, sv, (su + sv) * T(0.5)};
    return f;
}

} // namespace

void Skeleton::validate() const
{
    if (joints.empty()) throw ParameterError("skeleton: no joints");
    int roots = 0;
    for (size_t j = 0; j < joints.size(); ++j) {
        const int p = joints[j].parent;
        if (p < 0) {
            ++roots;
            if (p != -1) throw ParameterError("skeleton: invalid parent index");
        } else if (static_cast<size_t>(p) >= j) {
            throw ParameterError("skeleton: joints must be topologically sorted");
        }
    }
    if (roots != 1) throw ParameterError("skeleton: exactly one root required");
}

BodyParams BodyParams::zeros(size_t joint_count)
{
    BodyParams p;
    p.pose.assign(joint_count, Vec3d{});
    p.shape.assign(joint_count, 0.0);
    return p;
}

void BodyParams::validate(size_t joint_count, double shape_range) const
{
    if (pose.size() != joint_count || shape.size() != joint_count)
        throw ParameterError("body params: expected " + std::to_string(joint_count) + " joints");
    for (const auto& aa : pose) {
        if (!(norm(aa) < 2.0 * std::numbers::pi)) throw ParameterError("body params: axis-angle magnitude >= 2pi");
    }
    for (double b : shape) {
        if (!(std::abs(b) <= shape_range)) throw ParameterError("body params: shape offset out of range");
    }
}

void TemplateMesh::validate(size_t joint_count) const
{
    const size_t n = vertices.size();
    if (skin_joints.size() != n || skin_weights.size() != n || uv.size() != n)
        throw ParameterError("template: per-vertex array size mismatch");
    for (size_t v = 0; v < n; ++v) {
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
            if (skin_joints[v][k] < 0 || static_cast<size_t>(skin_joints[v][k]) >= joint_count)
                throw ParameterError("template: skin weight references invalid joint");
            sum += skin_weights[v][k];
        }
        if (std::abs(sum - 1.0) > 1e-6) throw ParameterError("template: skin weights must sum to 1");
        if (uv[v].x < 0.0 || uv[v].x > 1.0 || uv[v].y < 0.0 || uv[v].y > 1.0)
            throw ParameterError("template: uv outside [0,1]");
    }
    for (const auto& t : triangles)
        for (int k = 0; k < 3; ++k)
            if (t[k] < 0 || static_cast<size_t>(t[k]) >= n) throw ParameterError("template: triangle index out of range");
}

BodyModel make_capsule_person(const CapsulePersonOptions& options)
{
    BodyModel body;
    struct J {
        const char* name;
        int parent;
        Vec3d pos;
    };
    const std::array<J, 24> js{{
        {"pelvis", -1, {0.0, 0.0, 0.0}},
        {"left_hip", 0, {0.09, -0.07, 0.0}},
        {"right_hip", 0, {-0.09, -0.07, 0.0}},
        {"spine1", 0, {0.0, 0.11, 0.0}},
        {"left_knee", 1, {0.10, -0.48, 0.0}},
        {"right_knee", 2, {-0.10, -0.48, 0.0}},
        {"spine2", 3, {0.0, 0.24, 0.0}},
        {"left_ankle", 4, {0.10, -0.88, 0.0}},
        {"right_ankle", 5, {-0.10, -0.88, 0.0}},
        {"spine3", 6, {0.0, 0.30, 0.0}},
        {"left_foot", 7, {0.10, -0.94, 0.12}},
        {"right_foot", 8, {-0.10, -0.94, 0.12}},
        {"neck", 9, {0.0, 0.50, 0.0}},
        {"left_collar", 9, {0.07, 0.42, 0.0}},
        {"right_collar", 9, {-0.07, 0.42, 0.0}},
        {"head", 12, {0.0, 0.58, 0.0}},
        {"left_shoulder", 13, {0.18, 0.44, 0.0}},
        {"right_shoulder", 14, {-0.18, 0.44, 0.0}},
        {"left_elbow", 16, {0.44, 0.44, 0.0}},
        {"right_elbow", 17, {-0.44, 0.44, 0.0}},
        {"left_wrist", 18, {0.68, 0.44, 0.0}},
        {"right_wrist", 19, {-0.68, 0.44, 0.0}},
        {"left_hand", 20, {0.78, 0.44, 0.0}},
        {"right_hand", 21, {-0.78, 0.44, 0.0}},
    }};
    for (const auto& j : js) {
        Joint joint;
        joint.name = j.name;
        joint.parent = j.parent;
        const Vec3d parent_pos = j.parent >= 0 ? js[static_cast<size_t>(j.parent)].pos : Vec3d{};
        joint.rest_translation = f32(j.pos - parent_pos);
        body.skeleton.joints.push_back(joint);
    }

    std::vector<CapsuleSpec> specs = {
        {0, -1, {-0.08, -0.05, 0.0}, {0.08, -0.05, 0.0}, 0.12},
        {3, 6, {0.0, 0.02, 0.0}, {0.0, 0.20, 0.0}, 0.13},
        {6, 9, {0.0, 0.24, 0.0}, {0.0, 0.38, 0.0}, 0.14},
        {9, -1, {-0.14, 0.42, 0.0}, {0.14, 0.42, 0.0}, 0.07},
        {12, 15, {0.0, 0.47, 0.0}, {0.0, 0.56, 0.0}, 0.05},
        {15, -1, {0.0, 0.66, 0.01}, {0.0, 0.72, 0.01}, 0.10},
    };
    for (int side = 0; side < 2; ++side) {
        const double sx = side == 0 ? 1.0 : -1.0;
        const int o = side; // left joints are odd-offset by 0, right by 1
        specs.push_back({16 + o, 18 + o, {sx * 0.18, 0.44, 0.0}, {sx * 0.44, 0.44, 0.0}, 0.05});
        specs.push_back({18 + o, 20 + o, {sx * 0.44, 0.44, 0.0}, {sx * 0.68, 0.44, 0.0}, 0.04});
        specs.push_back({20 + o, 22 + o, {sx * 0.70, 0.44, 0.0}, {sx * 0.80, 0.44, 0.0}, 0.035});
        specs.push_back({1 + o, 4 + o, {sx * 0.10, -0.07, 0.0}, {sx * 0.10, -0.48, 0.0}, 0.075});
        specs.push_back({4 + o, 7 + o, {sx * 0.10, -0.48, 0.0}, {sx * 0.10, -0.88, 0.0}, 0.055});
        specs.push_back({7 + o, 10 + o, {sx * 0.10, -0.92, -0.02}, {sx * 0.10, -0.93, 0.14}, 0.04});
    }

    std::vector<double> areas;
    for (const auto& c : specs) {
        const double len = norm(c.b - c.a);
        areas.push_back(4.0 * std::numbers::pi * c.radius * c.radius + 2.0 * std::numbers::pi * c.radius * len);
    }
    std::vector<size_t> order(specs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) { return areas[x] > areas[y]; });
    std::vector<double> sorted_areas;
    for (size_t i : order) sorted_areas.push_back(areas[i]);
    const auto rects = squarify(sorted_areas);

    for (size_t k = 0; k < order.size(); ++k) {
        const auto& c = specs[order[k]];
        emit_capsule(c, rects[k], options, body.mesh);
        body.capsules.push_back({c.joint, f32(c.a), f32(c.b), f32(c.radius)});
    }
    return body;
}

BodyParams canonical_pose(const Skeleton& skeleton)
{
    BodyParams p = BodyParams::zeros(skeleton.size());
    for (size_t j = 0; j < skeleton.size(); ++j) {
        const auto& name = skeleton.joints[j].name;
        if (name == "left_shoulder") p.pose[j] = {0.0, 0.0, -std::numbers::pi / 4.0};
        if (name == "right_shoulder") p.pose[j] = {0.0, 0.0, std::numbers::pi / 4.0};
    }
    return p;
}

template <class T>
std::vector<RigidTransform<T>> skinning_transforms(const Skeleton& skeleton, std::span<const Vec3<T>> pose,
                                                    std::span<const T> shape)
{
    const size_t n = skeleton.size();
    if (pose.size() != n || shape.size() != n) throw ParameterError("skinning: parameter length mismatch");
    std::vector<RigidTransform<T>> global(n);
    std::vector<RigidTransform<double>> rest(n);
    std::vector<RigidTransform<T>> out(n);
    for (size_t j = 0; j < n; ++j) {
        const Joint& joint = skeleton.joints[j];
        const Mat3d rest_rot = quat_to_mat(joint.rest_rotation);
        const double len = norm(joint.rest_translation);
        const Vec3d dir = len > 1e-9 ? joint.rest_translation / len : Vec3d{};
        const Vec3<T> offset = Vec3<T>(joint.rest_translation) + Vec3<T>(dir) * shape[j];
        const Mat3<T> local_rot = Mat3<T>::cast(rest_rot) * rodrigues(pose[j]);
        if (joint.parent < 0) {
            global[j] = {local_rot, offset};
            rest[j] = {rest_rot, joint.rest_translation};
        } else {
            const auto& gp = global[static_cast<size_t>(joint.parent)];
            const auto& rp = rest[static_cast<size_t>(joint.parent)];
            global[j] = {gp.rotation * local_rot, gp.rotation * offset + gp.translation};
            rest[j] = {rp.rotation * rest_rot, rp.rotation * joint.rest_translation + rp.translation};
        }
        const Mat3<T> a = global[j].rotation * Mat3<T>::cast(rest[j].rotation.transposed());
        out[j] = {a, global[j].translation - a * Vec3<T>(rest[j].translation)};
    }
    return out;
}

template <class T>
Vec3<T> skin_vertex(const TemplateMesh& mesh, size_t vertex, std::span<const RigidTransform<T>> transforms)
{
    const Vec3<T> v(mesh.vertices[vertex]);
    Vec3<T> delta;
    for (int k = 0; k < 4; ++k) {
        const double w = mesh.skin_weights[vertex][k];
        if (w == 0.0) continue;
        const auto& a = transforms[static_cast<size_t>(mesh.skin_joints[vertex][k])];
        delta += (mat_minus_identity(a.rotation) * v + a.translation) * T(w);
    }
    return v + delta;
}

TemplateMesh skin_mesh(const TemplateMesh& mesh, const Skeleton& skeleton, const BodyParams& params)
{
    params.validate(skeleton.size(), 1e9);
    for (const auto& sj : mesh.skin_joints)
        for (int j : sj)
            if (j < 0 || static_cast<size_t>(j) >= skeleton.size())
                throw ParameterError("skin_mesh: weights reference an invalid joint");
    const auto a = skinning_transforms<double>(skeleton, params.pose, params.shape);
    TemplateMesh out = mesh;
    for (size_t v = 0; v < mesh.vertices.size(); ++v)
        out.vertices[v] = skin_vertex<double>(mesh, v, a);
    return out;
}

std::vector<Vec3d> joint_positions(const Skeleton& skeleton, const BodyParams& params)
{
    const auto a = skinning_transforms<double>(skeleton, params.pose, params.shape);
    std::vector<RigidTransform<double>> rest(skeleton.size());
    std::vector<Vec3d> out(skeleton.size());
    for (size_t j = 0; j < skeleton.size(); ++j) {
        const Joint& joint = skeleton.joints[j];
        const Mat3d rot = quat_to_mat(joint.rest_rotation);
        if (joint.parent < 0) {
            rest[j] = {rot, joint.rest_translation};
        } else {
            const auto& rp = rest[static_cast<size_t>(joint.parent)];
            rest[j] = {rp.rotation * rot, rp.rotation * joint.rest_translation + rp.translation};
        }
        out[j] = a[j].apply(rest[j].translation);
    }
    return out;
}

double body_shell_sdf(const BodyModel& body, std::span<const RigidTransform<double>> transforms, const Vec3d& p)
{
    double d = 1e30;
    for (const auto& c : body.capsules) {
        const auto& t = transforms[static_cast<size_t>(c.joint)];
        d = std::min(d, capsule_sdf(p, t.apply(c.a), t.apply(c.b), c.radius));
    }
    return d;
}

template <class T>
Vec3<T> vertex_normal(const TemplateMesh& mesh, const AnchorSet& anchors, std::span<const Vec3<T>> positions,
                      int vertex)
{
    Vec3<T> n;
    for (int f : anchors.vertex_faces[static_cast<size_t>(vertex)]) {
        const auto& t = mesh.triangles[static_cast<size_t>(f)];
        n += cross(positions[t[1]] - positions[t[0]], positions[t[2]] - positions[t[0]]);
    }
    return normalized(n);
}

template <class T>
std::vector<AnchorFrame<T>> posed_anchor_frames(const TemplateMesh& mesh, const AnchorSet& anchors,
                                                std::span<const RigidTransform<T>> transforms)
{
    std::vector<Vec3<T>> posed(mesh.vertices.size());
    for (int v : anchors.support_vertices) posed[static_cast<size_t>(v)] = skin_vertex<T>(mesh, static_cast<size_t>(v), transforms);

    std::vector<Vec3<T>> normals(mesh.vertices.size());
    std::vector<char> have(mesh.vertices.size(), 0);
    std::vector<AnchorFrame<T>> out;
    out.reserve(anchors.size());
    for (const auto& b : anchors.bindings) {
        const auto& tri = mesh.triangles[static_cast<size_t>(b.triangle)];
        std::array<Vec3<T>, 3> p, n;
        std::array<Vec2d, 3> uv;
        for (int k = 0; k < 3; ++k) {
            const auto v = static_cast<size_t>(tri[k]);
            if (!have[v]) {
                normals[v] = vertex_normal<T>(mesh, anchors, posed, tri[k]);
                have[v] = 1;
            }
            p[k] = posed[v];
            n[k] = normals[v];
            uv[k] = mesh.uv[v];
        }
        out.push_back(frame_from_triangle<T>(p, n, uv, b.bary, anchors.grid_n));
    }
    return out;
}

AnchorSet compute_anchors(const TemplateMesh& mesh, int grid_n)
{
    if (grid_n < 1) throw ParameterError("compute_anchors: grid_n must be >= 1");
    AnchorSet set;
    set.grid_n = grid_n;

    // Weld groups by exact rest position.
    const size_t nv = mesh.vertices.size();
    std::map<std::tuple<double, double, double>, std::vector<int>> groups;
    for (size_t v = 0; v < nv; ++v)
        groups[{mesh.vertices[v].x, mesh.vertices[v].y, mesh.vertices[v].z}].push_back(static_cast<int>(v));
    std::vector<std::vector<int>> faces_of(nv);
    for (size_t f = 0; f < mesh.triangles.size(); ++f)
        for (int k = 0; k < 3; ++k) faces_of[static_cast<size_t>(mesh.triangles[f][k])].push_back(static_cast<int>(f));
    set.vertex_faces.assign(nv, {});
    for (const auto& [key, members] : groups) {
        std::vector<int> faces;
        for (int m : members) faces.insert(faces.end(), faces_of[static_cast<size_t>(m)].begin(), faces_of[static_cast<size_t>(m)].end());
        std::sort(faces.begin(), faces.end());
        faces.erase(std::unique(faces.begin(), faces.end()), faces.end());
        for (int m : members) set.vertex_faces[static_cast<size_t>(m)] = faces;
    }

    // uv bucket grid for point location.
    const int buckets = std::max(8, std::min(256, grid_n * 2));
    std::vector<std::vector<int>> bucket(static_cast<size_t>(buckets * buckets));
    for (size_t f = 0; f < mesh.triangles.size(); ++f) {
        const auto& t = mesh.triangles[f];
        double u0 = 1, v0 = 1, u1 = 0, v1 = 0;
        for (int k = 0; k < 3; ++k) {
            const auto& uv = mesh.uv[static_cast<size_t>(t[k])];
            u0 = std::min(u0, uv.x);
            u1 = std::max(u1, uv.x);
            v0 = std::min(v0, uv.y);
            v1 = std::max(v1, uv.y);
        }
        const int bx0 = std::clamp(static_cast<int>(std::floor(u0 * buckets)), 0, buckets - 1);
        const int bx1 = std::clamp(static_cast<int>(std::floor(u1 * buckets)), 0, buckets - 1);
        const int by0 = std::clamp(static_cast<int>(std::floor(v0 * buckets)), 0, buckets - 1);
        const int by1 = std::clamp(static_cast<int>(std::floor(v1 * buckets)), 0, buckets - 1);
        for (int by = by0; by <= by1; ++by)
            for (int bx = bx0; bx <= bx1; ++bx) bucket[static_cast<size_t>(by * buckets + bx)].push_back(static_cast<int>(f));
    }

    for (int j = 0; j < grid_n; ++j) {
        for (int i = 0; i < grid_n; ++i) {
            const Vec2d c{(i + 0.5) / grid_n, (j + 0.5) / grid_n};
            const int bx = std::clamp(static_cast<int>(std::floor(c.x * buckets)), 0, buckets - 1);
            const int by = std::clamp(static_cast<int>(std::floor(c.y * buckets)), 0, buckets - 1);
            for (int f : bucket[static_cast<size_t>(by * buckets + bx)]) {
                const auto& t = mesh.triangles[static_cast<size_t>(f)];
                std::array<double, 3> bary;
                if (point_in_triangle_uv(c, mesh.uv[t[0]], mesh.uv[t[1]], mesh.uv[t[2]], bary)) {
                    set.cells.push_back(j * grid_n + i);
                    set.bindings.push_back({f, bary});
                    break;
                }
            }
        }
    }
    if (set.bindings.empty()) throw ParameterError("compute_anchors: no uv cell hits the chart");

    std::vector<char> need(nv, 0);
    for (const auto& b : set.bindings)
        for (int k = 0; k < 3; ++k)
            for (int f : set.vertex_faces[static_cast<size_t>(mesh.triangles[b.triangle][k])])
                for (int q = 0; q < 3; ++q) need[static_cast<size_t>(mesh.triangles[static_cast<size_t>(f)][q])] = 1;
    for (size_t v = 0; v < nv; ++v)
        if (need[v]) set.support_vertices.push_back(static_cast<int>(v));

    // Rest frames go through the same evaluation as posed frames, with
    // identity transforms, so rest anchors and zero-pose anchors agree exactly.
    std::vector<RigidTransform<double>> identity(1);
    int max_joint = 0;
    for (const auto& sj : mesh.skin_joints)
        for (int jj : sj) max_joint = std::max(max_joint, jj);
    identity.resize(static_cast<size_t>(max_joint + 1));
    const auto frames = posed_anchor_frames<double>(mesh, set, identity);
    for (const auto& f : frames) {
        set.positions.push_back(f.position);
        set.rotations.push_back(f.rotation);
        set.scales.push_back(f.scale);
    }
    return set;
}

template std::vector<RigidTransform<double>> skinning_transforms<double>(const Skeleton&, std::span<const Vec3d>,
                                                                         std::span<const double>);
template std::vector<RigidTransform<ad::Var>> skinning_transforms<ad::Var>(const Skeleton&,
                                                                           std::span<const Vec3<ad::Var>>,
                                                                           std::span<const ad::Var>);
template Vec3d skin_vertex<double>(const TemplateMesh&, size_t, std::span<const RigidTransform<double>>);
template Vec3<ad::Var> skin_vertex<ad::Var>(const TemplateMesh&, size_t, std::span<const RigidTransform<ad::Var>>);
template std::vector<AnchorFrame<double>> posed_anchor_frames<double>(const TemplateMesh&, const AnchorSet&,
                                                                      std::span<const RigidTransform<double>>);
template std::vector<AnchorFrame<ad::Var>> posed_anchor_frames<ad::Var>(const TemplateMesh&, const AnchorSet&,
                                                                        std::span<const RigidTransform<ad::Var>>);
template Vec3d vertex_normal<double>(const TemplateMesh&, const AnchorSet&, std::span<const Vec3d>, int);

} // namespace gavatar::body
