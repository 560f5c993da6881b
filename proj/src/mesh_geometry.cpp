#include "gavatar/mesh_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "gavatar/errors.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar::mesh {

namespace {

constexpr double kMinArea = 1e-12;
constexpr size_t kEvalBatch = 8192;

double cross2(const Vec2d& a, const Vec2d& b) { return a.x * b.y - a.y * b.x; }

double triangle_area(const Vec3d& a, const Vec3d& b, const Vec3d& c) { return 0.5 * norm(cross(b - a, c - a)); }

uint64_t edge_key(uint32_t a, uint32_t b)
{
    if (a > b) std::swap(a, b);
    return (static_cast<uint64_t>(a) << 32) | b;
}

double snap(double s, double cell) { return s == 0.0 ? 1e-4 * cell : s; }

} // namespace

TetGrid TetGrid::make(int resolution, const Vec3d& box_min, const Vec3d& box_max)
{
    if (resolution < 1) throw ParameterError("tet grid: resolution must be >= 1");
    for (int a = 0; a < 3; ++a)
        if (!(box_max[a] > box_min[a])) throw ParameterError("tet grid: empty box");
    TetGrid g;
    g.resolution = resolution;
    g.box_min = box_min;
    g.box_max = box_max;
    const int n = resolution + 1;
    g.vertices.resize(static_cast<size_t>(n) * n * n);
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const Vec3d t{double(i) / resolution, double(j) / resolution, double(k) / resolution};
                g.vertices[g.vertex_index(i, j, k)] = box_min + hadamard(box_max - box_min, t);
            }

    // Kuhn split: one tet per axis permutation, walking 000 -> 111.
    static constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    g.tets.reserve(static_cast<size_t>(resolution) * resolution * resolution * 6);
    for (int k = 0; k < resolution; ++k)
        for (int j = 0; j < resolution; ++j)
            for (int i = 0; i < resolution; ++i)
                for (const auto& p : perms) {
                    int c[3] = {i, j, k};
                    std::array<uint32_t, 4> t;
                    t[0] = g.vertex_index(c[0], c[1], c[2]);
                    for (int s = 0; s < 3; ++s) {
                        ++c[p[s]];
                        t[s + 1] = g.vertex_index(c[0], c[1], c[2]);
                    }
                    const Vec3d& v0 = g.vertices[t[0]];
                    const double vol =
                        dot(cross(g.vertices[t[1]] - v0, g.vertices[t[2]] - v0), g.vertices[t[3]] - v0);
                    if (vol < 0) std::swap(t[2], t[3]);
                    g.tets.push_back(t);
                }
    return g;
}

std::vector<Vec3d> vertex_normal_sums(const TriMesh& mesh)
{
    std::vector<Vec3d> sums(mesh.vertices.size());
    for (const auto& t : mesh.triangles) {
        const Vec3d& a = mesh.vertices[t[0]];
        const Vec3d n = cross(mesh.vertices[t[1]] - a, mesh.vertices[t[2]] - a);
        for (uint32_t v : t) sums[v] += n;
    }
    return sums;
}

void normal_sums_backward(const TriMesh& mesh, std::span<const Vec3d> dsums, std::span<Vec3d> dvertices)
{
    for (const auto& t : mesh.triangles) {
        const Vec3d dc = dsums[t[0]] + dsums[t[1]] + dsums[t[2]];
        const Vec3d& a = mesh.vertices[t[0]];
        const Vec3d e1 = mesh.vertices[t[1]] - a, e2 = mesh.vertices[t[2]] - a;
        const Vec3d de1 = cross(e2, dc), de2 = cross(dc, e1);
        dvertices[t[0]] -= de1 + de2;
        dvertices[t[1]] += de1;
        dvertices[t[2]] += de2;
    }
}

void TriMesh::compute_normals()
{
    normals = vertex_normal_sums(*this);
    for (auto& n : normals) {
        const double l = norm(n);
        n = l > 0 ? n / l : Vec3d{0, 0, 1};
    }
}

void TriMesh::validate() const
{
    for (const auto& t : triangles) {
        for (uint32_t v : t)
            if (v >= vertices.size()) throw ParameterError("mesh: triangle index out of range");
        if (triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) <= kMinArea)
            throw ParameterError("mesh: degenerate triangle");
    }
    if (!normals.empty()) {
        if (normals.size() != vertices.size()) throw ParameterError("mesh: normal count mismatch");
        for (const auto& n : normals)
            if (std::abs(norm(n) - 1.0) > 1e-9) throw ParameterError("mesh: normals must be unit length");
    }
    if (!colors.empty() && colors.size() != vertices.size()) throw ParameterError("mesh: color count mismatch");
    if (!uv.empty() && uv.size() != 3 * triangles.size()) throw ParameterError("mesh: uv count mismatch");
}

std::vector<double> evaluate_grid(const fields::SdfField& sdf, const TetGrid& grid)
{
    std::vector<double> values(grid.vertices.size());
    for (size_t b = 0; b < values.size(); b += kEvalBatch) {
        const size_t n = std::min(kEvalBatch, values.size() - b);
        const auto v = sdf.eval(std::span<const Vec3d>(grid.vertices.data() + b, n));
        std::copy(v.begin(), v.end(), values.begin() + static_cast<std::ptrdiff_t>(b));
    }
    return values;
}

MeshExtraction marching_tets(std::span<const double> raw, const TetGrid& grid)
{
    if (raw.size() != grid.vertices.size()) throw ParameterError("marching_tets: value count mismatch");
    const double cell = grid.cell_size();
    std::vector<double> values(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        if (!std::isfinite(raw[i])) throw NumericError("marching_tets: non-finite SDF value");
        values[i] = snap(raw[i], cell);
    }

    auto root = [&](uint64_t key) {
        const uint32_t a = static_cast<uint32_t>(key >> 32), b = static_cast<uint32_t>(key);
        const double t = values[a] / (values[a] - values[b]);
        return grid.vertices[a] + (grid.vertices[b] - grid.vertices[a]) * t;
    };

    // Per-chunk triangles as edge-key triples; merged in chunk order.
    std::vector<std::vector<std::array<uint64_t, 3>>> partial(worker_count());
    parallel_for(grid.tets.size(), [&](size_t begin, size_t end, size_t w) {
        auto& out = partial[w];
        for (size_t ti = begin; ti < end; ++ti) {
            const auto& t = grid.tets[ti];
            uint32_t in[4], outv[4];
            int n_in = 0, n_out = 0;
            for (uint32_t v : t) (values[v] < 0 ? in[n_in++] : outv[n_out++]) = v;
            if (n_in == 0 || n_out == 0) continue;

            Vec3d c_in, c_out;
            for (int i = 0; i < n_in; ++i) c_in += grid.vertices[in[i]];
            for (int i = 0; i < n_out; ++i) c_out += grid.vertices[outv[i]];
            const Vec3d outward = c_out / double(n_out) - c_in / double(n_in);

            auto emit = [&](uint64_t k0, uint64_t k1, uint64_t k2) {
                const Vec3d p0 = root(k0);
                const Vec3d n = cross(root(k1) - p0, root(k2) - p0);
                if (dot(n, outward) < 0) std::swap(k1, k2);
                out.push_back({k0, k1, k2});
            };
            if (n_in == 1)
                emit(edge_key(in[0], outv[0]), edge_key(in[0], outv[1]), edge_key(in[0], outv[2]));
            else if (n_out == 1)
                emit(edge_key(outv[0], in[0]), edge_key(outv[0], in[1]), edge_key(outv[0], in[2]));
            else {
                const uint64_t ac = edge_key(in[0], outv[0]), ad = edge_key(in[0], outv[1]);
                const uint64_t bd = edge_key(in[1], outv[1]), bc = edge_key(in[1], outv[0]);
                emit(ac, ad, bd);
                emit(ac, bd, bc);
            }
        }
    });

    std::unordered_map<uint64_t, uint32_t> vertex_of;
    std::vector<uint64_t> keys;
    std::vector<std::array<uint32_t, 3>> tris;
    for (const auto& part : partial)
        for (const auto& tk : part) {
            std::array<uint32_t, 3> tri;
            for (int i = 0; i < 3; ++i) {
                auto [it, fresh] = vertex_of.try_emplace(tk[i], static_cast<uint32_t>(keys.size()));
                if (fresh) keys.push_back(tk[i]);
                tri[i] = it->second;
            }
            tris.push_back(tri);
        }

    std::vector<Vec3d> pos(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) pos[i] = root(keys[i]);

    // Drop degenerate triangles and the vertices left unreferenced.
    std::vector<uint32_t> remap(keys.size(), UINT32_MAX);
    MeshExtraction ex;
    std::vector<uint64_t> kept_keys;
    for (const auto& t : tris) {
        if (triangle_area(pos[t[0]], pos[t[1]], pos[t[2]]) <= kMinArea) continue;
        std::array<uint32_t, 3> nt;
        for (int i = 0; i < 3; ++i) {
            if (remap[t[i]] == UINT32_MAX) {
                remap[t[i]] = static_cast<uint32_t>(kept_keys.size());
                kept_keys.push_back(keys[t[i]]);
            }
            nt[i] = remap[t[i]];
        }
        ex.mesh.triangles.push_back(nt);
    }

    std::unordered_map<uint32_t, uint32_t> local;
    auto local_index = [&](uint32_t g) {
        auto [it, fresh] = local.try_emplace(g, static_cast<uint32_t>(ex.grid_vertices.size()));
        if (fresh) {
            ex.grid_vertices.push_back(g);
            ex.values.push_back(values[g]);
        }
        return it->second;
    };
    ex.edges.reserve(kept_keys.size());
    ex.mesh.vertices.reserve(kept_keys.size());
    for (uint64_t k : kept_keys) {
        const uint32_t a = static_cast<uint32_t>(k >> 32), b = static_cast<uint32_t>(k);
        ex.edges.push_back({local_index(a), local_index(b)});
        ex.mesh.vertices.push_back(root(k));
    }
    ex.mesh.compute_normals();
    return ex;
}

MeshExtraction marching_tets(const fields::SdfField& sdf, const TetGrid& grid)
{
    return marching_tets(evaluate_grid(sdf, grid), grid);
}

namespace {

// Interpolation parameter along the edge and whether it was clamped.
std::pair<double, bool> edge_t(double sa, double sb)
{
    const double d = sa - sb;
    if (d == 0.0) return {0.5, true};
    const double t = sa / d;
    if (t < 0.0) return {0.0, true};
    if (t > 1.0) return {1.0, true};
    return {t, false};
}

} // namespace

void update_vertices(MeshExtraction& ex, const TetGrid& grid, std::span<const double> values)
{
    if (values.size() != ex.grid_vertices.size()) throw ParameterError("update_vertices: value count mismatch");
    const double cell = grid.cell_size();
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw NumericError("update_vertices: non-finite SDF value");
        ex.values[i] = snap(values[i], cell);
    }
    for (size_t v = 0; v < ex.edges.size(); ++v) {
        const auto [la, lb] = ex.edges[v];
        const Vec3d& pa = grid.vertices[ex.grid_vertices[la]];
        const Vec3d& pb = grid.vertices[ex.grid_vertices[lb]];
        ex.mesh.vertices[v] = pa + (pb - pa) * edge_t(ex.values[la], ex.values[lb]).first;
    }
    ex.mesh.compute_normals();
}

void refresh(MeshExtraction& ex, const fields::SdfField& sdf, const TetGrid& grid)
{
    std::vector<Vec3d> pts(ex.grid_vertices.size());
    for (size_t i = 0; i < pts.size(); ++i) pts[i] = grid.vertices[ex.grid_vertices[i]];
    std::vector<double> values;
    values.reserve(pts.size());
    for (size_t b = 0; b < pts.size(); b += kEvalBatch) {
        const auto v = sdf.eval(std::span<const Vec3d>(pts.data() + b, std::min(kEvalBatch, pts.size() - b)));
        values.insert(values.end(), v.begin(), v.end());
    }
    update_vertices(ex, grid, values);
}

std::vector<double> vertices_backward(const MeshExtraction& ex, const TetGrid& grid, std::span<const Vec3d> dvertices)
{
    std::vector<double> dvalues(ex.grid_vertices.size(), 0.0);
    for (size_t v = 0; v < ex.edges.size(); ++v) {
        const auto [la, lb] = ex.edges[v];
        const double sa = ex.values[la], sb = ex.values[lb];
        if (edge_t(sa, sb).second) continue;
        const Vec3d& pa = grid.vertices[ex.grid_vertices[la]];
        const Vec3d& pb = grid.vertices[ex.grid_vertices[lb]];
        const double d = sa - sb;
        const double g = dot(dvertices[v], pb - pa);
        dvalues[la] += g * (-sb / (d * d));
        dvalues[lb] += g * (sa / (d * d));
    }
    return dvalues;
}

void extraction_backward(const fields::SdfField& sdf, const TetGrid& grid, const MeshExtraction& ex,
                         std::span<const Vec3d> dvertices, fields::FieldGrad& grad)
{
    const auto dvalues = vertices_backward(ex, grid, dvertices);
    for (size_t b = 0; b < dvalues.size(); b += kEvalBatch) {
        const size_t n = std::min(kEvalBatch, dvalues.size() - b);
        std::vector<Vec3d> pts(n);
        Eigen::MatrixXd dout(1, static_cast<Eigen::Index>(n));
        bool any = false;
        for (size_t i = 0; i < n; ++i) {
            pts[i] = grid.vertices[ex.grid_vertices[b + i]];
            dout(0, static_cast<Eigen::Index>(i)) = dvalues[b + i];
            any = any || dvalues[b + i] != 0.0;
        }
        if (!any) continue;
        const auto f = sdf.forward(pts);
        sdf.backward(f, dout, grad);
    }
}

std::array<double, 3> encode_normal(const render::Camera& cam, const Vec3d& world_normal)
{
    const Vec3d n = cam.rotation * world_normal;
    return {0.5 * (n.x + 1.0), 0.5 * (1.0 - n.y), 0.5 * (1.0 - n.z)};
}

namespace {

template <class T>
Vec3<T> lift(const Vec3d& v)
{
    return {T(v.x), T(v.y), T(v.z)};
}

// Interpolated, encoded normal where the pixel ray (origin o, direction d)
// meets triangle (p0, p1, p2) with per-vertex normal sums u0..u2.
template <class T>
std::array<T, 3> shade(const Vec3<T>& p0, const Vec3<T>& p1, const Vec3<T>& p2, const Vec3<T>& u0, const Vec3<T>& u1,
                       const Vec3<T>& u2, const Vec3d& o, const Vec3d& d, const Mat3d& rot)
{
    const Vec3<T> dir = lift<T>(d);
    const Vec3<T> e1 = p1 - p0, e2 = p2 - p0;
    const Vec3<T> pv = cross(dir, e2);
    const T det = dot(e1, pv);
    const Vec3<T> tv = lift<T>(o) - p0;
    const T bu = dot(tv, pv) / det;
    const T bv = dot(dir, cross(tv, e1)) / det;
    const Vec3<T> n = normalized(normalized(u0) * (T(1.0) - bu - bv) + normalized(u1) * bu + normalized(u2) * bv);
    const Vec3<T> c = Mat3<T>::cast(rot) * n;
    return {T(0.5) * (c.x + T(1.0)), T(0.5) * (T(1.0) - c.y), T(0.5) * (T(1.0) - c.z)};
}

template <class T>
Vec2<T> project_px(const render::Camera& cam, const Vec3<T>& p)
{
    const Vec3<T> c = Mat3<T>::cast(cam.rotation) * p + lift<T>(cam.translation);
    return {T(cam.fx) * c.x / c.z + T(cam.cx), T(cam.fy) * c.y / c.z + T(cam.cy)};
}

// Signed distance from `center` along the axis to where segment (a, b)
// crosses the pixel row/column; ok = false when it does not.
template <class T>
T crossing(const render::Camera& cam, const Vec3<T>& a, const Vec3<T>& b, const Vec2d& center, int axis, int dir,
           bool& ok)
{
    const Vec2<T> A = project_px(cam, a), B = project_px(cam, b);
    const T a_off = axis == 0 ? A.y : A.x, b_off = axis == 0 ? B.y : B.x;
    const T a_run = axis == 0 ? A.x : A.y, b_run = axis == 0 ? B.x : B.y;
    const double line = axis == 0 ? center.y : center.x;
    const double run0 = axis == 0 ? center.x : center.y;
    const T denom = b_off - a_off;
    ok = false;
    if (std::abs(value_of(denom)) < 1e-14) return T(0.0);
    const T te = (T(line) - a_off) / denom;
    if (value_of(te) < 0.0 || value_of(te) > 1.0) return T(0.0);
    ok = true;
    return (a_run + te * (b_run - a_run) - T(run0)) * T(double(dir));
}

struct Adjacency {
    std::unordered_map<uint64_t, std::array<int32_t, 2>> faces;
    std::vector<uint8_t> front;

    int32_t across(uint32_t a, uint32_t b, int32_t t) const
    {
        const auto it = faces.find(edge_key(a, b));
        if (it == faces.end()) return -1;
        const auto& f = it->second;
        if (f[1] < -1) return -1; // non-manifold
        return f[0] == t ? f[1] : f[0];
    }
};

Adjacency build_adjacency(const TriMesh& mesh, const render::Camera& cam)
{
    Adjacency adj;
    adj.faces.reserve(mesh.triangles.size() * 2);
    adj.front.resize(mesh.triangles.size());
    const Vec3d eye = cam.center();
    for (size_t t = 0; t < mesh.triangles.size(); ++t) {
        const auto& tri = mesh.triangles[t];
        const Vec3d& p0 = mesh.vertices[tri[0]];
        adj.front[t] = dot(cross(mesh.vertices[tri[1]] - p0, mesh.vertices[tri[2]] - p0), p0 - eye) < 0;
        for (int e = 0; e < 3; ++e) {
            auto [it, fresh] =
                adj.faces.try_emplace(edge_key(tri[e], tri[(e + 1) % 3]), std::array<int32_t, 2>{int32_t(t), -1});
            if (!fresh) it->second[1] = it->second[1] == -1 ? int32_t(t) : -2;
        }
    }
    return adj;
}

} // namespace

MeshRender rasterize_mesh(const TriMesh& mesh, const render::Camera& cam, const std::array<double, 3>& normal_background)
{
    cam.validate();
    const int W = cam.width, H = cam.height;
    MeshRender out;
    out.normal = Image(W, H, 3);
    for (size_t p = 0; p < static_cast<size_t>(W) * H; ++p)
        for (int c = 0; c < 3; ++c) out.normal.data[p * 3 + c] = normal_background[c];
    out.mask = Image(W, H, 1);
    out.triangle.assign(static_cast<size_t>(W) * H, -1);
    if (mesh.empty()) return out;

    const size_t V = mesh.vertices.size();
    std::vector<Vec2d> screen(V);
    std::vector<double> depth(V);
    for (size_t v = 0; v < V; ++v) {
        const Vec3d c = cam.to_camera(mesh.vertices[v]);
        depth[v] = c.z;
        screen[v] = {cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy};
    }

    std::vector<double> zbuf(static_cast<size_t>(W) * H, std::numeric_limits<double>::infinity());
    parallel_for(static_cast<size_t>(H), [&](size_t y0, size_t y1, size_t) {
        for (size_t t = 0; t < mesh.triangles.size(); ++t) {
            const auto& tri = mesh.triangles[t];
            if (depth[tri[0]] < cam.near || depth[tri[1]] < cam.near || depth[tri[2]] < cam.near) continue;
            const Vec2d A = screen[tri[0]], B = screen[tri[1]], C = screen[tri[2]];
            const double area = cross2({B.x - A.x, B.y - A.y}, {C.x - A.x, C.y - A.y});
            if (std::abs(area) < 1e-18) continue;
            const double minx = std::min({A.x, B.x, C.x}), maxx = std::max({A.x, B.x, C.x});
            const double miny = std::min({A.y, B.y, C.y}), maxy = std::max({A.y, B.y, C.y});
            const int xa = std::max(0, static_cast<int>(std::ceil(minx - 0.5)));
            const int xb = std::min(W - 1, static_cast<int>(std::floor(maxx - 0.5)));
            const int ya = std::max(static_cast<int>(y0), static_cast<int>(std::ceil(miny - 0.5)));
            const int yb = std::min(static_cast<int>(y1) - 1, static_cast<int>(std::floor(maxy - 0.5)));
            for (int y = ya; y <= yb; ++y)
                for (int x = xa; x <= xb; ++x) {
                    const Vec2d P{x + 0.5, y + 0.5};
                    const double b0 = cross2({C.x - B.x, C.y - B.y}, {P.x - B.x, P.y - B.y}) / area;
                    const double b1 = cross2({A.x - C.x, A.y - C.y}, {P.x - C.x, P.y - C.y}) / area;
                    const double b2 = 1.0 - b0 - b1;
                    if (b0 < 0 || b1 < 0 || b2 < 0) continue;
                    const double z =
                        1.0 / (b0 / depth[tri[0]] + b1 / depth[tri[1]] + b2 / depth[tri[2]]);
                    const size_t p = static_cast<size_t>(y) * W + x;
                    if (z < zbuf[p]) {
                        zbuf[p] = z;
                        out.triangle[p] = static_cast<int32_t>(t);
                    }
                }
        }
    });

    const Vec3d eye = cam.center();
    const Mat3d rt = cam.rotation.transposed();
    const auto sums = vertex_normal_sums(mesh);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const size_t p = static_cast<size_t>(y) * W + x;
            const int32_t t = out.triangle[p];
            if (t < 0) continue;
            out.mask.data[p] = 1.0;
            const auto& tri = mesh.triangles[static_cast<size_t>(t)];
            const Vec3d d = rt * Vec3d{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
            const auto n = shade<double>(mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]],
                                         sums[tri[0]], sums[tri[1]], sums[tri[2]], eye, d, cam.rotation);
            for (int c = 0; c < 3; ++c) out.normal.data[p * 3 + c] = n[c];
        }

    // Silhouette antialiasing at coverage transitions. From the covered
    // pixel, walk across front-facing neighbours until a silhouette edge.
    const Adjacency adj = build_adjacency(mesh, cam);
    static constexpr int nb[4][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 1}, {0, -1, 1}}; // dx, dy, axis
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const size_t p = static_cast<size_t>(y) * W + x;
            if (out.triangle[p] < 0) continue;
            for (const auto& n : nb) {
                const int qx = x + n[0], qy = y + n[1];
                if (qx < 0 || qy < 0 || qx >= W || qy >= H) continue;
                const size_t q = static_cast<size_t>(qy) * W + qx;
                if (out.triangle[q] >= 0) continue;
                const int axis = n[2], dir = n[0] + n[1];
                const Vec2d center{x + 0.5, y + 0.5};
                int32_t cur = out.triangle[p];
                double entered = -1e-9; // exits only, never the crossing behind the center
                bool found = false;
                MeshRender::EdgeEvent ev{};
                for (int step = 0; step < 32 && cur >= 0; ++step) {
                    const auto& tri = mesh.triangles[static_cast<size_t>(cur)];
                    double best = std::numeric_limits<double>::infinity();
                    int best_e = -1;
                    for (int e = 0; e < 3; ++e) {
                        bool ok = false;
                        const double s = crossing<double>(cam, mesh.vertices[tri[e]], mesh.vertices[tri[(e + 1) % 3]],
                                                          center, axis, dir, ok);
                        if (ok && s > entered && s < best) {
                            best = s;
                            best_e = e;
                        }
                    }
                    if (best_e < 0 || best > 1.0) break;
                    const uint32_t a = tri[best_e], b = tri[(best_e + 1) % 3];
                    const int32_t next = adj.across(a, b, cur);
                    if (next < 0 || adj.front[static_cast<size_t>(next)] != adj.front[static_cast<size_t>(cur)]) {
                        ev = {0, a, b, center, axis, dir, std::max(0.0, best)};
                        found = true;
                        break;
                    }
                    cur = next;
                    entered = best + 1e-12;
                }
                if (!found) continue;
                if (ev.crossing >= 0.5) {
                    ev.pixel = static_cast<uint32_t>(q);
                    out.mask.data[q] += ev.crossing - 0.5;
                } else {
                    ev.pixel = static_cast<uint32_t>(p);
                    out.mask.data[p] -= 0.5 - ev.crossing;
                }
                out.events.push_back(ev);
            }
        }
    for (auto& m : out.mask.data) m = std::clamp(m, 0.0, 1.0);
    return out;
}

std::vector<Vec3d> rasterize_mesh_backward(const TriMesh& mesh, const render::Camera& cam, const MeshRender& out,
                                           const Image& dnormal, const Image& dmask)
{
    const size_t V = mesh.vertices.size();
    std::vector<Vec3d> dverts(V);
    if (mesh.empty()) return dverts;
    const int W = cam.width, H = cam.height;
    const bool has_n = dnormal.size() > 0, has_m = dmask.size() > 0;
    if (has_n && (dnormal.width != W || dnormal.height != H || dnormal.channels != 3))
        throw ParameterError("rasterize_mesh_backward: normal gradient shape mismatch");
    if (has_m && (dmask.width != W || dmask.height != H || dmask.channels != 1))
        throw ParameterError("rasterize_mesh_backward: mask gradient shape mismatch");

    const auto sums = vertex_normal_sums(mesh);
    const size_t workers = worker_count();
    std::vector<std::vector<Vec3d>> dpos(workers), dsum(workers);

    if (has_n) {
        const Vec3d eye = cam.center();
        const Mat3d rt = cam.rotation.transposed();
        parallel_for(static_cast<size_t>(H), [&](size_t y0, size_t y1, size_t w) {
            dpos[w].assign(V, Vec3d{});
            dsum[w].assign(V, Vec3d{});
            ad::Tape tape;
            ad::TapeScope scope(tape);
            for (size_t y = y0; y < y1; ++y)
                for (int x = 0; x < W; ++x) {
                    const size_t p = y * W + static_cast<size_t>(x);
                    const int32_t t = out.triangle[p];
                    if (t < 0) continue;
                    const double g[3] = {dnormal.data[p * 3], dnormal.data[p * 3 + 1], dnormal.data[p * 3 + 2]};
                    if (g[0] == 0 && g[1] == 0 && g[2] == 0) continue;
                    const auto& tri = mesh.triangles[static_cast<size_t>(t)];
                    tape.clear();
                    Vec3<ad::Var> P[3], U[3];
                    for (int i = 0; i < 3; ++i) {
                        const Vec3d& pv = mesh.vertices[tri[i]];
                        P[i] = {ad::Var::leaf(pv.x), ad::Var::leaf(pv.y), ad::Var::leaf(pv.z)};
                        U[i] = {ad::Var::leaf(sums[tri[i]].x), ad::Var::leaf(sums[tri[i]].y),
                                ad::Var::leaf(sums[tri[i]].z)};
                    }
                    const Vec3d d = rt * Vec3d{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
                    const auto n = shade<ad::Var>(P[0], P[1], P[2], U[0], U[1], U[2], eye, d, cam.rotation);
                    for (int c = 0; c < 3; ++c) tape.seed(n[c].id, g[c]);
                    tape.propagate();
                    for (int i = 0; i < 3; ++i)
                        for (int a = 0; a < 3; ++a) {
                            dpos[w][tri[i]][a] += tape.adjoint(P[i][a].id);
                            dsum[w][tri[i]][a] += tape.adjoint(U[i][a].id);
                        }
                }
        });
    }

    std::vector<Vec3d> dsums(V);
    for (size_t w = 0; w < workers; ++w) {
        for (size_t v = 0; v < dpos[w].size(); ++v) dverts[v] += dpos[w][v];
        for (size_t v = 0; v < dsum[w].size(); ++v) dsums[v] += dsum[w][v];
    }
    if (has_n) normal_sums_backward(mesh, dsums, dverts);

    if (has_m) {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        for (const auto& ev : out.events) {
            const double m = out.mask.data[ev.pixel];
            const double g = dmask.data[ev.pixel];
            if (g == 0.0 || m <= 0.0 || m >= 1.0 || ev.crossing <= 0.0) continue;
            tape.clear();
            const Vec3d& a = mesh.vertices[ev.a];
            const Vec3d& b = mesh.vertices[ev.b];
            Vec3<ad::Var> A{ad::Var::leaf(a.x), ad::Var::leaf(a.y), ad::Var::leaf(a.z)};
            Vec3<ad::Var> B{ad::Var::leaf(b.x), ad::Var::leaf(b.y), ad::Var::leaf(b.z)};
            bool ok = false;
            const ad::Var s = crossing<ad::Var>(cam, A, B, ev.center, ev.axis, ev.dir, ok);
            if (!ok) continue;
            tape.seed(s.id, g);
            tape.propagate();
            for (int k = 0; k < 3; ++k) {
                dverts[ev.a][k] += tape.adjoint(A[k].id);
                dverts[ev.b][k] += tape.adjoint(B[k].id);
            }
        }
    }
    return dverts;
}

double eikonal_loss(const std::function<double(const Vec3d&)>& sdf, std::span<const Vec3d> points, double h)
{
    if (points.empty()) return 0.0;
    double total = 0.0;
    for (const auto& p : points) {
        Vec3d g;
        for (int a = 0; a < 3; ++a) {
            Vec3d lo = p, hi = p;
            lo[a] -= h;
            hi[a] += h;
            g[a] = (sdf(hi) - sdf(lo)) / (2 * h);
        }
        const double r = norm(g) - 1.0;
        total += r * r;
    }
    return total / double(points.size());
}

double eikonal_loss(const fields::SdfField& sdf, std::span<const Vec3d> points, fields::FieldGrad* grad, double h)
{
    return fields::sdf_eikonal(sdf, points, grad, h);
}

std::vector<Vec3d> eikonal_samples(std::span<const Vec3d> centers, size_t perturbed, double stddev,
                                   std::mt19937_64& rng)
{
    std::vector<Vec3d> out(centers.begin(), centers.end());
    if (centers.empty()) return out;
    std::uniform_int_distribution<size_t> pick(0, centers.size() - 1);
    std::normal_distribution<double> noise(0.0, stddev);
    out.reserve(out.size() + perturbed);
    for (size_t i = 0; i < perturbed; ++i) {
        const Vec3d& c = centers[pick(rng)];
        const double dx = noise(rng), dy = noise(rng), dz = noise(rng);
        out.push_back(c + Vec3d{dx, dy, dz});
    }
    return out;
}

AlphaLoss alpha_loss(const Image& mask, const Image& alpha)
{
    require_same_shape(mask, alpha, "alpha_loss");
    if (mask.channels != 1) throw ParameterError("alpha_loss: expected single-channel images");
    AlphaLoss l;
    l.dmask = Image(mask.width, mask.height, 1);
    l.dalpha = Image(mask.width, mask.height, 1);
    const double inv = 1.0 / (double(mask.width) * mask.height);
    for (size_t i = 0; i < mask.size(); ++i) {
        const double d = mask.data[i] - alpha.data[i];
        l.value += d * d * inv;
        l.dmask.data[i] = 2.0 * d * inv;
        l.dalpha.data[i] = -2.0 * d * inv;
    }
    return l;
}

double normal_consistency_loss(const TriMesh& mesh, std::span<Vec3d> dvertices)
{
    if (mesh.empty()) return 0.0;
    std::vector<uint64_t> edges;
    edges.reserve(mesh.triangles.size() * 3);
    for (const auto& t : mesh.triangles)
        for (int e = 0; e < 3; ++e) edges.push_back(edge_key(t[e], t[(e + 1) % 3]));
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    const auto sums = vertex_normal_sums(mesh);
    std::vector<Vec3d> n(sums.size());
    std::vector<double> len(sums.size());
    for (size_t v = 0; v < sums.size(); ++v) {
        len[v] = norm(sums[v]);
        n[v] = len[v] > 0 ? sums[v] / len[v] : Vec3d{};
    }
    const double inv = 1.0 / double(edges.size());
    double total = 0.0;
    std::vector<Vec3d> dn(dvertices.empty() ? 0 : n.size());
    for (uint64_t k : edges) {
        const uint32_t a = static_cast<uint32_t>(k >> 32), b = static_cast<uint32_t>(k);
        total += 1.0 - dot(n[a], n[b]);
        if (!dn.empty()) {
            dn[a] -= n[b] * inv;
            dn[b] -= n[a] * inv;
        }
    }
    if (!dvertices.empty()) {
        std::vector<Vec3d> dsums(n.size());
        for (size_t v = 0; v < n.size(); ++v)
            if (len[v] > 0) dsums[v] = (dn[v] - n[v] * dot(n[v], dn[v])) / len[v];
        normal_sums_backward(mesh, dsums, dvertices);
    }
    return total * inv;
}

std::array<double, 3> sh_dc_color(const fields::Attributes& a)
{
    std::array<double, 3> c;
    for (int ch = 0; ch < 3; ++ch) c[ch] = std::clamp(0.5 + render::kShC0 * a.sh[ch * 16], 0.0, 1.0);
    return c;
}

namespace {

std::vector<std::array<double, 3>> field_colors(const fields::AttributeField& field, std::span<const Vec3d> pts)
{
    std::vector<std::array<double, 3>> out;
    out.reserve(pts.size());
    for (size_t b = 0; b < pts.size(); b += kEvalBatch) {
        const auto attrs = field.eval(pts.subspan(b, std::min(kEvalBatch, pts.size() - b)));
        for (const auto& a : attrs) out.push_back(sh_dc_color(a));
    }
    return out;
}

} // namespace

TriMesh bake_texture(const TriMesh& mesh, const fields::AttributeField& field, const BakeOptions& options)
{
    TriMesh out = mesh;
    out.colors = field_colors(field, mesh.vertices);
    if (options.atlas_size <= 0 || mesh.empty()) return out;

    const int size = options.atlas_size;
    const size_t T = mesh.triangles.size();
    const int g = static_cast<int>(std::ceil(std::sqrt(double(T))));
    const int c = size / g;
    if (c < 4) throw ParameterError("bake_texture: atlas too small for the triangle count");

    out.atlas = Image(size, size, 3);
    out.uv.resize(3 * T);
    std::vector<Vec3d> pts;
    std::vector<size_t> texel;
    pts.reserve(T * static_cast<size_t>(c) * c);
    texel.reserve(pts.capacity());
    const double leg = c - 2.0;
    for (size_t t = 0; t < T; ++t) {
        const int x0 = static_cast<int>(t % g) * c, y0 = static_cast<int>(t / g) * c;
        out.uv[3 * t] = {(x0 + 1.0) / size, (y0 + 1.0) / size};
        out.uv[3 * t + 1] = {(x0 + c - 1.0) / size, (y0 + 1.0) / size};
        out.uv[3 * t + 2] = {(x0 + 1.0) / size, (y0 + c - 1.0) / size};
        const auto& tri = mesh.triangles[t];
        const Vec3d& p0 = mesh.vertices[tri[0]];
        const Vec3d e1 = mesh.vertices[tri[1]] - p0, e2 = mesh.vertices[tri[2]] - p0;
        // Texels outside the chart extrapolate the chart's affine map, which
        // keeps bilinear lookups inside the chart free of seams.
        for (int j = 0; j < c; ++j)
            for (int i = 0; i < c; ++i) {
                const double bu = (i + 0.5 - 1.0) / leg, bv = (j + 0.5 - 1.0) / leg;
                pts.push_back(p0 + e1 * bu + e2 * bv);
                texel.push_back(static_cast<size_t>(y0 + j) * size + static_cast<size_t>(x0 + i));
            }
    }
    const auto colors = field_colors(field, pts);
    for (size_t i = 0; i < pts.size(); ++i)
        for (int ch = 0; ch < 3; ++ch) out.atlas.data[texel[i] * 3 + ch] = colors[i][ch];
    return out;
}

std::array<double, 3> sample_atlas(const TriMesh& mesh, size_t triangle, const Vec3d& bary)
{
    if (mesh.atlas.size() == 0 || mesh.uv.size() != 3 * mesh.triangles.size())
        throw ParameterError("sample_atlas: mesh has no atlas");
    const Vec2d* uv = &mesh.uv[3 * triangle];
    const double u = bary.x * uv[0].x + bary.y * uv[1].x + bary.z * uv[2].x;
    const double v = bary.x * uv[0].y + bary.y * uv[1].y + bary.z * uv[2].y;
    const Image& img = mesh.atlas;
    const double fx = u * img.width - 0.5, fy = v * img.height - 0.5;
    const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, img.height - 1);
    const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double tx = std::clamp(fx - x0, 0.0, 1.0), ty = std::clamp(fy - y0, 0.0, 1.0);
    std::array<double, 3> out;
    for (int ch = 0; ch < 3; ++ch)
        out[ch] = (1 - ty) * ((1 - tx) * img.at(x0, y0, ch) + tx * img.at(x1, y0, ch)) +
                  ty * ((1 - tx) * img.at(x0, y1, ch) + tx * img.at(x1, y1, ch));
    return out;
}

} // namespace gavatar::mesh
