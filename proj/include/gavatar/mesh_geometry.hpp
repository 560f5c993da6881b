#pragma once

// Mesh extraction from the SDF with marching tetrahedra, a z-buffered mesh
// rasterizer for normal and mask images, the geometry losses and texture
// baking from the attribute field.

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "gavatar/image.hpp"
#include "gavatar/math.hpp"
#include "gavatar/neural_fields.hpp"
#include "gavatar/splat_renderer.hpp"

namespace gavatar::mesh {

// Cube lattice over a box, each cube split into 6 tetrahedra sharing the
// cube's main diagonal, so neighbouring cubes agree on every face diagonal.
struct TetGrid {
    int resolution = 0; // cubes per axis
    Vec3d box_min, box_max;
    std::vector<Vec3d> vertices;
    std::vector<std::array<uint32_t, 4>> tets;

    static TetGrid make(int resolution, const Vec3d& box_min = {-1.1, -1.1, -1.1},
                        const Vec3d& box_max = {1.1, 1.1, 1.1});

    uint32_t vertex_index(int i, int j, int k) const
    {
        const uint32_t n = static_cast<uint32_t>(resolution) + 1;
        return (static_cast<uint32_t>(k) * n + static_cast<uint32_t>(j)) * n + static_cast<uint32_t>(i);
    }
    double cell_size() const { return (box_max.x - box_min.x) / resolution; }
};

struct TriMesh {
    std::vector<Vec3d> vertices;
    std::vector<std::array<uint32_t, 3>> triangles;
    std::vector<Vec3d> normals;                 // unit, per vertex
    std::vector<std::array<double, 3>> colors;  // optional, per vertex, [0, 1]
    std::vector<Vec2d> uv;                      // optional, 3 per triangle, origin top-left
    Image atlas;                                // optional RGB texture

    bool empty() const { return triangles.empty(); }
    void compute_normals();
    void validate() const;
};

// Area-weighted (unnormalized) vertex normals: the sum of the face cross
// products around each vertex.
std::vector<Vec3d> vertex_normal_sums(const TriMesh& mesh);

// Chains gradients w.r.t. the normal sums back to vertex positions.
void normal_sums_backward(const TriMesh& mesh, std::span<const Vec3d> dsums, std::span<Vec3d> dvertices);

struct MeshExtraction {
    TriMesh mesh;
    std::vector<uint32_t> grid_vertices;           // grid vertices on crossing edges
    std::vector<double> values;                    // SDF at grid_vertices (snapped)
    std::vector<std::array<uint32_t, 2>> edges;    // per mesh vertex, local indices into grid_vertices
};

// Evaluates the SDF at every grid vertex in bounded batches.
std::vector<double> evaluate_grid(const fields::SdfField& sdf, const TetGrid& grid);

// Zero crossings of the sampled SDF (negative inside). Triangles face
// increasing SDF. Uniform-sign input gives an empty mesh.
MeshExtraction marching_tets(std::span<const double> values, const TetGrid& grid);
MeshExtraction marching_tets(const fields::SdfField& sdf, const TetGrid& grid);

// Keeps the topology and moves every vertex to the root on its edge for the
// given SDF values at grid_vertices. Roots are clamped to the edge.
void update_vertices(MeshExtraction& ex, const TetGrid& grid, std::span<const double> values);
void refresh(MeshExtraction& ex, const fields::SdfField& sdf, const TetGrid& grid);

// dL/d(values at grid_vertices) from dL/d(mesh vertices).
std::vector<double> vertices_backward(const MeshExtraction& ex, const TetGrid& grid, std::span<const Vec3d> dvertices);

// Full chain to the SDF parameters.
void extraction_backward(const fields::SdfField& sdf, const TetGrid& grid, const MeshExtraction& ex,
                         std::span<const Vec3d> dvertices, fields::FieldGrad& grad);

// Camera-space normal encoded to [0, 1]^3 with x right, y up and z towards
// the viewer, so a surface facing the camera reads (0.5, 0.5, 1).
std::array<double, 3> encode_normal(const render::Camera& cam, const Vec3d& world_normal);

struct MeshRender {
    Image normal; // W x H x 3
    Image mask;   // W x H x 1, antialiased on silhouettes
    std::vector<int32_t> triangle; // per pixel, -1 where uncovered

    // Silhouette antialiasing: pixel gets mask += x - 0.5 (neighbour side) or
    // mask -= 0.5 - x (covered side), where x in [0, 1] is the crossing of a
    // silhouette edge along the segment between the two pixel centers.
    struct EdgeEvent {
        uint32_t pixel;
        uint32_t a, b;   // edge vertices
        Vec2d center;    // covered pixel center
        int axis;        // 0: horizontal neighbour, 1: vertical
        int dir;         // +1 or -1
        double crossing;
    };
    std::vector<EdgeEvent> events;
};

MeshRender rasterize_mesh(const TriMesh& mesh, const render::Camera& cam,
                          const std::array<double, 3>& normal_background = {0.0, 0.0, 0.0});

// dL/dvertices from gradients of the normal image and the mask (either may
// be empty). Normals are differentiated through vertex_normal_sums.
std::vector<Vec3d> rasterize_mesh_backward(const TriMesh& mesh, const render::Camera& cam, const MeshRender& out,
                                           const Image& dnormal, const Image& dmask);

// Mean of (|grad S| - 1)^2 with the gradient taken by central differences
// of step h.
double eikonal_loss(const std::function<double(const Vec3d&)>& sdf, std::span<const Vec3d> points, double h = 1e-3);
double eikonal_loss(const fields::SdfField& sdf, std::span<const Vec3d> points, fields::FieldGrad* grad,
                    double h = 1e-3);

// Gaussian centers plus `perturbed` samples drawn around randomly chosen
// centers with the given standard deviation.
std::vector<Vec3d> eikonal_samples(std::span<const Vec3d> centers, size_t perturbed, double stddev,
                                   std::mt19937_64& rng);

struct AlphaLoss {
    double value = 0.0;
    Image dmask;
    Image dalpha;
};

// |I_M - I_alpha|^2 / (W H).
AlphaLoss alpha_loss(const Image& mask, const Image& alpha);

// Mean over unique edges of 1 - n_a . n_b with area-weighted vertex normals.
// Optionally accumulates dL/dvertices.
double normal_consistency_loss(const TriMesh& mesh, std::span<Vec3d> dvertices = {});

struct BakeOptions {
    int atlas_size = 0; // 0 disables the uv atlas
};

// Vertex colors from the degree-0 SH of the attribute field at the (canonical)
// vertex positions, plus an optional atlas with one chart per triangle.
TriMesh bake_texture(const TriMesh& mesh, const fields::AttributeField& field, const BakeOptions& options = {});

std::array<double, 3> sh_dc_color(const fields::Attributes& a);

// Bilinear lookup of the atlas at a point given by barycentric coordinates.
std::array<double, 3> sample_atlas(const TriMesh& mesh, size_t triangle, const Vec3d& bary);

} // namespace gavatar::mesh
