#pragma once

// Persistent formats: configuration, template assets, pose sequences,
// checkpoints, reference views, PNG images and mesh files. Byte layouts are
// documented in docs/formats.md.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gavatar/adam.hpp"
#include "gavatar/image.hpp"
#include "gavatar/mesh_geometry.hpp"
#include "gavatar/neural_fields.hpp"
#include "gavatar/optimizer.hpp"
#include "gavatar/scene.hpp"

namespace gavatar::io {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path);
// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view bytes);

uint32_t crc32(std::string_view bytes);

// ---- configuration ----

struct AppConfig {
    scene::SceneConfig scene;
    fields::PretrainOptions pretrain;
    optim::TrainConfig train;
};

// Missing keys keep their defaults; unknown keys and wrong types throw
// ParameterError naming the key.
AppConfig parse_config(std::string_view json_text);
std::string dump_config(const AppConfig& config);
AppConfig load_config(const fs::path& path);

// ---- template asset ("GAVT") ----

std::string encode_template(const body::BodyModel& body);
body::BodyModel decode_template(std::string_view bytes);
void save_template(const fs::path& path, const body::BodyModel& body);
body::BodyModel load_template(const fs::path& path);

// ---- pose sequences (JSON) ----

struct PoseSequence {
    double fps = 30.0;
    std::vector<std::vector<Vec3d>> poses;   // axis-angle per joint, per frame
    std::vector<Vec3d> translation;          // empty or one per frame
    std::vector<double> shape;               // optional

    size_t frames() const { return poses.size(); }
    size_t joints() const { return poses.empty() ? 0 : poses.front().size(); }
    void validate() const;
};

PoseSequence parse_pose_sequence(std::string_view json_text);
std::string dump_pose_sequence(const PoseSequence& seq);
PoseSequence load_pose_sequence(const fs::path& path);
void save_pose_sequence(const fs::path& path, const PoseSequence& seq);

// ---- checkpoint ("GAVC") ----

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    AppConfig config;
    scene::Scene scene;
    std::optional<AdamState> adam;
    int64_t iteration = 0;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError on truncation, bad magic, unsupported version, a
// checksum mismatch (naming the section) or inconsistent sizes.
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

// ---- images ----

double linear_to_srgb(double v);
double srgb_to_linear(double v);

// 8-bit PNG with 1, 3 or 4 channels. Color channels are sRGB-encoded when
// srgb is set; alpha is always stored linearly.
std::string encode_png(const Image& image, bool srgb = true);
Image decode_png(std::string_view bytes, bool srgb = true);
void write_png(const fs::path& path, const Image& image, bool srgb = true);
Image read_png(const fs::path& path, bool srgb = true);

// ---- reference views ----

struct ViewSet {
    std::vector<render::Camera> cameras;
    std::vector<Image> images; // linear RGB
    std::array<double, 3> background{0.0, 0.0, 0.0};

    size_t size() const { return cameras.size(); }
};

// dir/views.json plus one PNG per view.
void save_views(const fs::path& dir, const ViewSet& views);
ViewSet load_views(const fs::path& dir);

// ---- meshes ----

// OBJ with optional per-vertex colors ("v x y z r g b"). When the mesh has
// an atlas, a .mtl and a PNG texture are written next to it.
void write_obj(const fs::path& path, const mesh::TriMesh& mesh);
mesh::TriMesh read_obj(const fs::path& path);

// Binary little-endian PLY: float x y z, uchar red green blue, and a face
// list (uchar count, int indices).
std::string encode_ply(const mesh::TriMesh& mesh);
mesh::TriMesh decode_ply(std::string_view bytes);
void write_ply(const fs::path& path, const mesh::TriMesh& mesh);
mesh::TriMesh read_ply(const fs::path& path);

} // namespace gavatar::io
