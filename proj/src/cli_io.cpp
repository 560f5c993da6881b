#include "gavatar/cli_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>
#include <png.h>
#include <zlib.h>

#include "gavatar/errors.hpp"

namespace gavatar::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes)
{
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw FormatError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw FormatError("cannot move '" + tmp.string() + "' into place: " + ec.message());
    }
}

uint32_t crc32(std::string_view bytes)
{
    uLong c = ::crc32(0L, Z_NULL, 0);
    size_t pos = 0;
    while (pos < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<size_t>(bytes.size() - pos, 1u << 30));
        c = ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + pos), n);
        pos += n;
    }
    return static_cast<uint32_t>(c);
}

namespace {

class Writer {
public:
    template <class T>
    void put(T v)
    {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        out.append(b, sizeof(T));
    }
    template <class T>
    void put_array(const std::vector<T>& v)
    {
        if (!v.empty()) out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
    }
    void bytes(std::string_view s) { out.append(s); }

    std::string out;
};

class Reader {
public:
    Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    void need(size_t n) const
    {
        if (n > data_.size() - pos_) throw FormatError(what_ + ": truncated");
    }
    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    template <class T>
    std::vector<T> get_array(size_t n)
    {
        if (n > (data_.size() - pos_) / sizeof(T)) throw FormatError(what_ + ": truncated");
        std::vector<T> v(n);
        if (n) std::memcpy(v.data(), data_.data() + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
        return v;
    }
    std::string_view bytes(size_t n)
    {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    size_t pos() const { return pos_; }
    size_t remaining() const { return data_.size() - pos_; }

private:
    std::string_view data_;
    std::string what_;
    size_t pos_ = 0;
};

// ---- config visitors ----

template <class V>
void visit(V& v, fields::HashGridConfig& c)
{
    v("levels", c.levels);
    v("features", c.features);
    v("log2_table", c.log2_table);
    v("base_resolution", c.base_resolution);
    v("growth", c.growth);
    v("box_min", c.box_min);
    v("box_max", c.box_max);
}

template <class V>
void visit(V& v, scene::SceneConfig& c)
{
    v("anchor_grid", c.anchor_grid);
    v("gaussians_per_primitive", c.gaussians_per_primitive);
    v("corrective_hidden", c.corrective_hidden);
    v("field_hidden", c.field_hidden);
    v("attribute_grid", c.attribute_grid);
    v("sdf_grid", c.sdf_grid);
    v("seed", c.seed);
}

template <class V>
void visit(V& v, fields::PretrainOptions& c)
{
    v("target_scale", c.target_scale);
    v("sdf_tolerance", c.sdf_tolerance);
    v("scale_tolerance", c.scale_tolerance);
    v("noise_std", c.noise_std);
    v("uniform_fraction", c.uniform_fraction);
    v("batch", c.batch);
    v("max_steps", c.max_steps);
    v("check_every", c.check_every);
    v("lr", c.lr);
    v("eikonal_weight", c.eikonal_weight);
    v("eikonal_batch", c.eikonal_batch);
    v("seed", c.seed);
}

template <class V>
void visit(V& v, optim::LossWeights& c)
{
    v("sds", c.sds);
    v("pos", c.pos);
    v("eik", c.eik);
    v("alpha", c.alpha);
    v("nsds", c.nsds);
    v("nc", c.nc);
}

template <class V>
void visit(V& v, optim::LearningRates& c)
{
    v("positions", c.positions);
    v("attributes", c.attributes);
    v("sdf", c.sdf);
    v("kernel", c.kernel);
    v("correctives", c.correctives);
    v("shape", c.shape);
    v("natural_pose", c.natural_pose);
}

template <class V>
void visit(V& v, soup::DensifyConfig& c)
{
    v("enabled", c.enabled);
    v("grad_threshold", c.grad_threshold);
    v("min_opacity", c.min_opacity);
    v("size_threshold", c.size_threshold);
    v("split_divisor", c.split_divisor);
}

template <class V>
void visit(V& v, optim::CameraRanges& c)
{
    v("radius", c.radius);
    v("elevation_min", c.elevation_min);
    v("elevation_max", c.elevation_max);
    v("fovy_min", c.fovy_min);
    v("fovy_max", c.fovy_max);
    v("azimuth_min", c.azimuth_min);
    v("azimuth_max", c.azimuth_max);
}

template <class V>
void visit(V& v, optim::TrainConfig& c)
{
    v("iterations", c.iterations);
    v("natural_only", c.natural_only);
    v("zoom_in_start", c.zoom_in_start);
    v("densify_interval", c.densify_interval);
    v("densify_until", c.densify_until);
    v("gaussian_cap", c.gaussian_cap);
    v("mesh_interval", c.mesh_interval);
    v("mesh_resolution", c.mesh_resolution);
    v("weights", c.weights);
    v("learning_rates", c.lr);
    v("width", c.width);
    v("height", c.height);
    v("background", c.background);
    v("seed", c.seed);
    v("densify", c.densify);
    v("camera", c.camera);
    v("eikonal_centers", c.eikonal_centers);
    v("eikonal_perturbed", c.eikonal_perturbed);
    v("eikonal_std", c.eikonal_std);
    v("prompt", c.prompt);
    v("t_min", c.t_min);
    v("t_max", c.t_max);
    v("t_max_final", c.t_max_final);
    v("divergence_threshold", c.divergence_threshold);
    v("snapshot_interval", c.snapshot_interval);
    v("log_timing", c.log_timing);
}

template <class V>
void visit(V& v, AppConfig& c)
{
    v("scene", c.scene);
    v("pretrain", c.pretrain);
    v("train", c.train);
}

template <class T>
constexpr bool is_scalar_v = std::is_arithmetic_v<T> || std::is_same_v<T, std::string>;

struct Dump {
    ojson j = ojson::object();

    template <class T>
    void operator()(const char* key, const T& v)
    {
        if constexpr (std::is_same_v<T, Vec3d>) {
            j[key] = {v.x, v.y, v.z};
        } else if constexpr (is_scalar_v<T> || std::is_same_v<T, std::array<double, 3>>) {
            j[key] = v;
        } else {
            Dump d;
            visit(d, const_cast<T&>(v));
            j[key] = std::move(d.j);
        }
    }
};

struct Load {
    const json& j;
    std::string path;
    std::set<std::string> seen;

    [[noreturn]] void bad(const std::string& key, const char* want) const
    {
        throw ParameterError("config: '" + path + key + "' must be " + want);
    }

    static bool three_numbers(const json& x)
    {
        if (!x.is_array() || x.size() != 3) return false;
        for (const auto& e : x)
            if (!e.is_number()) return false;
        return true;
    }

    template <class T>
    void operator()(const char* key, T& v)
    {
        seen.insert(key);
        const auto it = j.find(key);
        if (it == j.end()) return;
        const json& x = *it;
        if constexpr (std::is_same_v<T, bool>) {
            if (!x.is_boolean()) bad(key, "a boolean");
            v = x.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!x.is_number_integer()) bad(key, "an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (x.is_number_unsigned()) v = static_cast<T>(x.get<uint64_t>());
                else if (x.get<int64_t>() < 0) bad(key, "non-negative");
                else v = static_cast<T>(x.get<int64_t>());
            } else {
                const int64_t n = x.get<int64_t>();
                if (n < static_cast<int64_t>(std::numeric_limits<T>::min()) ||
                    n > static_cast<int64_t>(std::numeric_limits<T>::max()))
                    bad(key, "in range");
                v = static_cast<T>(n);
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!x.is_number()) bad(key, "a number");
            v = x.get<double>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!x.is_string()) bad(key, "a string");
            v = x.get<std::string>();
        } else if constexpr (std::is_same_v<T, Vec3d>) {
            if (!three_numbers(x)) bad(key, "an array of 3 numbers");
            v = {x[0].get<double>(), x[1].get<double>(), x[2].get<double>()};
        } else if constexpr (std::is_same_v<T, std::array<double, 3>>) {
            if (!three_numbers(x)) bad(key, "an array of 3 numbers");
            v = {x[0].get<double>(), x[1].get<double>(), x[2].get<double>()};
        } else {
            if (!x.is_object()) bad(key, "an object");
            Load sub{x, path + key + ".", {}};
            visit(sub, v);
            sub.finish();
        }
    }

    void finish() const
    {
        for (const auto& item : j.items())
            if (!seen.count(item.key())) throw ParameterError("config: unknown key '" + path + item.key() + "'");
    }
};

} // namespace

AppConfig parse_config(std::string_view text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParameterError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParameterError("config: top level must be an object");
    AppConfig c;
    Load l{j, "", {}};
    visit(l, c);
    l.finish();
    c.scene.validate();
    c.train.validate();
    return c;
}

std::string dump_config(const AppConfig& config)
{
    Dump d;
    visit(d, const_cast<AppConfig&>(config));
    return d.j.dump(2) + "\n";
}

AppConfig load_config(const fs::path& path)
{
    if (!fs::exists(path)) throw ParameterError("config: file '" + path.string() + "' not found");
    return parse_config(read_file(path));
}

// ---- template asset ----

namespace {

constexpr char kTemplateMagic[4] = {'G', 'A', 'V', 'T'};
constexpr uint32_t kTemplateVersion = 1;

ojson vec_json(const Vec3d& v) { return ojson::array({v.x, v.y, v.z}); }

Vec3d json_vec(const json& x, const char* what)
{
    if (!x.is_array() || x.size() != 3) throw FormatError(std::string("template: '") + what + "' must have 3 numbers");
    return {x[0].get<double>(), x[1].get<double>(), x[2].get<double>()};
}

} // namespace

std::string encode_template(const body::BodyModel& b)
{
    const auto& m = b.mesh;
    m.validate(b.skeleton.size());
    ojson h;
    h["joints"] = ojson::array();
    for (const auto& jt : b.skeleton.joints) {
        ojson o;
        o["name"] = jt.name;
        o["parent"] = jt.parent;
        o["rest_rotation"] = {jt.rest_rotation.w, jt.rest_rotation.x, jt.rest_rotation.y, jt.rest_rotation.z};
        o["rest_translation"] = vec_json(jt.rest_translation);
        h["joints"].push_back(o);
    }
    h["capsules"] = ojson::array();
    for (const auto& c : b.capsules) {
        ojson o;
        o["joint"] = c.joint;
        o["a"] = vec_json(c.a);
        o["b"] = vec_json(c.b);
        o["radius"] = c.radius;
        h["capsules"].push_back(o);
    }
    h["vertices"] = m.vertices.size();
    h["triangles"] = m.triangles.size();
    const std::string header = h.dump();

    Writer w;
    w.bytes(std::string_view(kTemplateMagic, 4));
    w.put<uint32_t>(kTemplateVersion);
    w.put<uint32_t>(static_cast<uint32_t>(header.size()));
    w.bytes(header);
    for (const auto& v : m.vertices)
        for (int a = 0; a < 3; ++a) w.put<float>(static_cast<float>(v[a]));
    for (const auto& t : m.triangles)
        for (int i : t) w.put<uint32_t>(static_cast<uint32_t>(i));
    for (const auto& s : m.skin_joints)
        for (int i : s) w.put<uint32_t>(static_cast<uint32_t>(i));
    for (const auto& s : m.skin_weights)
        for (double x : s) w.put<float>(static_cast<float>(x));
    for (const auto& uv : m.uv) {
        w.put<float>(static_cast<float>(uv.x));
        w.put<float>(static_cast<float>(uv.y));
    }
    return std::move(w.out);
}

body::BodyModel decode_template(std::string_view bytes)
{
    Reader r(bytes, "template");
    if (r.bytes(4) != std::string_view(kTemplateMagic, 4)) throw FormatError("template: bad magic");
    const auto version = r.get<uint32_t>();
    if (version != kTemplateVersion) throw FormatError("template: unsupported version " + std::to_string(version));
    const auto hlen = r.get<uint32_t>();
    json h;
    try {
        h = json::parse(r.bytes(hlen));
    } catch (const json::exception& e) {
        throw FormatError(std::string("template: bad header: ") + e.what());
    }
    body::BodyModel b;
    try {
        for (const auto& o : h.at("joints")) {
            body::Joint jt;
            jt.name = o.at("name").get<std::string>();
            jt.parent = o.at("parent").get<int>();
            const auto& q = o.at("rest_rotation");
            if (!q.is_array() || q.size() != 4) throw FormatError("template: rest_rotation must have 4 numbers");
            jt.rest_rotation = {q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>()};
            jt.rest_translation = json_vec(o.at("rest_translation"), "rest_translation");
            b.skeleton.joints.push_back(jt);
        }
        for (const auto& o : h.at("capsules")) {
            body::Capsule c;
            c.joint = o.at("joint").get<int>();
            c.a = json_vec(o.at("a"), "a");
            c.b = json_vec(o.at("b"), "b");
            c.radius = o.at("radius").get<double>();
            b.capsules.push_back(c);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("template: bad header: ") + e.what());
    }
    const size_t nv = h.value("vertices", size_t{0}), nt = h.value("triangles", size_t{0});
    const size_t need = nv * (3 * 4 + 4 * 4 + 4 * 4 + 2 * 4) + nt * 3 * 4;
    if (r.remaining() < need) throw FormatError("template: truncated");
    if (r.remaining() > need) throw FormatError("template: trailing bytes");
    auto& m = b.mesh;
    const auto verts = r.get_array<float>(3 * nv);
    const auto tris = r.get_array<uint32_t>(3 * nt);
    const auto sj = r.get_array<uint32_t>(4 * nv);
    const auto sw = r.get_array<float>(4 * nv);
    const auto uv = r.get_array<float>(2 * nv);
    m.vertices.resize(nv);
    m.skin_joints.resize(nv);
    m.skin_weights.resize(nv);
    m.uv.resize(nv);
    for (size_t i = 0; i < nv; ++i) {
        m.vertices[i] = {verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]};
        for (int a = 0; a < 4; ++a) {
            m.skin_joints[i][a] = static_cast<int>(sj[4 * i + a]);
            m.skin_weights[i][a] = sw[4 * i + a];
        }
        m.uv[i] = {uv[2 * i], uv[2 * i + 1]};
    }
    m.triangles.resize(nt);
    for (size_t t = 0; t < nt; ++t)
        for (int a = 0; a < 3; ++a) m.triangles[t][a] = static_cast<int>(tris[3 * t + a]);
    try {
        b.skeleton.validate();
        m.validate(b.skeleton.size());
    } catch (const ParameterError& e) {
        throw FormatError(std::string("template: ") + e.what());
    }
    for (const auto& c : b.capsules)
        if (c.joint < 0 || static_cast<size_t>(c.joint) >= b.skeleton.size())
            throw FormatError("template: capsule joint out of range");
    return b;
}

void save_template(const fs::path& path, const body::BodyModel& body) { write_file_atomic(path, encode_template(body)); }

body::BodyModel load_template(const fs::path& path) { return decode_template(read_file(path)); }

// ---- pose sequences ----

void PoseSequence::validate() const
{
    if (!(fps > 0.0) || !std::isfinite(fps)) throw ParameterError("pose sequence: fps must be positive");
    if (poses.empty()) throw ParameterError("pose sequence: no frames");
    for (size_t f = 0; f < poses.size(); ++f) {
        if (poses[f].size() != joints())
            throw ParameterError("pose sequence: frame " + std::to_string(f) + " has " +
                                 std::to_string(poses[f].size()) + " joints, expected " + std::to_string(joints()));
        for (const auto& r : poses[f])
            if (!std::isfinite(r.x) || !std::isfinite(r.y) || !std::isfinite(r.z))
                throw ParameterError("pose sequence: non-finite value in frame " + std::to_string(f));
    }
    if (!translation.empty() && translation.size() != poses.size())
        throw ParameterError("pose sequence: translation must be given for every frame or none");
    for (const auto& t : translation)
        if (!std::isfinite(t.x) || !std::isfinite(t.y) || !std::isfinite(t.z))
            throw ParameterError("pose sequence: non-finite translation");
    for (double b : shape)
        if (!std::isfinite(b)) throw ParameterError("pose sequence: non-finite shape");
}

PoseSequence parse_pose_sequence(std::string_view text)
{
    PoseSequence s;
    try {
        const json j = json::parse(text);
        s.fps = j.at("fps").get<double>();
        bool any_t = false, all_t = true;
        for (const auto& fr : j.at("frames")) {
            std::vector<Vec3d> pose;
            for (const auto& r : fr.at("pose")) {
                if (!r.is_array() || r.size() != 3) throw ParameterError("pose sequence: each joint needs 3 values");
                pose.push_back({r[0].get<double>(), r[1].get<double>(), r[2].get<double>()});
            }
            s.poses.push_back(std::move(pose));
            if (fr.contains("translation")) {
                const auto& t = fr["translation"];
                if (!t.is_array() || t.size() != 3) throw ParameterError("pose sequence: translation needs 3 values");
                s.translation.push_back({t[0].get<double>(), t[1].get<double>(), t[2].get<double>()});
                any_t = true;
            } else {
                all_t = false;
            }
        }
        if (any_t && !all_t) throw ParameterError("pose sequence: translation must be given for every frame or none");
        if (j.contains("shape")) s.shape = j["shape"].get<std::vector<double>>();
        if (j.contains("joints") && j["joints"].get<size_t>() != s.joints())
            throw ParameterError("pose sequence: 'joints' does not match the frames");
    } catch (const json::exception& e) {
        throw ParameterError(std::string("pose sequence: ") + e.what());
    }
    s.validate();
    return s;
}

std::string dump_pose_sequence(const PoseSequence& s)
{
    s.validate();
    ojson j;
    j["fps"] = s.fps;
    j["joints"] = s.joints();
    if (!s.shape.empty()) j["shape"] = s.shape;
    j["frames"] = ojson::array();
    for (size_t f = 0; f < s.frames(); ++f) {
        ojson fr;
        fr["pose"] = ojson::array();
        for (const auto& r : s.poses[f]) fr["pose"].push_back(vec_json(r));
        if (!s.translation.empty()) fr["translation"] = vec_json(s.translation[f]);
        j["frames"].push_back(fr);
    }
    return j.dump(1) + "\n";
}

PoseSequence load_pose_sequence(const fs::path& path)
{
    if (!fs::exists(path)) throw ParameterError("pose sequence: file '" + path.string() + "' not found");
    return parse_pose_sequence(read_file(path));
}

void save_pose_sequence(const fs::path& path, const PoseSequence& seq)
{
    write_file_atomic(path, dump_pose_sequence(seq));
}

// ---- checkpoint ----

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'A', 'V', 'C'};

enum class DType : uint8_t { Bytes = 0, U8 = 1, I32 = 2, U64 = 3, F64 = 4, I64 = 5 };

size_t dtype_size(DType t)
{
    switch (t) {
    case DType::Bytes:
    case DType::U8: return 1;
    case DType::I32: return 4;
    case DType::U64:
    case DType::F64:
    case DType::I64: return 8;
    }
    throw FormatError("checkpoint: unknown dtype");
}

struct Section {
    std::string name;
    DType type;
    std::string data;
};

template <class T>
std::string blob(const std::vector<T>& v)
{
    return std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

template <class T>
std::vector<T> unblob(const std::string_view s)
{
    std::vector<T> v(s.size() / sizeof(T));
    if (!v.empty()) std::memcpy(v.data(), s.data(), v.size() * sizeof(T));
    return v;
}

std::vector<double> flatten(const std::vector<Vec3d>& v)
{
    std::vector<double> out;
    out.reserve(3 * v.size());
    for (const auto& x : v) out.insert(out.end(), {x.x, x.y, x.z});
    return out;
}

std::string encode_adam(const AdamState& st)
{
    Writer w;
    w.put<int64_t>(st.steps);
    w.put<int64_t>(st.skipped);
    w.put<uint32_t>(static_cast<uint32_t>(st.groups.size()));
    for (const auto& g : st.groups) {
        w.put<uint16_t>(static_cast<uint16_t>(g.name.size()));
        w.bytes(g.name);
        w.put<double>(g.lr);
        w.put<uint32_t>(static_cast<uint32_t>(g.slots.size()));
        for (const auto& s : g.slots) {
            w.put<uint64_t>(s.m.size());
            w.put_array(s.m);
            w.put_array(s.v);
        }
    }
    return std::move(w.out);
}

AdamState decode_adam(std::string_view bytes)
{
    Reader r(bytes, "checkpoint section 'adam'");
    AdamState st;
    st.steps = r.get<int64_t>();
    st.skipped = r.get<int64_t>();
    const auto ng = r.get<uint32_t>();
    for (uint32_t g = 0; g < ng; ++g) {
        AdamState::Group sg;
        sg.name = std::string(r.bytes(r.get<uint16_t>()));
        sg.lr = r.get<double>();
        const auto ns = r.get<uint32_t>();
        for (uint32_t k = 0; k < ns; ++k) {
            const auto n = r.get<uint64_t>();
            AdamState::Slot s;
            s.m = r.get_array<double>(n);
            s.v = r.get_array<double>(n);
            sg.slots.push_back(std::move(s));
        }
        st.groups.push_back(std::move(sg));
    }
    if (r.remaining()) throw FormatError("checkpoint section 'adam': trailing bytes");
    return st;
}

std::vector<Section> checkpoint_sections(const Checkpoint& c)
{
    const auto& s = c.scene;
    const auto& b = s.bank;
    std::vector<Section> out;
    out.push_back({"config", DType::Bytes, dump_config(c.config)});
    out.push_back({"template", DType::Bytes, encode_template(s.body)});
    out.push_back({"bank.positions", DType::F64, blob(b.positions)});
    out.push_back({"bank.primitive", DType::I32, blob(b.primitive)});
    std::vector<uint64_t> offsets(b.offsets.begin(), b.offsets.end());
    out.push_back({"bank.offsets", DType::U64, blob(offsets)});
    out.push_back({"bank.rotations", DType::F64, blob(b.rotations)});
    out.push_back({"bank.scales", DType::F64, blob(b.scales)});
    out.push_back({"bank.sh", DType::F64, blob(b.sh)});
    out.push_back({"bank.opacity", DType::F64, blob(b.opacity)});
    out.push_back({"bank.baked", DType::U8, std::string(1, b.baked ? '\1' : '\0')});
    out.push_back({"attributes.grid", DType::F64, blob(s.attributes.grid.params())});
    out.push_back({"attributes.mlp", DType::F64, blob(s.attributes.mlp.params())});
    out.push_back({"sdf.grid", DType::F64, blob(s.sdf.grid.params())});
    out.push_back({"sdf.mlp", DType::F64, blob(s.sdf.mlp.params())});
    out.push_back({"correctives", DType::F64, blob(s.nets.mlp.params())});
    out.push_back({"kernel", DType::F64, blob(std::vector<double>{s.kernel.log_gamma, s.kernel.log_lambda})});
    out.push_back({"natural.pose", DType::F64, blob(flatten(s.natural.pose))});
    out.push_back({"natural.shape", DType::F64, blob(s.natural.shape)});
    out.push_back({"rest.pose", DType::F64, blob(flatten(s.rest.pose))});
    out.push_back({"rest.shape", DType::F64, blob(s.rest.shape)});
    out.push_back({"trainer.iteration", DType::I64, blob(std::vector<int64_t>{c.iteration})});
    if (c.adam) out.push_back({"adam", DType::Bytes, encode_adam(*c.adam)});
    return out;
}

const std::vector<std::string>& known_sections()
{
    static const std::vector<std::string> names = {
        "config",         "template",        "bank.positions", "bank.primitive", "bank.offsets",
        "bank.rotations", "bank.scales",     "bank.sh",        "bank.opacity",   "bank.baked",
        "attributes.grid", "attributes.mlp", "sdf.grid",       "sdf.mlp",        "correctives",
        "kernel",         "natural.pose",    "natural.shape",  "rest.pose",      "rest.shape",
        "trainer.iteration", "adam"};
    return names;
}

} // namespace

std::string encode_checkpoint(const Checkpoint& c)
{
    c.scene.validate();
    const auto sections = checkpoint_sections(c);
    size_t table = 4 + 4 + 4;
    for (const auto& s : sections) table += 2 + s.name.size() + 1 + 8 + 8 + 4;
    Writer w;
    w.bytes(std::string_view(kCheckpointMagic, 4));
    w.put<uint32_t>(kCheckpointVersion);
    w.put<uint32_t>(static_cast<uint32_t>(sections.size()));
    uint64_t offset = table;
    for (const auto& s : sections) {
        w.put<uint16_t>(static_cast<uint16_t>(s.name.size()));
        w.bytes(s.name);
        w.put<uint8_t>(static_cast<uint8_t>(s.type));
        w.put<uint64_t>(offset);
        w.put<uint64_t>(s.data.size());
        w.put<uint32_t>(crc32(s.data));
        offset += s.data.size();
    }
    for (const auto& s : sections) w.bytes(s.data);
    return std::move(w.out);
}

Checkpoint decode_checkpoint(std::string_view bytes)
{
    Reader r(bytes, "checkpoint");
    if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic");
    const auto version = r.get<uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get<uint32_t>();
    struct Entry {
        DType type;
        std::string_view data;
    };
    std::map<std::string, Entry> sec;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name(r.bytes(r.get<uint16_t>()));
        const auto type = static_cast<DType>(r.get<uint8_t>());
        const auto offset = r.get<uint64_t>();
        const auto size = r.get<uint64_t>();
        const auto crc = r.get<uint32_t>();
        if (offset > bytes.size() || size > bytes.size() - offset) throw FormatError("checkpoint: truncated");
        if (std::find(known_sections().begin(), known_sections().end(), name) == known_sections().end())
            throw FormatError("checkpoint: unknown section '" + name + "'");
        if (static_cast<uint8_t>(type) > static_cast<uint8_t>(DType::I64) || size % dtype_size(type))
            throw FormatError("checkpoint: bad type or size in section '" + name + "'");
        const auto data = bytes.substr(offset, size);
        if (crc32(data) != crc) throw FormatError("checkpoint: checksum mismatch in section '" + name + "'");
        if (!sec.emplace(name, Entry{type, data}).second)
            throw FormatError("checkpoint: duplicate section '" + name + "'");
    }
    auto get = [&](const std::string& name, DType type) -> std::string_view {
        const auto it = sec.find(name);
        if (it == sec.end()) throw FormatError("checkpoint: missing section '" + name + "'");
        if (it->second.type != type) throw FormatError("checkpoint: section '" + name + "' has the wrong type");
        return it->second.data;
    };
    auto f64 = [&](const std::string& name, std::optional<size_t> expect = std::nullopt) {
        auto v = unblob<double>(get(name, DType::F64));
        if (expect && v.size() != *expect)
            throw FormatError("checkpoint: section '" + name + "' has " + std::to_string(v.size()) +
                              " values, expected " + std::to_string(*expect));
        return v;
    };

    Checkpoint c;
    try {
        c.config = parse_config(get("config", DType::Bytes));
    } catch (const ParameterError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    auto body = decode_template(get("template", DType::Bytes));
    auto& s = c.scene;
    try {
        s = scene::make_scene(c.config.scene, std::move(body));
    } catch (const ParameterError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    const size_t J = s.body.skeleton.size();

    auto& b = s.bank;
    b.primitive = unblob<int32_t>(get("bank.primitive", DType::I32));
    const size_t n = b.primitive.size();
    const auto offs = unblob<uint64_t>(get("bank.offsets", DType::U64));
    b.offsets.assign(offs.begin(), offs.end());
    b.positions = f64("bank.positions", 3 * n);
    b.rotations = f64("bank.rotations", 4 * n);
    b.scales = f64("bank.scales", 3 * n);
    b.sh = f64("bank.sh", 48 * n);
    b.opacity = f64("bank.opacity", n);
    const auto baked = get("bank.baked", DType::U8);
    if (baked.size() != 1 || static_cast<uint8_t>(baked[0]) > 1) throw FormatError("checkpoint: bad 'bank.baked'");
    b.baked = baked[0] == 1;

    s.attributes.grid.params() = f64("attributes.grid", s.attributes.grid.params().size());
    s.attributes.mlp.params() = f64("attributes.mlp", s.attributes.mlp.params().size());
    s.sdf.grid.params() = f64("sdf.grid", s.sdf.grid.params().size());
    s.sdf.mlp.params() = f64("sdf.mlp", s.sdf.mlp.params().size());
    s.nets.mlp.params() = f64("correctives", s.nets.mlp.params().size());
    const auto k = f64("kernel", 2);
    s.kernel.log_gamma = k[0];
    s.kernel.log_lambda = k[1];
    auto vec3s = [](const std::vector<double>& v) {
        std::vector<Vec3d> out(v.size() / 3);
        for (size_t i = 0; i < out.size(); ++i) out[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
        return out;
    };
    s.natural.pose = vec3s(f64("natural.pose", 3 * J));
    s.natural.shape = f64("natural.shape", J);
    s.rest.pose = vec3s(f64("rest.pose", 3 * J));
    s.rest.shape = f64("rest.shape", J);
    const auto it = unblob<int64_t>(get("trainer.iteration", DType::I64));
    if (it.size() != 1) throw FormatError("checkpoint: bad 'trainer.iteration'");
    c.iteration = it[0];
    if (sec.count("adam")) c.adam = decode_adam(get("adam", DType::Bytes));

    try {
        b.validate(std::max(b.size(), soup::kDefaultCap));
        s.update_canonical();
        s.validate();
    } catch (const ParameterError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---- images ----

double linear_to_srgb(double v)
{
    v = std::clamp(v, 0.0, 1.0);
    return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

double srgb_to_linear(double v)
{
    v = std::clamp(v, 0.0, 1.0);
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

namespace {

uint32_t png_format(int channels)
{
    switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw ParameterError("png: images must have 1, 3 or 4 channels");
    }
}

} // namespace

std::string encode_png(const Image& img, bool srgb)
{
    if (img.width <= 0 || img.height <= 0) throw ParameterError("png: empty image");
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = png_format(img.channels);
    std::vector<uint8_t> px(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
        const bool alpha = img.channels == 4 && i % 4 == 3;
        const double v = srgb && !alpha ? linear_to_srgb(img.data[i]) : std::clamp(img.data[i], 0.0, 1.0);
        px[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, px.data(), 0, nullptr))
        throw FormatError(std::string("png: ") + pi.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, px.data(), 0, nullptr))
        throw FormatError(std::string("png: ") + pi.message);
    out.resize(size);
    return out;
}

Image decode_png(std::string_view bytes, bool srgb)
{
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
        throw FormatError(std::string("png: ") + pi.message);
    const bool color = pi.format & PNG_FORMAT_FLAG_COLOR;
    const bool alpha = pi.format & PNG_FORMAT_FLAG_ALPHA;
    const int channels = color ? (alpha ? 4 : 3) : (alpha ? 4 : 1);
    pi.format = png_format(channels);
    Image img(static_cast<int>(pi.width), static_cast<int>(pi.height), channels);
    std::vector<uint8_t> px(img.size());
    if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
        png_image_free(&pi);
        throw FormatError(std::string("png: ") + pi.message);
    }
    for (size_t i = 0; i < img.size(); ++i) {
        const double v = px[i] / 255.0;
        const bool a = channels == 4 && i % 4 == 3;
        img.data[i] = srgb && !a ? srgb_to_linear(v) : v;
    }
    return img;
}

void write_png(const fs::path& path, const Image& image, bool srgb) { write_file_atomic(path, encode_png(image, srgb)); }

Image read_png(const fs::path& path, bool srgb) { return decode_png(read_file(path), srgb); }

// ---- views ----

void save_views(const fs::path& dir, const ViewSet& v)
{
    if (v.images.size() != v.cameras.size()) throw ParameterError("views: one image per camera");
    fs::create_directories(dir);
    ojson j;
    j["background"] = v.background;
    j["views"] = ojson::array();
    for (size_t i = 0; i < v.size(); ++i) {
        const auto& c = v.cameras[i];
        char name[32];
        std::snprintf(name, sizeof name, "view_%03zu.png", i);
        write_png(dir / name, v.images[i]);
        ojson o;
        o["image"] = name;
        o["width"] = c.width;
        o["height"] = c.height;
        o["fx"] = c.fx;
        o["fy"] = c.fy;
        o["cx"] = c.cx;
        o["cy"] = c.cy;
        o["near"] = c.near;
        ojson rot = ojson::array();
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) rot.push_back(c.rotation(r, k));
        o["rotation"] = rot;
        o["translation"] = vec_json(c.translation);
        j["views"].push_back(o);
    }
    write_file_atomic(dir / "views.json", j.dump(2) + "\n");
}

ViewSet load_views(const fs::path& dir)
{
    const auto path = dir / "views.json";
    if (!fs::exists(path)) throw ParameterError("views: '" + path.string() + "' not found");
    ViewSet v;
    try {
        const json j = json::parse(read_file(path));
        if (j.contains("background")) v.background = j["background"].get<std::array<double, 3>>();
        for (const auto& o : j.at("views")) {
            render::Camera c;
            c.width = o.at("width").get<int>();
            c.height = o.at("height").get<int>();
            c.fx = o.at("fx").get<double>();
            c.fy = o.at("fy").get<double>();
            c.cx = o.at("cx").get<double>();
            c.cy = o.at("cy").get<double>();
            c.near = o.value("near", c.near);
            const auto rot = o.at("rotation").get<std::vector<double>>();
            if (rot.size() != 9) throw ParameterError("views: rotation needs 9 values");
            for (int r = 0; r < 3; ++r)
                for (int k = 0; k < 3; ++k) c.rotation(r, k) = rot[static_cast<size_t>(3 * r + k)];
            const auto t = o.at("translation").get<std::vector<double>>();
            if (t.size() != 3) throw ParameterError("views: translation needs 3 values");
            c.translation = {t[0], t[1], t[2]};
            c.validate();
            auto img = read_png(dir / o.at("image").get<std::string>());
            if (img.width != c.width || img.height != c.height || img.channels != 3)
                throw ParameterError("views: image '" + o.at("image").get<std::string>() +
                                     "' does not match its camera (RGB expected)");
            v.cameras.push_back(c);
            v.images.push_back(std::move(img));
        }
    } catch (const json::exception& e) {
        throw ParameterError(std::string("views: ") + e.what());
    }
    if (v.cameras.empty()) throw ParameterError("views: no views in '" + path.string() + "'");
    return v;
}

// ---- meshes ----

namespace {

std::array<uint8_t, 3> color_bytes(const std::array<double, 3>& c)
{
    std::array<uint8_t, 3> out{};
    for (int a = 0; a < 3; ++a) out[a] = static_cast<uint8_t>(std::lround(linear_to_srgb(c[a]) * 255.0));
    return out;
}

} // namespace

void write_obj(const fs::path& path, const mesh::TriMesh& m)
{
    m.validate();
    std::ostringstream o;
    o.precision(9);
    o << "# gavatar mesh: " << m.vertices.size() << " vertices, " << m.triangles.size() << " faces\n";
    const bool textured = !m.uv.empty() && m.atlas.size() > 0;
    const std::string stem = path.stem().string();
    if (textured) {
        const std::string tex = stem + "_albedo.png";
        write_png(path.parent_path() / tex, m.atlas);
        std::ostringstream mtl;
        mtl << "newmtl avatar\nKa 0 0 0\nKd 1 1 1\nKs 0 0 0\nmap_Kd " << tex << "\n";
        write_file_atomic(path.parent_path() / (stem + ".mtl"), mtl.str());
        o << "mtllib " << stem << ".mtl\n";
    }
    const bool colors = m.colors.size() == m.vertices.size();
    for (size_t i = 0; i < m.vertices.size(); ++i) {
        const auto& v = m.vertices[i];
        o << "v " << v.x << ' ' << v.y << ' ' << v.z;
        if (colors) {
            o.precision(6);
            for (int a = 0; a < 3; ++a) o << ' ' << linear_to_srgb(m.colors[i][a]);
            o.precision(9);
        }
        o << '\n';
    }
    if (textured) {
        for (const auto& t : m.uv) o << "vt " << t.x << ' ' << 1.0 - t.y << '\n';
        o << "usemtl avatar\n";
        for (size_t f = 0; f < m.triangles.size(); ++f) {
            const auto& t = m.triangles[f];
            o << "f";
            for (int a = 0; a < 3; ++a) o << ' ' << t[a] + 1 << '/' << 3 * f + a + 1;
            o << '\n';
        }
    } else {
        for (const auto& t : m.triangles) o << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
    write_file_atomic(path, o.str());
}

mesh::TriMesh read_obj(const fs::path& path)
{
    std::istringstream in(read_file(path));
    mesh::TriMesh m;
    std::vector<Vec2d> vt;
    std::string line;
    size_t lineno = 0;
    auto index = [&](const std::string& tok, size_t count, size_t slot) -> int64_t {
        // tok is "v", "v/t", "v//n" or "v/t/n"; slot 0 = vertex, 1 = texture.
        size_t start = 0;
        for (size_t s = 0; s < slot; ++s) {
            start = tok.find('/', start);
            if (start == std::string::npos) return -1;
            ++start;
        }
        const auto end = tok.find('/', start);
        const std::string part = tok.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (part.empty()) return -1;
        long long i = std::stoll(part);
        if (i < 0) i += static_cast<long long>(count) + 1;
        if (i < 1 || static_cast<size_t>(i) > count)
            throw FormatError("obj: index out of range on line " + std::to_string(lineno));
        return i - 1;
    };
    std::vector<Vec2d> face_uv;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Vec3d p;
            if (!(ls >> p.x >> p.y >> p.z)) throw FormatError("obj: bad vertex on line " + std::to_string(lineno));
            m.vertices.push_back(p);
            std::array<double, 3> c{};
            if (ls >> c[0] >> c[1] >> c[2]) {
                for (auto& x : c) x = srgb_to_linear(x);
                m.colors.push_back(c);
            }
        } else if (tag == "vt") {
            Vec2d t;
            if (!(ls >> t.x >> t.y)) throw FormatError("obj: bad texture coordinate on line " + std::to_string(lineno));
            vt.push_back({t.x, 1.0 - t.y});
        } else if (tag == "f") {
            std::vector<std::string> toks;
            std::string tok;
            while (ls >> tok) toks.push_back(tok);
            if (toks.size() < 3) throw FormatError("obj: face with fewer than 3 vertices on line " + std::to_string(lineno));
            for (size_t k = 1; k + 1 < toks.size(); ++k) {
                std::array<uint32_t, 3> t{};
                const std::array<size_t, 3> c{0, k, k + 1};
                for (int a = 0; a < 3; ++a) {
                    t[a] = static_cast<uint32_t>(index(toks[c[a]], m.vertices.size(), 0));
                    const auto ti = index(toks[c[a]], vt.size(), 1);
                    if (ti >= 0) face_uv.push_back(vt[static_cast<size_t>(ti)]);
                }
                m.triangles.push_back(t);
            }
        }
    }
    if (!m.colors.empty() && m.colors.size() != m.vertices.size()) throw FormatError("obj: colors on some vertices only");
    if (face_uv.size() == 3 * m.triangles.size()) m.uv = std::move(face_uv);
    m.compute_normals();
    return m;
}

std::string encode_ply(const mesh::TriMesh& m)
{
    m.validate();
    std::ostringstream h;
    h << "ply\nformat binary_little_endian 1.0\ncomment gavatar mesh\n"
      << "element vertex " << m.vertices.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << m.triangles.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
    Writer w;
    w.bytes(h.str());
    const bool colors = m.colors.size() == m.vertices.size();
    for (size_t i = 0; i < m.vertices.size(); ++i) {
        for (int a = 0; a < 3; ++a) w.put<float>(static_cast<float>(m.vertices[i][a]));
        const auto c = colors ? color_bytes(m.colors[i]) : std::array<uint8_t, 3>{200, 200, 200};
        for (uint8_t x : c) w.put<uint8_t>(x);
    }
    for (const auto& t : m.triangles) {
        w.put<uint8_t>(3);
        for (uint32_t i : t) w.put<int32_t>(static_cast<int32_t>(i));
    }
    return std::move(w.out);
}

mesh::TriMesh decode_ply(std::string_view bytes)
{
    const auto end = bytes.find("end_header\n");
    if (bytes.substr(0, 4) != "ply\n" || end == std::string_view::npos) throw FormatError("ply: bad header");
    std::istringstream hs{std::string(bytes.substr(0, end))};
    std::string line;
    size_t nv = 0, nf = 0;
    std::vector<std::string> props;
    while (std::getline(hs, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "format") {
            std::string f;
            ls >> f;
            if (f != "binary_little_endian") throw FormatError("ply: only binary_little_endian is supported");
        } else if (tag == "element") {
            std::string name;
            size_t n = 0;
            ls >> name >> n;
            if (name == "vertex") nv = n;
            else if (name == "face") nf = n;
            else throw FormatError("ply: unexpected element '" + name + "'");
        } else if (tag == "property") {
            props.push_back(line);
        }
    }
    const std::vector<std::string> expect = {
        "property float x",   "property float y",    "property float z", "property uchar red",
        "property uchar green", "property uchar blue", "property list uchar int vertex_indices"};
    if (props != expect) throw FormatError("ply: unsupported property layout");
    Reader r(bytes.substr(end + 11), "ply");
    mesh::TriMesh m;
    m.vertices.resize(nv);
    m.colors.resize(nv);
    for (size_t i = 0; i < nv; ++i) {
        for (int a = 0; a < 3; ++a) m.vertices[i][a] = r.get<float>();
        for (int a = 0; a < 3; ++a) m.colors[i][a] = srgb_to_linear(r.get<uint8_t>() / 255.0);
    }
    m.triangles.resize(nf);
    for (size_t f = 0; f < nf; ++f) {
        if (r.get<uint8_t>() != 3) throw FormatError("ply: only triangles are supported");
        for (int a = 0; a < 3; ++a) {
            const auto i = r.get<int32_t>();
            if (i < 0 || static_cast<size_t>(i) >= nv) throw FormatError("ply: index out of range");
            m.triangles[f][a] = static_cast<uint32_t>(i);
        }
    }
    if (r.remaining()) throw FormatError("ply: trailing bytes");
    m.compute_normals();
    return m;
}

void write_ply(const fs::path& path, const mesh::TriMesh& m) { write_file_atomic(path, encode_ply(m)); }

mesh::TriMesh read_ply(const fs::path& path) { return decode_ply(read_file(path)); }

} // namespace gavatar::io
