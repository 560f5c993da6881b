#include "gavatar/primitive_rig.hpp"

#include <algorithm>
#include <cmath>

#include "gavatar/errors.hpp"

namespace gavatar::rig {

template <class T>
std::vector<T> pose_encoding(std::span<const Vec3<T>> pose)
{
    std::vector<T> out;
    out.reserve(pose.size() * 6);
    for (const auto& aa : pose) {
        const Mat3<T> r = rodrigues(aa);
        for (int c = 0; c < 2; ++c)
            for (int row = 0; row < 3; ++row) out.push_back(r(row, c));
    }
    return out;
}

template std::vector<double> pose_encoding<double>(std::span<const Vec3d>);
template std::vector<ad::Var> pose_encoding<ad::Var>(std::span<const Vec3<ad::Var>>);

CorrectiveNets::CorrectiveNets(size_t primitives, size_t joints, int hidden, uint64_t seed)
    : mlp({static_cast<int>(joints * 6), hidden, hidden, static_cast<int>(primitives * 10)}, seed)
{
    if (primitives == 0 || joints == 0) throw ParameterError("correctives: empty primitive or joint set");
    mlp.zero_last_layer();
}

Eigen::VectorXd CorrectiveNets::forward(std::span<const Vec3d> pose, nn::Mlp::Cache* cache) const
{
    if (pose.size() != joints()) throw ParameterError("correctives: pose joint count mismatch");
    const auto enc = pose_encoding<double>(pose);
    const Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(enc.data(), static_cast<Eigen::Index>(enc.size()));
    Eigen::VectorXd raw = mlp.forward(x, cache).col(0);
    if (!raw.allFinite()) throw NumericError("correctives: non-finite network output");
    return raw;
}

Primitives compose(std::span<const body::AnchorFrame<double>> frames, const double* raw)
{
    const size_t k = frames.size();
    Primitives out;
    out.position.resize(k);
    out.rotation.resize(k);
    out.scale.resize(k);
    for (size_t i = 0; i < k; ++i) {
        const auto& f = frames[i];
        if (!raw) {
            out.position[i] = f.position;
            out.rotation[i] = f.rotation;
            out.scale[i] = {std::max(f.scale.x, kScaleFloor), std::max(f.scale.y, kScaleFloor),
                            std::max(f.scale.z, kScaleFloor)};
            continue;
        }
        const double* dp = raw + 3 * i;
        const double* dr = raw + 3 * k + 4 * i;
        const double* ds = raw + 7 * k + 3 * i;
        out.position[i] = f.position + Vec3d{dp[0], dp[1], dp[2]};
        const Quatd delta = normalized(Quatd{1.0 + dr[0], dr[1], dr[2], dr[3]});
        out.rotation[i] = delta * f.rotation;
        for (int a = 0; a < 3; ++a) out.scale[i][a] = std::max(f.scale[a] + ds[a], kScaleFloor);
    }
    return out;
}

Primitives generate_primitives(const body::BodyModel& body, const body::AnchorSet& anchors, const CorrectiveNets& nets,
                               const body::BodyParams& params)
{
    params.validate(body.skeleton.size());
    if (nets.primitives() != anchors.size()) throw ParameterError("generate_primitives: primitive count mismatch");
    const auto transforms = body::skinning_transforms<double>(body.skeleton, params.pose, params.shape);
    const auto frames = body::posed_anchor_frames<double>(body.mesh, anchors, transforms);
    const Eigen::VectorXd raw = nets.forward(params.pose);
    return compose(frames, raw.data());
}

void quat_mul_backward(const Quatd& a, const Quatd& b, const Quatd& dq, Quatd& da, Quatd& db)
{
    auto dotq = [](const Quatd& p, const Quatd& q) { return p.w * q.w + p.x * q.x + p.y * q.y + p.z * q.z; };
    const Quatd e[4] = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
    double ga[4], gb[4];
    for (int i = 0; i < 4; ++i) {
        ga[i] = dotq(dq, e[i] * b);
        gb[i] = dotq(dq, a * e[i]);
    }
    da = {ga[0], ga[1], ga[2], ga[3]};
    db = {gb[0], gb[1], gb[2], gb[3]};
}

Quatd normalize_backward(const Quatd& u, const Quatd& dq)
{
    const double n = norm(u);
    const Quatd q{u.w / n, u.x / n, u.y / n, u.z / n};
    const double d = q.w * dq.w + q.x * dq.x + q.y * dq.y + q.z * dq.z;
    return {(dq.w - q.w * d) / n, (dq.x - q.x * d) / n, (dq.y - q.y * d) / n, (dq.z - q.z * d) / n};
}

RigPass::RigPass(const body::BodyModel& body, const body::AnchorSet& anchors, const CorrectiveNets& nets,
                 const body::BodyParams& params)
    : nets_(&nets), tape_(std::make_unique<ad::Tape>())
{
    params.validate(body.skeleton.size());
    if (nets.primitives() != anchors.size()) throw ParameterError("rig: primitive count mismatch");
    ad::TapeScope scope(*tape_);
    for (const auto& p : params.pose) pose_.push_back({ad::Var::leaf(p.x), ad::Var::leaf(p.y), ad::Var::leaf(p.z)});
    for (double s : params.shape) shape_.push_back(ad::Var::leaf(s));
    const auto transforms = body::skinning_transforms<ad::Var>(body.skeleton, pose_, shape_);
    frames_ = body::posed_anchor_frames<ad::Var>(body.mesh, anchors, transforms);
    encoding_ = pose_encoding<ad::Var>(pose_);

    frame_values_.resize(frames_.size());
    for (size_t i = 0; i < frames_.size(); ++i)
        frame_values_[i] = {value_of(frames_[i].position), value_of(frames_[i].rotation), value_of(frames_[i].scale)};
    raw_ = nets.forward(params.pose, &cache_);
    primitives_ = compose(frame_values_, raw_.data());
}

void RigPass::backward(const PrimitiveGrad& grad, std::span<double> nets_grad, std::span<Vec3d> dpose,
                       std::span<double> dshape)
{
    const size_t k = frames_.size();
    if (grad.position.size() != k || grad.rotation.size() != k || grad.scale.size() != k)
        throw ParameterError("rig: gradient size mismatch");
    if (dpose.size() != pose_.size() || dshape.size() != shape_.size())
        throw ParameterError("rig: pose gradient size mismatch");

    Eigen::MatrixXd draw = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(10 * k), 1);
    tape_->zero_adjoints();
    for (size_t i = 0; i < k; ++i) {
        const auto& f = frame_values_[i];
        const auto& fv = frames_[i];
        const double* dr = raw_.data() + 3 * k + 4 * i;
        const double* ds = raw_.data() + 7 * k + 3 * i;
        for (int a = 0; a < 3; ++a) {
            draw(static_cast<Eigen::Index>(3 * i + a), 0) = grad.position[i][a];
            tape_->seed(fv.position[a].id, grad.position[i][a]);
            if (f.scale[a] + ds[a] > kScaleFloor) {
                draw(static_cast<Eigen::Index>(7 * k + 3 * i + a), 0) = grad.scale[i][a];
                tape_->seed(fv.scale[a].id, grad.scale[i][a]);
            }
        }
        const Quatd u{1.0 + dr[0], dr[1], dr[2], dr[3]};
        Quatd dd, db;
        quat_mul_backward(normalized(u), f.rotation, grad.rotation[i], dd, db);
        const Quatd du = normalize_backward(u, dd);
        const double g[4] = {du.w, du.x, du.y, du.z};
        for (int c = 0; c < 4; ++c) draw(static_cast<Eigen::Index>(3 * k + 4 * i + c), 0) = g[c];
        tape_->seed(fv.rotation.w.id, db.w);
        tape_->seed(fv.rotation.x.id, db.x);
        tape_->seed(fv.rotation.y.id, db.y);
        tape_->seed(fv.rotation.z.id, db.z);
    }
    const Eigen::MatrixXd denc = nets_->mlp.backward(cache_, draw, nets_grad);
    for (size_t i = 0; i < encoding_.size(); ++i) tape_->seed(encoding_[i].id, denc(static_cast<Eigen::Index>(i), 0));
    tape_->propagate();
    for (size_t j = 0; j < pose_.size(); ++j)
        for (int a = 0; a < 3; ++a) dpose[j][a] += tape_->adjoint(pose_[j][a].id);
    for (size_t j = 0; j < shape_.size(); ++j) dshape[j] += tape_->adjoint(shape_[j].id);
}

} // namespace gavatar::rig
