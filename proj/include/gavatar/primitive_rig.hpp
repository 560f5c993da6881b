#pragma once

// Posed primitives V_k = (P_k, R_k, S_k): surface anchors on the skinned
// template plus pose-dependent corrective offsets.

#include <memory>
#include <span>
#include <vector>

#include "gavatar/autodiff.hpp"
#include "gavatar/body_template.hpp"
#include "gavatar/mlp.hpp"

namespace gavatar::rig {

constexpr double kScaleFloor = 1e-4; // meters

struct Primitives {
    std::vector<Vec3d> position;
    std::vector<Quatd> rotation;
    std::vector<Vec3d> scale;

    size_t size() const { return position.size(); }
};

struct PrimitiveGrad {
    std::vector<Vec3d> position;
    std::vector<Quatd> rotation;
    std::vector<Vec3d> scale;

    explicit PrimitiveGrad(size_t k = 0) : position(k), rotation(k, Quatd{0, 0, 0, 0}), scale(k) {}
};

// First two columns of each joint's rotation matrix, 6 values per joint.
template <class T>
std::vector<T> pose_encoding(std::span<const Vec3<T>> pose);

// Shared trunk (two softplus hidden layers) with a concatenated head
// [3K position offsets | 4K rotation offsets | 3K scale offsets]. The head
// starts at zero so the correctives start as the identity.
class CorrectiveNets {
public:
    CorrectiveNets() = default;
    CorrectiveNets(size_t primitives, size_t joints, int hidden, uint64_t seed);

    nn::Mlp mlp;

    size_t primitives() const { return static_cast<size_t>(mlp.output_dim()) / 10; }
    size_t joints() const { return static_cast<size_t>(mlp.input_dim()) / 6; }

    // Raw head output for one pose; throws NumericError if non-finite.
    Eigen::VectorXd forward(std::span<const Vec3d> pose, nn::Mlp::Cache* cache = nullptr) const;
};

// P = P_hat + dP; R = normalize((1,0,0,0) + dR_raw) * R_hat; S = max(S_hat + dS, floor).
// raw may be null (identity correctives).
Primitives compose(std::span<const body::AnchorFrame<double>> frames, const double* raw);

Primitives generate_primitives(const body::BodyModel& body, const body::AnchorSet& anchors, const CorrectiveNets& nets,
                               const body::BodyParams& params);

// Gradient of q = a * b w.r.t. a and b given dL/dq.
void quat_mul_backward(const Quatd& a, const Quatd& b, const Quatd& dq, Quatd& da, Quatd& db);

// Gradient of q = u / |u| w.r.t. u.
Quatd normalize_backward(const Quatd& u, const Quatd& dq);

// Forward pass that keeps what the backward pass needs to reach the
// corrective weights, the pose and the shape.
class RigPass {
public:
    RigPass(const body::BodyModel& body, const body::AnchorSet& anchors, const CorrectiveNets& nets,
            const body::BodyParams& params);

    const Primitives& primitives() const { return primitives_; }

    // Accumulates into nets_grad (layout of nets.mlp.params()), dpose (J) and
    // dshape (J).
    void backward(const PrimitiveGrad& grad, std::span<double> nets_grad, std::span<Vec3d> dpose,
                  std::span<double> dshape);

private:
    const CorrectiveNets* nets_;
    std::unique_ptr<ad::Tape> tape_;
    std::vector<Vec3<ad::Var>> pose_;
    std::vector<ad::Var> shape_;
    std::vector<ad::Var> encoding_;
    std::vector<body::AnchorFrame<ad::Var>> frames_;
    std::vector<body::AnchorFrame<double>> frame_values_;
    nn::Mlp::Cache cache_;
    Eigen::VectorXd raw_;
    Primitives primitives_;
};

} // namespace gavatar::rig
