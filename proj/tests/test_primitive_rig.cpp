#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gavatar/primitive_rig.hpp"
#include "support/fd.hpp"

using namespace gavatar;
using namespace gavatar::rig;
using gavatar::testing::central_difference;

namespace {

struct Fixture {
    body::BodyModel body = body::make_capsule_person();
    body::AnchorSet anchors = body::compute_anchors(body.mesh, 8);
};

const Fixture& fixture()
{
    static const Fixture f;
    return f;
}

Mat3d rot_z90() { return Mat3d::from_columns({0, 1, 0}, {-1, 0, 0}, {0, 0, 1}); }
Mat3d rot_x90() { return Mat3d::from_columns({1, 0, 0}, {0, 0, 1}, {0, -1, 0}); }

} // namespace

TEST(Rig, ZeroCorrectivesAtRestReturnAnchorsExactly)
{
    const auto& f = fixture();
    CorrectiveNets nets(f.anchors.size(), 24, 32, 1);
    const auto prims = generate_primitives(f.body, f.anchors, nets, body::BodyParams::zeros(24));
    ASSERT_EQ(prims.size(), f.anchors.size());
    for (size_t k = 0; k < prims.size(); ++k) {
        EXPECT_EQ(prims.position[k].x, f.anchors.positions[k].x);
        EXPECT_EQ(prims.position[k].y, f.anchors.positions[k].y);
        EXPECT_EQ(prims.position[k].z, f.anchors.positions[k].z);
        EXPECT_EQ(prims.rotation[k].w, f.anchors.rotations[k].w);
        EXPECT_EQ(prims.rotation[k].x, f.anchors.rotations[k].x);
        EXPECT_EQ(prims.rotation[k].y, f.anchors.rotations[k].y);
        EXPECT_EQ(prims.rotation[k].z, f.anchors.rotations[k].z);
        EXPECT_EQ(prims.scale[k].x, f.anchors.scales[k].x);
        EXPECT_EQ(prims.scale[k].z, f.anchors.scales[k].z);
    }
}

TEST(Rig, CompositionOrderIsDeltaThenAnchor)
{
    body::AnchorFrame<double> frame{{0, 0, 0}, axis_angle_quat({1, 0, 0}, std::numbers::pi / 2), {0.05, 0.05, 0.05}};
    const Quatd delta = axis_angle_quat({0, 0, 1}, std::numbers::pi / 2);
    std::vector<double> raw(10, 0.0);
    raw[3] = delta.w - 1.0;
    raw[4] = delta.x;
    raw[5] = delta.y;
    raw[6] = delta.z;
    const auto p = compose(std::span(&frame, 1), raw.data());
    const Mat3d got = quat_to_mat(p.rotation[0]);
    const Mat3d want = rot_z90() * rot_x90();
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(got.m[i], want.m[i], 1e-12);
    const Mat3d wrong = rot_x90() * rot_z90();
    double diff = 0;
    for (int i = 0; i < 9; ++i) diff += std::abs(got.m[i] - wrong.m[i]);
    EXPECT_GT(diff, 1.0);
}

TEST(Rig, ScaleClampsToFloor)
{
    body::AnchorFrame<double> frame{{0, 0, 0}, Quatd::identity(), {0.05, 0.05, 0.05}};
    std::vector<double> raw(10, 0.0);
    raw[7] = -10.0;
    const auto p = compose(std::span(&frame, 1), raw.data());
    EXPECT_EQ(p.scale[0].x, kScaleFloor);
    EXPECT_EQ(p.scale[0].y, 0.05);
}

TEST(Rig, PrimitivesTrackSkinnedSurfaceAndStayUnit)
{
    const auto& f = fixture();
    CorrectiveNets nets(f.anchors.size(), 24, 32, 1);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0, 0.4);
    for (int trial = 0; trial < 3; ++trial) {
        auto params = body::BodyParams::zeros(24);
        for (auto& p : params.pose) p = {n(rng), n(rng), n(rng)};
        const auto prims = generate_primitives(f.body, f.anchors, nets, params);
        const auto posed = body::skin_mesh(f.body.mesh, f.body.skeleton, params);
        for (size_t k = 0; k < prims.size(); ++k) {
            const auto& b = f.anchors.bindings[k];
            const auto& t = posed.triangles[static_cast<size_t>(b.triangle)];
            Vec3d s;
            for (int c = 0; c < 3; ++c) s += posed.vertices[static_cast<size_t>(t[c])] * b.bary[c];
            EXPECT_LT(norm(s - prims.position[k]), 1e-12);
            EXPECT_LT(std::abs(norm(prims.rotation[k]) - 1.0), 1e-6);
        }
        const auto again = generate_primitives(f.body, f.anchors, nets, params);
        EXPECT_EQ(again.rotation[5].x, prims.rotation[5].x);
    }
}

TEST(Rig, NonFiniteCorrectivesAreErrors)
{
    const auto& f = fixture();
    CorrectiveNets nets(f.anchors.size(), 24, 16, 1);
    nets.mlp.params()[0] = NAN;
    EXPECT_THROW(generate_primitives(f.body, f.anchors, nets, body::BodyParams::zeros(24)), NumericError);
}

TEST(Rig, BackwardMatchesFiniteDifferences)
{
    const auto& f = fixture();
    CorrectiveNets nets(f.anchors.size(), 24, 8, 3);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 0.01);
    // Non-zero head so every path carries gradient.
    const size_t last = nets.mlp.weight_offset(nets.mlp.layer_count() - 1);
    for (size_t i = last; i < nets.mlp.params().size(); ++i) nets.mlp.params()[i] = n(rng);
    auto params = body::canonical_pose(f.body.skeleton);
    params.pose[17] = {0.2, -0.1, 0.3};
    params.shape[5] = 0.03;

    const size_t k = f.anchors.size();
    std::vector<double> w(k * 10);
    std::normal_distribution<double> wn(0, 1);
    for (auto& x : w) x = wn(rng);
    auto objective = [&](const Primitives& p) {
        double s = 0.0;
        for (size_t i = 0; i < k; ++i) {
            const Mat3d r = quat_to_mat(p.rotation[i]);
            s += w[10 * i] * p.position[i].x + w[10 * i + 1] * p.position[i].y + w[10 * i + 2] * p.position[i].z;
            s += w[10 * i + 3] * r.m[0] + w[10 * i + 4] * r.m[4] + w[10 * i + 5] * r.m[7] + w[10 * i + 6] * r.m[2];
            s += w[10 * i + 7] * p.scale[i].x + w[10 * i + 8] * p.scale[i].y + w[10 * i + 9] * p.scale[i].z;
        }
        return s;
    };
    RigPass pass(f.body, f.anchors, nets, params);
    PrimitiveGrad g(k);
    for (size_t i = 0; i < k; ++i) {
        const auto& q = pass.primitives().rotation[i];
        // d objective / d q through quat_to_mat, by finite differences on q (oracle is the full chain below).
        auto rot_part = [&](const Quatd& qq) {
            const Mat3d r = quat_to_mat(qq);
            return w[10 * i + 3] * r.m[0] + w[10 * i + 4] * r.m[4] + w[10 * i + 5] * r.m[7] + w[10 * i + 6] * r.m[2];
        };
        Quatd qq = q;
        double* comp[4] = {&qq.w, &qq.x, &qq.y, &qq.z};
        double gq[4];
        for (int c = 0; c < 4; ++c) gq[c] = central_difference(*comp[c], [&] { return rot_part(qq); });
        g.rotation[i] = {gq[0], gq[1], gq[2], gq[3]};
        g.position[i] = {w[10 * i], w[10 * i + 1], w[10 * i + 2]};
        g.scale[i] = {w[10 * i + 7], w[10 * i + 8], w[10 * i + 9]};
    }
    std::vector<double> gnets(nets.mlp.params().size(), 0.0);
    std::vector<Vec3d> dpose(24);
    std::vector<double> dshape(24, 0.0);
    pass.backward(g, gnets, dpose, dshape);

    auto eval = [&]() { return objective(generate_primitives(f.body, f.anchors, nets, params)); };
    for (size_t i = 0; i < gnets.size(); i += 97)
        EXPECT_GRAD_NEAR(gnets[i], central_difference(nets.mlp.params()[i], eval), 1e-4) << "net param " << i;
    for (size_t j : {0u, 3u, 17u})
        for (int a = 0; a < 3; ++a) EXPECT_GRAD_NEAR(dpose[j][a], central_difference(params.pose[j][a], eval), 1e-4);
    for (size_t j : {1u, 5u, 17u}) EXPECT_GRAD_NEAR(dshape[j], central_difference(params.shape[j], eval), 1e-4);
}
