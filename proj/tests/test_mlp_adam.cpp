#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gavatar/adam.hpp"
#include "gavatar/errors.hpp"
#include "gavatar/mlp.hpp"
#include "support/fd.hpp"

using namespace gavatar;
using gavatar::testing::central_difference;

TEST(Mlp, ShapesAndZeroLastLayer)
{
    nn::Mlp m({5, 8, 8, 3}, 1);
    EXPECT_EQ(m.params().size(), 5u * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);
    m.zero_last_layer();
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 4);
    EXPECT_EQ(m.forward(x).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_THROW(m.forward(Eigen::MatrixXd::Zero(4, 1)), ParameterError);
}

TEST(Mlp, BackwardMatchesFiniteDifferences)
{
    nn::Mlp m({4, 6, 6, 2}, 7);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0, 1);
    Eigen::MatrixXd x(4, 3), w(2, 3);
    for (int i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    auto loss = [&]() { return (m.forward(x).array() * w.array()).sum(); };

    nn::Mlp::Cache cache;
    m.forward(x, &cache);
    std::vector<double> grad(m.params().size(), 0.0);
    const Eigen::MatrixXd dx = m.backward(cache, w, grad);
    for (size_t i = 0; i < m.params().size(); i += 3) {
        const double fd = central_difference(m.params()[i], loss);
        EXPECT_GRAD_NEAR(grad[i], fd, 1e-6) << " param " << i;
    }
    for (int i = 0; i < x.size(); ++i) {
        const double fd = central_difference(x.data()[i], loss);
        EXPECT_GRAD_NEAR(dx.data()[i], fd, 1e-6);
    }
}

TEST(Adam, FirstStepMagnitudeIsLearningRate)
{
    std::vector<double> p{0.0}, g{1.0};
    Adam adam;
    adam.add_group("a", 0.01, {{&p, &g}});
    ASSERT_TRUE(adam.step());
    EXPECT_NEAR(p[0], -0.01 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters)
{
    std::vector<double> p{0.3, -2.0}, g{0.0, 0.0};
    Adam adam;
    adam.add_group("a", 0.1, {{&p, &g}});
    for (int i = 0; i < 5; ++i) adam.step();
    EXPECT_EQ(p[0], 0.3);
    EXPECT_EQ(p[1], -2.0);
}

TEST(Adam, NonFiniteGradientSkipsStep)
{
    std::vector<double> p{1.0, 1.0}, g{1.0, NAN};
    std::vector<double> q{1.0}, h{1.0};
    Adam adam;
    adam.add_group("a", 0.1, {{&p, &g}});
    adam.add_group("b", 0.1, {{&q, &h}});
    EXPECT_FALSE(adam.step());
    EXPECT_EQ(adam.skipped(), 1);
    EXPECT_EQ(adam.steps(), 0);
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(q[0], 1.0);
    g[1] = 0.0;
    EXPECT_TRUE(adam.step());
    EXPECT_LT(q[0], 1.0);
}

TEST(Adam, MatchesHandRolledReference)
{
    std::vector<double> p{0.5}, g{0.0};
    Adam adam;
    adam.add_group("a", 0.05, {{&p, &g}});
    double ref = 0.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 20; ++t) {
        g[0] = 2.0 * p[0] - 0.3 * t;
        const double gr = 2.0 * ref - 0.3 * t;
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        ref -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        adam.step();
        EXPECT_NEAR(p[0], ref, 1e-14);
    }
}

TEST(Adam, RemapKeepsMomentsOfSurvivors)
{
    std::vector<double> p{1, 2, 3, 4}, g{1, 1, -1, -1};
    Adam adam;
    adam.add_group("a", 0.1, {{&p, &g}});
    adam.step();
    const auto before = adam.group("a").slots[0].m;
    p = {p[2], p[3], 0, 0, p[0], p[1]};
    g.assign(6, 0.0);
    adam.remap("a", 0, {1, -1, 0}, 2);
    const auto& m = adam.group("a").slots[0].m;
    ASSERT_EQ(m.size(), 6u);
    EXPECT_EQ(m[0], before[2]);
    EXPECT_EQ(m[2], 0.0);
    EXPECT_EQ(m[5], before[1]);
}
