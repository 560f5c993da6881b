#pragma once

// Small pretrained avatar used by the optimizer tests and the golden trace.

#include <cmath>

#include "gavatar/guidance.hpp"
#include "gavatar/optimizer.hpp"
#include "gavatar/scene.hpp"

namespace gavatar::fixture {

inline scene::SceneConfig tiny_scene_config()
{
    scene::SceneConfig c;
    c.anchor_grid = 8;
    c.gaussians_per_primitive = 8;
    c.corrective_hidden = 16;
    c.field_hidden = 16;
    c.attribute_grid = {4, 2, 12, 8, 1.6};
    c.sdf_grid = {6, 2, 14, 8, 1.6};
    c.seed = 5;
    return c;
}

inline fields::PretrainOptions tiny_pretrain_options()
{
    fields::PretrainOptions o;
    o.batch = 1024;
    o.max_steps = 1500;
    o.sdf_tolerance = 0.02;
    o.eikonal_batch = 128;
    o.lr = 3e-3;
    return o;
}

inline scene::Scene tiny_scene()
{
    static const scene::Scene cached = [] {
        auto s = scene::make_scene(tiny_scene_config());
        scene::pretrain_scene(s, tiny_pretrain_options());
        return s;
    }();
    return cached;
}

// Smooth color target: a fixed image pattern per view and channel.
inline Image pattern_image(int w, int h, int channels, int view, int kind)
{
    Image img(w, h, channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(x, y, c) = 0.5 + 0.4 * std::sin(0.21 * x + 0.13 * y + 1.7 * c + 0.5 * view + 2.0 * kind);
    return img;
}

inline guidance::PhotometricGuidance pattern_guidance(int w, int h)
{
    return guidance::PhotometricGuidance([w, h](const guidance::GuidanceContext& ctx) {
        return pattern_image(w, h, 3, ctx.view, static_cast<int>(ctx.kind));
    });
}

inline optim::TrainConfig tiny_train_config()
{
    optim::TrainConfig c;
    c.iterations = 10;
    c.natural_only = 5;
    c.zoom_in_start = 5;
    c.width = 40;
    c.height = 40;
    c.mesh_resolution = 16;
    c.mesh_interval = 4;
    c.eikonal_centers = 64;
    c.eikonal_perturbed = 64;
    c.seed = 11;
    c.log_timing = false;
    return c;
}

} // namespace gavatar::fixture
