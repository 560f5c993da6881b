#pragma once

#include <cstddef>
#include <vector>

#include "gavatar/errors.hpp"

namespace gavatar {

// Row-major H x W x C float image. Training-internal images are linear.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill)
    {
    }

    size_t size() const { return data.size(); }
    size_t index(int x, int y, int c = 0) const
    {
        return (static_cast<size_t>(y) * width + x) * channels + c;
    }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

    bool same_shape(const Image& o) const
    {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what)
{
    if (!a.same_shape(b)) throw ParameterError(std::string(what) + ": image shape mismatch");
}

// Peak signal-to-noise ratio for images in [0, 1].
double psnr(const Image& a, const Image& b);

} // namespace gavatar
