#include "gavatar/image.hpp"

#include <cmath>
#include <limits>

namespace gavatar {

double psnr(const Image& a, const Image& b)
{
    require_same_shape(a, b, "psnr");
    double se = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

} // namespace gavatar
