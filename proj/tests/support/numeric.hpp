#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

namespace gavatar::testing {

// Central difference of f along a scalar parameter, restoring it afterwards.
inline double central_difference(double& x, const std::function<double()>& f, double h = 1e-6)
{
    const double saved = x;
    x = saved + h;
    const double fp = f();
    x = saved - h;
    const double fm = f();
    x = saved;
    return (fp - fm) / (2.0 * h);
}

// Relative error with a floor so near-zero gradients compare absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

} // namespace gavatar::testing
