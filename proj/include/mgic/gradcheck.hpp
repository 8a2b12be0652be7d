#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mgic/errors.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

// A scalar-valued differentiable map. Called with a non-null `grad_out` it
// must also fill d(value)/d(point), flattened row-major.
template <typename T>
using ScalarMap = std::function<double(const Tensor<T>&, std::vector<T>* grad_out)>;

// Central-difference comparison of an analytic gradient. Returns the max over
// coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
template <typename T>
double finite_difference_check(const ScalarMap<T>& f, const Tensor<T>& point, double eps) {
    if (!(eps > 0)) throw ConfigError("finite_difference_check: eps must be positive");
    std::vector<T> analytic;
    const double base = f(point, &analytic);
    if (!std::isfinite(base)) throw NumericalError("finite_difference_check: non-finite value at base point");
    if (static_cast<std::int64_t>(analytic.size()) != point.numel()) {
        throw DimensionError("finite_difference_check: gradient length " +
                             std::to_string(analytic.size()) + " vs point " +
                             shape_str(point.shape()));
    }
    double worst = 0.0;
    for (std::int64_t i = 0; i < point.numel(); ++i) {
        Tensor<T> plus = point.clone();
        Tensor<T> minus = point.clone();
        plus.mutable_data()[i] = static_cast<T>(static_cast<double>(point.data()[i]) + eps);
        minus.mutable_data()[i] = static_cast<T>(static_cast<double>(point.data()[i]) - eps);
        const double fp = f(plus, nullptr);
        const double fm = f(minus, nullptr);
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericalError("finite_difference_check: non-finite value at coordinate " +
                                 std::to_string(i));
        }
        const double central = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
        if (!std::isfinite(a)) {
            throw NumericalError("finite_difference_check: non-finite analytic gradient at coordinate " +
                                 std::to_string(i));
        }
        const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace mgic
