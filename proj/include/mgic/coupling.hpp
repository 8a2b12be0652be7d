#pragma once

#include <cmath>
#include <vector>

#include "mgic/layers.hpp"
#include "mgic/rng.hpp"

namespace mgic {

// Channel-to-channel sensitivity of a width-preserving module, measured on a
// [1, c, 1, 1] input by central differences per input channel. The probe is
// taken at several random base points and the per-entry maximum is kept, so a
// relu that happens to be inactive at one point does not mask a structural
// connection. Entry layout: S[i * c_out + o] = max_points |d y_o / d x_i|.
template <typename T>
std::vector<double> channel_sensitivity(Module<T>& m, std::int64_t c_in, std::int64_t n_points,
                                        double eps, Rng& rng) {
    m.set_training(false);
    auto eval = [&](const Tensor<T>& x) {
        Tape<T> tape;
        return m.forward(tape, tape.leaf(x, false));
    };
    Tensor<T> probe({1, c_in, 1, 1});
    Tensor<T> first = eval(probe);
    const std::int64_t c_out = first.dim(1);
    std::vector<double> sens(static_cast<std::size_t>(c_in * c_out), 0.0);
    for (std::int64_t pt = 0; pt < n_points; ++pt) {
        Tensor<T> base({1, c_in, 1, 1});
        for (std::int64_t c = 0; c < c_in; ++c)
            base.mutable_data()[c] = static_cast<T>(rng.uniform(0.5, 1.5));
        for (std::int64_t i = 0; i < c_in; ++i) {
            Tensor<T> plus = base.clone();
            Tensor<T> minus = base.clone();
            plus.mutable_data()[i] = static_cast<T>(static_cast<double>(base.data()[i]) + eps);
            minus.mutable_data()[i] = static_cast<T>(static_cast<double>(base.data()[i]) - eps);
            Tensor<T> yp = eval(plus);
            Tensor<T> ym = eval(minus);
            for (std::int64_t o = 0; o < c_out; ++o) {
                const double d =
                    std::abs(static_cast<double>(yp.data()[o]) - static_cast<double>(ym.data()[o])) /
                    (2.0 * eps);
                auto& cell = sens[static_cast<std::size_t>(i * c_out + o)];
                cell = std::max(cell, d);
            }
        }
    }
    return sens;
}

}  // namespace mgic
