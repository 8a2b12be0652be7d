#pragma once

// Synthetic 10-class image set in MNIST-like layout: each class is a fixed
// smooth pattern of Gaussian bumps; samples add small shifts, amplitude
// jitter and pixel noise. Values are quantized to the 1/255 grid so IDX
// round trips are exact.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mgic/rng.hpp"
#include "mgic/tensor.hpp"

namespace testsupport {

struct DigitData {
    mgic::Tensor<float> images;  // [N, 1, hw, hw]
    std::vector<int> labels;
};

inline DigitData synth_digits(std::int64_t n, std::uint64_t seed, std::int64_t hw = 28,
                              double noise = 0.10) {
    mgic::Rng rng = mgic::Rng(seed).stream(mgic::kDataStream);
    const int classes = 10;
    // class-specific bump patterns
    std::vector<std::vector<double>> patterns(classes,
                                              std::vector<double>(static_cast<std::size_t>(hw * hw), 0.0));
    for (int k = 0; k < classes; ++k) {
        auto& p = patterns[static_cast<std::size_t>(k)];
        const int bumps = 3 + (k % 3);
        for (int b = 0; b < bumps; ++b) {
            const double cy = rng.uniform(0.2, 0.8) * static_cast<double>(hw);
            const double cx = rng.uniform(0.2, 0.8) * static_cast<double>(hw);
            const double sigma = rng.uniform(1.8, 4.0);
            const double amp = rng.uniform(0.6, 1.0);
            for (std::int64_t i = 0; i < hw; ++i)
                for (std::int64_t j = 0; j < hw; ++j) {
                    const double dy = (static_cast<double>(i) - cy) / sigma;
                    const double dx = (static_cast<double>(j) - cx) / sigma;
                    p[static_cast<std::size_t>(i * hw + j)] += amp * std::exp(-0.5 * (dy * dy + dx * dx));
                }
        }
        double mx = 0;
        for (double v : p) mx = std::max(mx, v);
        for (double& v : p) v = 0.85 * v / (mx + 1e-12);
    }
    DigitData out;
    out.images = mgic::Tensor<float>({n, 1, hw, hw});
    out.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t s = 0; s < n; ++s) {
        const int label = static_cast<int>(s % classes);
        out.labels[static_cast<std::size_t>(s)] = label;
        const auto& p = patterns[static_cast<std::size_t>(label)];
        const std::int64_t dy = rng.uniform_int(-3, 3);
        const std::int64_t dx = rng.uniform_int(-3, 3);
        const double amp = rng.uniform(0.8, 1.2);
        float* img = out.images.mutable_data() + s * hw * hw;
        for (std::int64_t i = 0; i < hw; ++i)
            for (std::int64_t j = 0; j < hw; ++j) {
                const std::int64_t si = i - dy, sj = j - dx;
                double v = (si >= 0 && si < hw && sj >= 0 && sj < hw)
                               ? amp * p[static_cast<std::size_t>(si * hw + sj)]
                               : 0.0;
                v += rng.uniform(0.0, noise);
                v = std::min(1.0, std::max(0.0, v));
                img[i * hw + j] = static_cast<float>(std::llround(v * 255.0)) / 255.0f;
            }
    }
    // deterministic shuffle so mini-batches mix classes
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    mgic::Tensor<float> shuffled({n, 1, hw, hw});
    std::vector<int> shuffled_labels(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t src = order[static_cast<std::size_t>(i)];
        std::copy(out.images.data() + src * hw * hw, out.images.data() + (src + 1) * hw * hw,
                  shuffled.mutable_data() + i * hw * hw);
        shuffled_labels[static_cast<std::size_t>(i)] = out.labels[static_cast<std::size_t>(src)];
    }
    out.images = shuffled;
    out.labels = shuffled_labels;
    return out;
}

// Split one corpus (shared class patterns) into train and held-out parts.
inline std::pair<DigitData, DigitData> split_digits(const DigitData& all, std::int64_t n_train) {
    const std::int64_t n = all.images.dim(0);
    const std::int64_t hw = all.images.dim(2);
    DigitData train, test;
    train.images = mgic::Tensor<float>({n_train, 1, hw, hw});
    test.images = mgic::Tensor<float>({n - n_train, 1, hw, hw});
    std::copy(all.images.data(), all.images.data() + n_train * hw * hw,
              train.images.mutable_data());
    std::copy(all.images.data() + n_train * hw * hw, all.images.data() + n * hw * hw,
              test.images.mutable_data());
    train.labels.assign(all.labels.begin(), all.labels.begin() + n_train);
    test.labels.assign(all.labels.begin() + n_train, all.labels.end());
    return {train, test};
}

}  // namespace testsupport
