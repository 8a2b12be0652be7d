#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mgic/rng.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

template <typename T>
struct DatasetHandle {
    enum class Kind { FunctionSurface, IdxImages, SyntheticFeatures };
    Kind kind = Kind::FunctionSurface;
    Tensor<T> inputs;        // leading extent is the sample count
    Tensor<T> targets;       // regression targets; empty for labeled data
    std::vector<int> labels; // classification labels; empty for regression

    std::int64_t size() const { return inputs.dim(0); }
};

// The implicit target surface: f(x, y) = cos(x) sin(20 y) on [0,1]^2.
inline double function_surface(double x, double y) { return std::cos(x) * std::sin(20.0 * y); }

// n uniform samples of the surface; inputs [n, 2], targets [n, 1].
template <typename T>
DatasetHandle<T> sample_function_dataset(std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("sample_function_dataset: n must be >= 1");
    Rng rng = Rng(seed).stream(kDataStream);
    DatasetHandle<T> d;
    d.kind = DatasetHandle<T>::Kind::FunctionSurface;
    d.inputs = Tensor<T>({n, 2});
    d.targets = Tensor<T>({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = rng.unit();
        const double y = rng.unit();
        d.inputs.mutable_data()[2 * i] = static_cast<T>(x);
        d.inputs.mutable_data()[2 * i + 1] = static_cast<T>(y);
        d.targets.mutable_data()[i] = static_cast<T>(function_surface(x, y));
    }
    return d;
}

// Synthetic correlated feature maps: a fixed rank-limited channel mixing of
// spatially smoothed noise fields, so the corpus has numerical channel rank
// <= `rank` and is compressible by a channel hierarchy.
template <typename T>
DatasetHandle<T> synth_feature_maps(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                                    std::uint64_t seed, std::int64_t rank = 0) {
    if (n < 1 || c < 1 || h < 1 || w < 1) throw ConfigError("synth_feature_maps: bad extents");
    if (rank <= 0) rank = std::max<std::int64_t>(1, c / 4);
    Rng rng = Rng(seed).stream(kDataStream);
    // Shared mixing matrix [c x rank]: independent Gaussian directions (so the
    // correlated channel sets sit in generic position relative to any
    // contiguous grouping), rows normalized for unit-ish channel variance.
    std::vector<double> mix(static_cast<std::size_t>(c * rank));
    for (auto& m : mix) m = rng.normal();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double norm = 0;
        for (std::int64_t k = 0; k < rank; ++k) {
            const double v = mix[static_cast<std::size_t>(ch * rank + k)];
            norm += v * v;
        }
        norm = std::sqrt(norm) + 1e-9;
        for (std::int64_t k = 0; k < rank; ++k)
            mix[static_cast<std::size_t>(ch * rank + k)] /= norm;
    }
    DatasetHandle<T> d;
    d.kind = DatasetHandle<T>::Kind::SyntheticFeatures;
    d.inputs = Tensor<T>({n, c, h, w});
    const std::int64_t hw = h * w;
    std::vector<double> field(static_cast<std::size_t>(hw));
    std::vector<double> tmp(static_cast<std::size_t>(hw));
    std::vector<double> fields(static_cast<std::size_t>(rank * hw));
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t k = 0; k < rank; ++k) {
            for (auto& v : field) v = rng.normal();
            // two passes of a separable [1,2,1]/4 smoother
            for (int pass = 0; pass < 2; ++pass) {
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j) {
                        const double l = field[static_cast<std::size_t>(i * w + std::max<std::int64_t>(j - 1, 0))];
                        const double r = field[static_cast<std::size_t>(i * w + std::min<std::int64_t>(j + 1, w - 1))];
                        tmp[static_cast<std::size_t>(i * w + j)] = 0.25 * l + 0.5 * field[static_cast<std::size_t>(i * w + j)] + 0.25 * r;
                    }
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j) {
                        const double u = tmp[static_cast<std::size_t>(std::max<std::int64_t>(i - 1, 0) * w + j)];
                        const double dn = tmp[static_cast<std::size_t>(std::min<std::int64_t>(i + 1, h - 1) * w + j)];
                        field[static_cast<std::size_t>(i * w + j)] = 0.25 * u + 0.5 * tmp[static_cast<std::size_t>(i * w + j)] + 0.25 * dn;
                    }
            }
            // standardize the field
            double mean = 0;
            for (double v : field) mean += v;
            mean /= static_cast<double>(hw);
            double var = 0;
            for (double v : field) var += (v - mean) * (v - mean);
            var /= static_cast<double>(hw);
            const double inv = 1.0 / std::sqrt(var + 1e-12);
            for (std::int64_t p = 0; p < hw; ++p)
                fields[static_cast<std::size_t>(k * hw + p)] = (field[static_cast<std::size_t>(p)] - mean) * inv;
        }
        T* out = d.inputs.mutable_data() + s * c * hw;
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p) {
                double acc = 0;
                for (std::int64_t k = 0; k < rank; ++k)
                    acc += mix[static_cast<std::size_t>(ch * rank + k)] * fields[static_cast<std::size_t>(k * hw + p)];
                out[ch * hw + p] = static_cast<T>(acc);
            }
    }
    return d;
}

// Gathers rows `idx` of a tensor along the leading axis.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, const std::vector<std::int64_t>& idx) {
    std::vector<std::int64_t> shape = src.shape();
    const std::int64_t stride = src.numel() / shape[0];
    shape[0] = static_cast<std::int64_t>(idx.size());
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* s = src.data() + idx[i] * stride;
        std::copy(s, s + stride, out.mutable_data() + static_cast<std::int64_t>(i) * stride);
    }
    return out;
}

}  // namespace mgic
