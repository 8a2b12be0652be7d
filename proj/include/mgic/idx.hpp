#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mgic/errors.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

// Raw IDX container (big-endian header, magic 0x0000<dtype><ndims>).
// Only the unsigned-byte payload (dtype code 0x08) is supported.
struct IdxContent {
    int dtype_code = 0x08;
    std::vector<std::int64_t> dims;
    std::vector<unsigned char> bytes;
};

IdxContent load_idx_raw(const std::string& path);
void save_idx_raw(const std::string& path, const IdxContent& content);

// Decodes an IDX file: 3 dims -> images [N, 1, H, W] with pixels scaled to
// [0, 1]; 1 dim -> raw label values [N].
template <typename T>
Tensor<T> load_idx(const std::string& path) {
    IdxContent raw = load_idx_raw(path);
    if (raw.dims.size() == 3) {
        Tensor<T> t({raw.dims[0], 1, raw.dims[1], raw.dims[2]});
        for (std::size_t i = 0; i < raw.bytes.size(); ++i)
            t.mutable_data()[static_cast<std::int64_t>(i)] =
                static_cast<T>(raw.bytes[i]) / static_cast<T>(255);
        return t;
    }
    if (raw.dims.size() == 1) {
        Tensor<T> t({raw.dims[0]});
        for (std::size_t i = 0; i < raw.bytes.size(); ++i)
            t.mutable_data()[static_cast<std::int64_t>(i)] = static_cast<T>(raw.bytes[i]);
        return t;
    }
    throw IoError("idx: unsupported dimension count " + std::to_string(raw.dims.size()) +
                  " in " + path);
}

// Writes [N, 1, H, W] images in [0, 1] back to unsigned bytes (rounding
// re-quantization makes save(load(x)) byte-identical).
template <typename T>
void save_idx_images(const std::string& path, const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != 1) {
        throw DimensionError("idx: images must be [N, 1, H, W], got " + shape_str(images.shape()));
    }
    IdxContent raw;
    raw.dims = {images.dim(0), images.dim(2), images.dim(3)};
    raw.bytes.resize(static_cast<std::size_t>(images.numel()));
    for (std::int64_t i = 0; i < images.numel(); ++i) {
        const double v = std::llround(static_cast<double>(images.data()[i]) * 255.0);
        raw.bytes[static_cast<std::size_t>(i)] =
            static_cast<unsigned char>(std::min(255.0, std::max(0.0, v)));
    }
    save_idx_raw(path, raw);
}

void save_idx_labels(const std::string& path, const std::vector<int>& labels);

}  // namespace mgic
