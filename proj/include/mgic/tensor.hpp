#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mgic/errors.hpp"

namespace mgic {

using NodeId = std::int64_t;
constexpr NodeId kNoNode = -1;

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

// Dense row-major tensor. Copies are shallow: the buffer is shared, and a
// tensor that has entered a computation graph is treated as immutable.
// mutable_data() is for owners only (construction, optimizer updates).
// A zero extent is tolerated for degenerate I/O results (e.g. an empty IDX
// file); operations reject such tensors at their own shape checks.
template <typename T>
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>()) {
        check_shape();
        data_->assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(std::vector<std::int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(data))) {
        check_shape();
        if (static_cast<std::int64_t>(data_->size()) != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : *t.data_) v = value;
        return t;
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

    const T* data() const { return data_->data(); }
    T* mutable_data() { return data_->data(); }
    const std::vector<T>& vec() const { return *data_; }
    std::vector<T>& mutable_vec() { return *data_; }
    const std::shared_ptr<std::vector<T>>& storage() const { return data_; }

    T at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // Returns a tensor sharing this buffer under a different shape.
    Tensor reshaped(std::vector<std::int64_t> shape) const {
        if (shape_numel(shape) != numel()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Graph bookkeeping (set by the tape that recorded this tensor).
    NodeId node = kNoNode;
    bool requires_grad = false;

private:
    void check_shape() const {
        for (auto e : shape_) {
            if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape_));
        }
    }

    std::vector<std::int64_t> shape_;
    std::shared_ptr<std::vector<T>> data_;
};

// Named trainable value. `kind` drives optimizer policy (weight decay is
// applied to convolution/linear weights only).
enum class ParamKind { ConvWeight, TransferWeight, LinearWeight, Bias, NormGamma, NormBeta };

inline bool decays(ParamKind k) {
    return k == ParamKind::ConvWeight || k == ParamKind::LinearWeight;
}

template <typename T>
struct Parameter {
    Tensor<T> value;
    std::vector<T> grad;
    std::string name;
    ParamKind kind = ParamKind::ConvWeight;

    Parameter() = default;
    Parameter(Tensor<T> v, ParamKind k) : value(std::move(v)), kind(k) {
        value.requires_grad = true;
        grad.assign(static_cast<std::size_t>(value.numel()), T(0));
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
    std::int64_t numel() const { return value.numel(); }
};

}  // namespace mgic
