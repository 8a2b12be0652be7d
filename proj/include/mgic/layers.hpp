#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mgic/netdesc.hpp"
#include "mgic/ops.hpp"
#include "mgic/rng.hpp"
#include "mgic/tape.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

template <typename T>
class Module {
public:
    using ParamVisitor = std::function<void(const std::string&, Parameter<T>&)>;
    using BufferVisitor = std::function<void(const std::string&, std::vector<T>&)>;

    virtual ~Module() = default;
    virtual Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) = 0;
    // Walks parameters (and running buffers) with slash-joined path names.
    virtual void visit(const std::string& prefix, const ParamVisitor& on_param,
                       const BufferVisitor& on_buffer) = 0;
    virtual void set_training(bool) {}
    virtual NetDesc describe() const = 0;
};

namespace detail {
inline std::string join(const std::string& prefix, const std::string& leaf) {
    return prefix.empty() ? leaf : prefix + "/" + leaf;
}
}  // namespace detail

// Collects parameter pointers and writes full path names into Parameter::name.
template <typename T>
std::vector<Parameter<T>*> collect_params(Module<T>& m, const std::string& root = "") {
    std::vector<Parameter<T>*> out;
    m.visit(
        root,
        [&](const std::string& path, Parameter<T>& p) {
            p.name = path;
            out.push_back(&p);
        },
        [](const std::string&, std::vector<T>&) {});
    return out;
}

template <typename T>
std::int64_t count_params(Module<T>& m) {
    std::int64_t n = 0;
    m.visit(
        "", [&](const std::string&, Parameter<T>& p) { n += p.numel(); },
        [](const std::string&, std::vector<T>&) {});
    return n;
}

// ---------------------------------------------------------------------------
// Convolution layer.
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel, std::int64_t stride,
           std::int64_t pad, std::int64_t groups, bool with_bias, Rng& rng,
           ParamKind kind = ParamKind::ConvWeight)
        : c_in_(c_in), c_out_(c_out), kernel_(kernel), stride_(stride), pad_(pad),
          groups_(groups), has_bias_(with_bias) {
        if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
            throw ConfigError("conv2d: groups=" + std::to_string(groups) +
                              " must divide c_in=" + std::to_string(c_in) +
                              " and c_out=" + std::to_string(c_out));
        }
        Tensor<T> w({c_out, c_in / groups, kernel, kernel});
        const double fan_in = static_cast<double>((c_in / groups) * kernel * kernel);
        const double bound = std::sqrt(2.0) * std::sqrt(3.0 / fan_in);
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w.mutable_data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        weight_ = Parameter<T>(std::move(w), kind);
        if (has_bias_) bias_ = Parameter<T>(Tensor<T>({c_out}), ParamKind::Bias);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> y = ops::conv2d(tape, x, tape.leaf_param(weight_), stride_, pad_, groups_);
        if (has_bias_) y = ops::bias_channels(tape, y, tape.leaf_param(bias_));
        return y;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor&) override {
        on_param(detail::join(prefix, "weight"), weight_);
        if (has_bias_) on_param(detail::join(prefix, "bias"), bias_);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "conv";
        d.attr = {{"c_in", c_in_}, {"c_out", c_out_}, {"k", kernel_}, {"stride", stride_},
                  {"pad", pad_},   {"groups", groups_}, {"bias", has_bias_ ? 1 : 0}};
        return d;
    }

    std::int64_t param_count() const {
        return c_out_ * (c_in_ / groups_) * kernel_ * kernel_ + (has_bias_ ? c_out_ : 0);
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    std::int64_t groups() const { return groups_; }
    std::int64_t c_in() const { return c_in_; }
    std::int64_t c_out() const { return c_out_; }
    std::int64_t kernel() const { return kernel_; }
    std::int64_t stride() const { return stride_; }

    void zero_weights() {
        auto& v = weight_.value.mutable_vec();
        std::fill(v.begin(), v.end(), T(0));
    }

private:
    std::int64_t c_in_, c_out_, kernel_, stride_, pad_, groups_;
    bool has_bias_;
    Parameter<T> weight_, bias_;
};

// Parameter count for a convolution layout; mirrors Conv2d::param_count.
inline std::int64_t conv2d_param_count(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                                       std::int64_t groups, bool with_bias) {
    if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
        throw ConfigError("conv2d_param_count: groups=" + std::to_string(groups) +
                          " must divide c_in=" + std::to_string(c_in) +
                          " and c_out=" + std::to_string(c_out));
    }
    return c_out * (c_in / groups) * kernel * kernel + (with_bias ? c_out : 0);
}

// ---------------------------------------------------------------------------
// Batch normalization layer. Owns running buffers; train mode standardizes
// with biased batch variance and updates buffers with the unbiased one.
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm2d : public Module<T> {
public:
    explicit BatchNorm2d(std::int64_t channels, double eps = 1e-5, double momentum = 0.1)
        : channels_(channels), eps_(eps), momentum_(momentum),
          gamma_(Tensor<T>::full({channels}, T(1)), ParamKind::NormGamma),
          beta_(Tensor<T>({channels}), ParamKind::NormBeta),
          running_mean_(static_cast<std::size_t>(channels), T(0)),
          running_var_(static_cast<std::size_t>(channels), T(1)) {}

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        if (x.rank() < 2 || x.dim(1) != channels_) {
            throw DimensionError("batchnorm: expected " + std::to_string(channels_) +
                                 " channels, got input " + shape_str(x.shape()));
        }
        if (!training_) {
            return ops::batchnorm_eval(tape, x, tape.leaf_param(gamma_), tape.leaf_param(beta_),
                                       running_mean_, running_var_, eps_);
        }
        ops::BnSaved saved;
        Tensor<T> y = ops::batchnorm_train(tape, x, tape.leaf_param(gamma_),
                                           tape.leaf_param(beta_), eps_, &saved);
        const std::int64_t m = x.numel() / channels_;
        const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
        for (std::int64_t c = 0; c < channels_; ++c) {
            const auto i = static_cast<std::size_t>(c);
            running_mean_[i] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_mean_[i]) +
                                              momentum_ * saved.mean[i]);
            running_var_[i] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_var_[i]) +
                                             momentum_ * saved.var[i] * unbias);
        }
        return y;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        on_param(detail::join(prefix, "gamma"), gamma_);
        on_param(detail::join(prefix, "beta"), beta_);
        on_buffer(detail::join(prefix, "running_mean"), running_mean_);
        on_buffer(detail::join(prefix, "running_var"), running_var_);
    }

    void set_training(bool training) override { training_ = training; }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "batchnorm";
        d.attr = {{"channels", channels_}};
        return d;
    }

    void set_affine(T gamma, T beta) {
        std::fill(gamma_.value.mutable_vec().begin(), gamma_.value.mutable_vec().end(), gamma);
        std::fill(beta_.value.mutable_vec().begin(), beta_.value.mutable_vec().end(), beta);
    }

    Parameter<T>& gamma() { return gamma_; }
    Parameter<T>& beta() { return beta_; }
    std::vector<T>& running_mean() { return running_mean_; }
    std::vector<T>& running_var() { return running_var_; }
    bool training() const { return training_; }
    std::int64_t channels() const { return channels_; }

private:
    std::int64_t channels_;
    double eps_, momentum_;
    bool training_ = true;
    Parameter<T> gamma_, beta_;
    std::vector<T> running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// Linear layer and stateless modules.
// ---------------------------------------------------------------------------

template <typename T>
class Linear : public Module<T> {
public:
    Linear(std::int64_t c_in, std::int64_t c_out, bool with_bias, Rng& rng)
        : c_in_(c_in), c_out_(c_out), has_bias_(with_bias) {
        Tensor<T> w({c_out, c_in});
        const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w.mutable_data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        weight_ = Parameter<T>(std::move(w), ParamKind::LinearWeight);
        if (has_bias_) bias_ = Parameter<T>(Tensor<T>({c_out}), ParamKind::Bias);
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> w = tape.leaf_param(weight_);
        if (has_bias_) {
            Tensor<T> b = tape.leaf_param(bias_);
            return ops::linear(tape, x, w, &b);
        }
        return ops::linear<T>(tape, x, w, nullptr);
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor&) override {
        on_param(detail::join(prefix, "weight"), weight_);
        if (has_bias_) on_param(detail::join(prefix, "bias"), bias_);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "linear";
        d.attr = {{"c_in", c_in_}, {"c_out", c_out_}, {"bias", has_bias_ ? 1 : 0}};
        return d;
    }

    Parameter<T>& weight() { return weight_; }

private:
    std::int64_t c_in_, c_out_;
    bool has_bias_;
    Parameter<T> weight_, bias_;
};

template <typename T>
class Relu : public Module<T> {
public:
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override { return ops::relu(tape, x); }
    void visit(const std::string&, const typename Module<T>::ParamVisitor&,
               const typename Module<T>::BufferVisitor&) override {}
    NetDesc describe() const override { return NetDesc{"relu", "", {}, {}}; }
};

struct PoolSpec {
    enum class Kind { Max, Avg };
    Kind kind = Kind::Max;
    std::int64_t window = 2;
    std::int64_t stride = 2;
};

template <typename T>
class Pool : public Module<T> {
public:
    explicit Pool(PoolSpec spec) : spec_(spec) {}
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        return spec_.kind == PoolSpec::Kind::Max ? ops::maxpool(tape, x, spec_.window, spec_.stride)
                                                 : ops::avgpool(tape, x, spec_.window, spec_.stride);
    }
    void visit(const std::string&, const typename Module<T>::ParamVisitor&,
               const typename Module<T>::BufferVisitor&) override {}
    NetDesc describe() const override {
        NetDesc d;
        d.kind = spec_.kind == PoolSpec::Kind::Max ? "maxpool" : "avgpool";
        d.attr = {{"window", spec_.window}, {"stride", spec_.stride}};
        return d;
    }

private:
    PoolSpec spec_;
};

// Spatial mean over the full H x W extent, emitting [N, C].
template <typename T>
class GlobalAvgPool : public Module<T> {
public:
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        if (x.rank() != 4) throw DimensionError("global_avgpool: input must be rank 4");
        Tensor<T> pooled = ops::avgpool(tape, x, x.dim(2), x.dim(2));
        return ops::reshape(tape, pooled, {x.dim(0), x.dim(1)});
    }
    void visit(const std::string&, const typename Module<T>::ParamVisitor&,
               const typename Module<T>::BufferVisitor&) override {}
    NetDesc describe() const override { return NetDesc{"gap", "", {}, {}}; }
};

template <typename T>
class Flatten : public Module<T> {
public:
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        return ops::reshape(tape, x, {x.dim(0), x.numel() / x.dim(0)});
    }
    void visit(const std::string&, const typename Module<T>::ParamVisitor&,
               const typename Module<T>::BufferVisitor&) override {}
    NetDesc describe() const override { return NetDesc{"flatten", "", {}, {}}; }
};

// ---------------------------------------------------------------------------
// Sequential container.
// ---------------------------------------------------------------------------

template <typename T>
class Sequential : public Module<T> {
public:
    Sequential() = default;

    void add(std::string name, std::unique_ptr<Module<T>> m) {
        names_.push_back(std::move(name));
        children_.push_back(std::move(m));
    }

    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) override {
        Tensor<T> cur = x;
        for (auto& child : children_) cur = child->forward(tape, cur);
        return cur;
    }

    void visit(const std::string& prefix, const typename Module<T>::ParamVisitor& on_param,
               const typename Module<T>::BufferVisitor& on_buffer) override {
        for (std::size_t i = 0; i < children_.size(); ++i)
            children_[i]->visit(detail::join(prefix, names_[i]), on_param, on_buffer);
    }

    void set_training(bool training) override {
        for (auto& child : children_) child->set_training(training);
    }

    NetDesc describe() const override {
        NetDesc d;
        d.kind = "sequence";
        for (std::size_t i = 0; i < children_.size(); ++i) {
            NetDesc c = children_[i]->describe();
            c.name = names_[i];
            d.children.push_back(std::move(c));
        }
        return d;
    }

    std::size_t size() const { return children_.size(); }
    Module<T>& child(std::size_t i) { return *children_[i]; }
    const std::string& child_name(std::size_t i) const { return names_[i]; }

private:
    std::vector<std::string> names_;
    std::vector<std::unique_ptr<Module<T>>> children_;
};

enum class LossKind { Mse, SoftmaxCrossEntropy };

}  // namespace mgic
