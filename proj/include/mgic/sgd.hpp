#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mgic/errors.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    enum class Schedule { Constant, StepDiv10Every30 };
    Schedule schedule = Schedule::Constant;
    std::int64_t epochs = 1;
    std::int64_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (lr < 0) throw ConfigError("sgd: lr must be non-negative");
        if (momentum < 0 || momentum >= 1) throw ConfigError("sgd: momentum must be in [0, 1)");
        if (weight_decay < 0) throw ConfigError("sgd: weight_decay must be >= 0");
        if (epochs < 0) throw ConfigError("sgd: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("sgd: batch_size must be >= 1");
    }
};

// Step schedule divides the base rate by 10 every 30 epochs.
inline double lr_at(std::int64_t epoch, const SgdConfig& cfg) {
    if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
    if (cfg.schedule == SgdConfig::Schedule::Constant) return cfg.lr;
    double lr = cfg.lr;
    for (std::int64_t k = 0; k < epoch / 30; ++k) lr /= 10.0;
    return lr;
}

// SGD with momentum:  v <- momentum*v + (g + wd*w);  w <- w - lr*v.
// Weight decay touches convolution/linear weights only, leaving norm
// parameters and the row-stochastic-initialized transfers unbiased.
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Parameter<T>*> params, const SgdConfig& cfg)
        : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        velocity_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i)
            velocity_[i].assign(static_cast<std::size_t>(params_[i]->numel()), T(0));
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter<T>& p = *params_[i];
            const double wd = decays(p.kind) ? cfg_.weight_decay : 0.0;
            T* w = p.value.mutable_data();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < v.size(); ++k) {
                const double g = static_cast<double>(p.grad[k]);
                if (!std::isfinite(g)) {
                    throw NumericalError("sgd: non-finite gradient in parameter '" + p.name + "'");
                }
                const double vel = cfg_.momentum * static_cast<double>(v[k]) +
                                   (g + wd * static_cast<double>(w[k]));
                v[k] = static_cast<T>(vel);
                w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * vel);
            }
        }
    }

    std::size_t param_count() const { return params_.size(); }

private:
    std::vector<Parameter<T>*> params_;
    SgdConfig cfg_;
    std::vector<std::vector<T>> velocity_;
};

}  // namespace mgic
