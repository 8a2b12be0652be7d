#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mgic/blocks.hpp"
#include "mgic/gradcheck.hpp"

namespace mgic {

// One randomized gradient check; `run` returns the max relative error of the
// analytic gradient against central differences at 64-bit.
struct GradCheckCase {
    std::string name;
    std::function<double(Rng&)> run;
};

namespace checkdetail {

inline Tensor<double> random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] = rng.uniform(lo, hi);
    return t;
}

// FD of a tape program with respect to its input tensor.
template <typename F>
double fd_input(const F& program, const Tensor<double>& x0, double eps = 1e-5) {
    ScalarMap<double> f = [&](const Tensor<double>& pt, std::vector<double>* grad) {
        Tape<double> tape;
        Tensor<double> x = tape.leaf(pt, grad != nullptr);
        Tensor<double> loss = program(tape, x);
        if (grad) {
            tape.backward(loss);
            *grad = tape.grad(x);
        }
        return static_cast<double>(loss.data()[0]);
    };
    return finite_difference_check(f, x0, eps);
}

// FD with respect to one parameter of a module, driving a fresh tape per
// evaluation. The parameter is restored afterwards.
inline double fd_param(Parameter<double>& p,
                       const std::function<Tensor<double>(Tape<double>&)>& forward_loss,
                       double eps = 1e-5) {
    Tensor<double> saved = p.value.clone();
    ScalarMap<double> f = [&](const Tensor<double>& pt, std::vector<double>* grad) {
        std::copy(pt.data(), pt.data() + pt.numel(), p.value.mutable_data());
        Tape<double> tape;
        Tensor<double> loss = forward_loss(tape);
        if (grad) {
            p.zero_grad();
            tape.backward(loss);
            *grad = p.grad;
        }
        return static_cast<double>(loss.data()[0]);
    };
    const double r = finite_difference_check(f, saved, eps);
    std::copy(saved.data(), saved.data() + saved.numel(), p.value.mutable_data());
    return r;
}

// Draws inputs until the recorded forward keeps every relu pre-activation
// away from its kink, so central differences stay on one linear piece.
template <typename MakePoint, typename F>
Tensor<double> kink_free_point(const MakePoint& make_point, const F& program, double margin = 1e-3,
                               int tries = 60) {
    for (int t = 0; t < tries; ++t) {
        Tensor<double> x0 = make_point();
        Tape<double> tape;
        Tensor<double> x = tape.leaf(x0, false);
        program(tape, x);
        if (tape.min_relu_input_abs() >= margin) return x0;
    }
    throw NumericalError("gradient check: could not sample a point away from relu kinks");
}

// FD over input and every parameter of a module. The scalar probe is a fixed
// random linear functional of the output, so no gradient is structurally zero
// (a plain sum is, e.g., x-invariant through train-mode batchnorm).
inline double fd_module(Module<double>& m, const Tensor<double>& x0, double eps = 1e-5) {
    Tensor<double> weights;
    {
        Tape<double> tape;
        Tensor<double> y = m.forward(tape, tape.leaf(x0, false));
        Rng wrng(0x9e11);
        weights = random_tensor(y.shape(), wrng, 0.2, 1.0);
    }
    auto program = [&](Tape<double>& tape, const Tensor<double>& x) {
        Tensor<double> y = m.forward(tape, x);
        return ops::sum(tape, ops::mul(tape, y, tape.leaf(weights, false)));
    };
    double worst = fd_input(program, x0, eps);
    auto params = collect_params(m);
    Tensor<double> fixed = x0;
    for (Parameter<double>* p : params) {
        const double r = fd_param(*p, [&](Tape<double>& tape) {
            Tensor<double> y = m.forward(tape, tape.leaf(fixed, false));
            return ops::sum(tape, ops::mul(tape, y, tape.leaf(weights, false)));
        }, eps);
        worst = std::max(worst, r);
    }
    return worst;
}

}  // namespace checkdetail

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0;
    bool passed = false;
    std::string note;
};

// Runs each case `trials` times with derived seeds; exceptions fail the case.
inline std::vector<GradCheckResult> run_gradcheck_cases(const std::vector<GradCheckCase>& cases,
                                                        std::uint64_t seed, double tolerance,
                                                        std::int64_t trials) {
    std::vector<GradCheckResult> results;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        GradCheckResult r;
        r.name = cases[i].name;
        bool ok = true;
        for (std::int64_t t = 0; t < trials && ok; ++t) {
            try {
                Rng rng(seed + 1000 * static_cast<std::uint64_t>(i) + static_cast<std::uint64_t>(t));
                r.max_rel_err = std::max(r.max_rel_err, cases[i].run(rng));
            } catch (const Error& e) {
                ok = false;
                r.note = e.what();
            }
        }
        r.passed = ok && r.max_rel_err < tolerance;
        results.push_back(std::move(r));
    }
    return results;
}

// The registered primitives and composite blocks exercised by the gradient
// checking command and the acceptance suite.
inline std::vector<GradCheckCase> standard_gradcheck_cases() {
    using namespace checkdetail;
    std::vector<GradCheckCase> cases;

    cases.push_back({"add_sub_mul_scale", [](Rng& rng) {
        Tensor<double> a = random_tensor({3, 4}, rng);
        Tensor<double> b = random_tensor({3, 4}, rng, 0.5, 1.5);
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            Tensor<double> bb = t.leaf(b, false);
            Tensor<double> u = ops::add(t, x, bb);
            u = ops::mul(t, u, ops::sub(t, x, bb));
            return ops::sum(t, ops::scale(t, u, 0.7));
        };
        return fd_input(program, a);
    }});

    cases.push_back({"matmul", [](Rng& rng) {
        Tensor<double> a = random_tensor({3, 5}, rng);
        Tensor<double> b = random_tensor({5, 4}, rng);
        double worst = fd_input(
            [&](Tape<double>& t, const Tensor<double>& x) {
                return ops::sum(t, ops::matmul(t, x, t.leaf(b, false)));
            },
            a);
        worst = std::max(worst, fd_input(
            [&](Tape<double>& t, const Tensor<double>& x) {
                return ops::sum(t, ops::matmul(t, t.leaf(a, false), x));
            },
            b));
        return worst;
    }});

    cases.push_back({"linear", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        Linear<double> layer(6, 3, true, init);
        Tensor<double> x0 = random_tensor({4, 6}, rng);
        return fd_module(layer, x0);
    }});

    cases.push_back({"relu_chain", [](Rng& rng) {
        Tensor<double> w = random_tensor({5, 4}, rng);
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            return ops::sum(t, ops::relu(t, ops::matmul(t, x, t.leaf(w, false))));
        };
        Tensor<double> x0 = kink_free_point([&] { return random_tensor({3, 5}, rng); }, program);
        return fd_input(program, x0, 1e-5);
    }});

    cases.push_back({"conv2d_full", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        Conv2d<double> conv(3, 5, 3, 1, 1, 1, true, init);
        return fd_module(conv, random_tensor({2, 3, 5, 5}, rng));
    }});

    cases.push_back({"conv2d_grouped_strided", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        Conv2d<double> conv(4, 6, 3, 2, 0, 2, false, init);
        return fd_module(conv, random_tensor({2, 4, 7, 7}, rng));
    }});

    cases.push_back({"conv2d_depthwise", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        Conv2d<double> conv(4, 4, 3, 1, 1, 4, false, init);
        return fd_module(conv, random_tensor({2, 4, 5, 5}, rng));
    }});

    cases.push_back({"conv2d_pointwise", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        Conv2d<double> conv(6, 4, 1, 1, 0, 2, false, init);
        return fd_module(conv, random_tensor({3, 6, 4, 4}, rng));
    }});

    cases.push_back({"batchnorm_train", [](Rng& rng) {
        BatchNorm2d<double> bn(3);
        bn.set_training(true);
        // non-trivial scale/shift
        for (std::int64_t c = 0; c < 3; ++c) {
            bn.gamma().value.mutable_data()[c] = rng.uniform(0.5, 1.5);
            bn.beta().value.mutable_data()[c] = rng.uniform(-0.5, 0.5);
        }
        return fd_module(bn, random_tensor({4, 3, 3, 3}, rng));
    }});

    cases.push_back({"batchnorm_eval", [](Rng& rng) {
        BatchNorm2d<double> bn(3);
        for (std::int64_t c = 0; c < 3; ++c) {
            bn.running_mean()[static_cast<std::size_t>(c)] = rng.uniform(-0.3, 0.3);
            bn.running_var()[static_cast<std::size_t>(c)] = rng.uniform(0.5, 1.5);
        }
        bn.set_training(false);
        return fd_module(bn, random_tensor({2, 3, 3, 3}, rng));
    }});

    cases.push_back({"maxpool", [](Rng& rng) {
        auto program = [](Tape<double>& t, const Tensor<double>& x) {
            return ops::sum(t, ops::maxpool(t, x, 2, 2));
        };
        return fd_input(program, random_tensor({2, 2, 6, 6}, rng), 1e-6);
    }});

    cases.push_back({"avgpool", [](Rng& rng) {
        auto program = [](Tape<double>& t, const Tensor<double>& x) {
            return ops::sum(t, ops::avgpool(t, x, 3, 2));
        };
        return fd_input(program, random_tensor({2, 2, 7, 7}, rng));
    }});

    cases.push_back({"reshape_slice", [](Rng& rng) {
        auto program = [](Tape<double>& t, const Tensor<double>& x) {
            Tensor<double> flat = ops::reshape(t, x, {x.dim(0), x.numel() / x.dim(0)});
            return ops::sum(t, ops::slice_cols(t, flat, 3));
        };
        return fd_input(program, random_tensor({2, 2, 2, 2}, rng));
    }});

    cases.push_back({"mean_mse", [](Rng& rng) {
        Tensor<double> target = random_tensor({3, 4}, rng);
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            return ops::add(t, ops::mse(t, x, target), ops::mean(t, x));
        };
        return fd_input(program, random_tensor({3, 4}, rng));
    }});

    cases.push_back({"softmax_cross_entropy", [](Rng& rng) {
        std::vector<int> labels = {1, 0, 3, 2};
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            return ops::softmax_cross_entropy(t, x, labels);
        };
        return fd_input(program, random_tensor({4, 4}, rng));
    }});

    cases.push_back({"bias_channels", [](Rng& rng) {
        Tensor<double> b = random_tensor({3}, rng);
        double worst = fd_input(
            [&](Tape<double>& t, const Tensor<double>& x) {
                return ops::sum(t, ops::bias_channels(t, x, t.leaf(b, false)));
            },
            random_tensor({2, 3, 2, 2}, rng));
        Tensor<double> x_fixed = random_tensor({2, 3, 2, 2}, rng);
        worst = std::max(worst, fd_input(
            [&](Tape<double>& t, const Tensor<double>& bb) {
                return ops::sum(t, ops::bias_channels(t, t.leaf(x_fixed, false), bb));
            },
            b));
        return worst;
    }});

    cases.push_back({"transfer_chain", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        TransferChain<double> chain(16, 4, 4, init);
        return fd_module(chain, random_tensor({2, 16, 2, 2}, rng));
    }});

    cases.push_back({"channel_shortcut", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        ChannelShortcut<double> sc(8, 12, 2, init);
        return fd_module(sc, random_tensor({2, 8, 6, 6}, rng));
    }});

    cases.push_back({"bottleneck_block", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        BottleneckBlock<double> block(8, 4, 2.0, 3, init);
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            return ops::sum(t, block.forward(t, x));
        };
        Tensor<double> x0 = kink_free_point([&] { return random_tensor({2, 8, 3, 3}, rng); }, program);
        return fd_input(program, x0);
    }});

    cases.push_back({"mgic_block", [](Rng& rng) {
        Rng init = rng.stream(kInitStream);
        MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), init);
        auto program = [&](Tape<double>& t, const Tensor<double>& x) {
            return ops::sum(t, block.forward(t, x));
        };
        Tensor<double> x0 = kink_free_point([&] { return random_tensor({2, 16, 3, 3}, rng); }, program);
        auto params = collect_params(block);
        double worst = fd_input(program, x0);
        for (Parameter<double>* p : params) {
            worst = std::max(worst, fd_param(*p, [&](Tape<double>& t) {
                return ops::sum(t, block.forward(t, t.leaf(x0, false)));
            }));
        }
        return worst;
    }});

    return cases;
}

}  // namespace mgic
