#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "mgic/check_registry.hpp"
#include "mgic/layers.hpp"
#include "support/oracles.hpp"

using namespace mgic;
using checkdetail::random_tensor;

namespace {

template <typename T>
Tensor<T> run_conv(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, std::int64_t pad,
                   std::int64_t groups) {
    Tape<T> tape;
    return ops::conv2d(tape, tape.leaf(x, false), tape.leaf(w, false), stride, pad, groups);
}

}  // namespace

TEST_CASE("pointwise identity convolution") {
    const std::int64_t C = 4;
    Tensor<double> w({C, C, 1, 1});
    for (std::int64_t o = 0; o < C; ++o) w.mutable_data()[o * C + o] = 1.0;
    Rng rng(1);
    Tensor<double> x = random_tensor({2, C, 3, 3}, rng);
    Tensor<double> y = run_conv(x, w, 1, 0, 1);
    CHECK(oracle::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("depthwise all-ones 3x3 on a constant field sums the window") {
    const std::int64_t C = 3;
    Tensor<double> w = Tensor<double>::full({C, 1, 3, 3}, 1.0);
    Tensor<double> x = Tensor<double>::full({1, C, 5, 5}, 1.0);
    Tensor<double> y = run_conv(x, w, 1, 1, C);
    // interior pixel sees the full 3x3 window, corner only 2x2
    CHECK(y.data()[1 * 5 + 1] == doctest::Approx(9.0));
    CHECK(y.data()[2 * 5 + 2] == doctest::Approx(9.0));
    CHECK(y.data()[0] == doctest::Approx(4.0));
}

TEST_CASE("grouped convolution equals the nested-loop oracle") {
    Rng rng(2);
    Tensor<double> x = random_tensor({2, 4, 5, 5}, rng);
    Tensor<double> w = random_tensor({6, 2, 3, 3}, rng);
    Tensor<double> fast = run_conv(x, w, 1, 1, 2);
    Tensor<double> slow = oracle::naive_conv2d(x, w, 1, 1, 2);
    CHECK(oracle::max_abs_diff(fast, slow) < 1e-6);

    // pointwise fast path and a strided padded case
    Tensor<double> w1 = random_tensor({4, 2, 1, 1}, rng);
    CHECK(oracle::max_abs_diff(run_conv(x, w1, 1, 0, 2),
                               oracle::naive_conv2d(x, w1, 1, 0, 2)) < 1e-6);
    Tensor<double> w2 = random_tensor({4, 4, 3, 3}, rng);
    CHECK(oracle::max_abs_diff(run_conv(x, w2, 2, 2, 1),
                               oracle::naive_conv2d(x, w2, 2, 2, 1)) < 1e-6);
}

TEST_CASE("grouped convolution is the concatenation of per-group full convolutions") {
    Rng rng(3);
    const std::int64_t N = 2, C = 6, H = 4, W = 4, Co = 6, g = 3, k = 3;
    Tensor<double> x = random_tensor({N, C, H, W}, rng);
    Tensor<double> w = random_tensor({Co, C / g, k, k}, rng);
    Tensor<double> grouped = run_conv(x, w, 1, 1, g);
    const std::int64_t cig = C / g, cog = Co / g;
    for (std::int64_t q = 0; q < g; ++q) {
        Tensor<double> xs({N, cig, H, W});
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < cig; ++c)
                std::copy(x.data() + ((n * C + q * cig + c) * H * W),
                          x.data() + ((n * C + q * cig + c + 1) * H * W),
                          xs.mutable_data() + ((n * cig + c) * H * W));
        Tensor<double> ws({cog, cig, k, k});
        std::copy(w.data() + q * cog * cig * k * k, w.data() + (q + 1) * cog * cig * k * k,
                  ws.mutable_data());
        Tensor<double> ys = run_conv(xs, ws, 1, 1, 1);  // full convolution on the slice
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < cog; ++c)
                for (std::int64_t p = 0; p < H * W; ++p) {
                    const double a = grouped.data()[(n * Co + q * cog + c) * H * W + p];
                    const double b = ys.data()[(n * cog + c) * H * W + p];
                    CHECK(std::abs(a - b) < 1e-6);
                }
    }
}

TEST_CASE("conv2d_param_count worked examples and enumeration equality") {
    CHECK(conv2d_param_count(64, 64, 3, 8, false) == 4608);
    CHECK(conv2d_param_count(64, 64, 3, 64, false) == 576);
    CHECK(conv2d_param_count(64, 64, 1, 1, false) == 4096);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t g = 1 << rng.uniform_int(0, 2);
        const std::int64_t cin = g * rng.uniform_int(1, 4);
        const std::int64_t cout = g * rng.uniform_int(1, 4);
        const std::int64_t k = 2 * rng.uniform_int(0, 2) + 1;
        const bool bias = rng.uniform_int(0, 1) == 1;
        Conv2d<double> conv(cin, cout, k, 1, 0, g, bias, rng);
        std::int64_t enumerated = 0;
        conv.visit(
            "", [&](const std::string&, Parameter<double>& p) { enumerated += p.numel(); },
            [](const std::string&, std::vector<double>&) {});
        CHECK(conv.param_count() == enumerated);
    }
}

TEST_CASE("conv group divisibility errors") {
    Rng rng(5);
    CHECK_THROWS_AS(Conv2d<double>(6, 6, 3, 1, 1, 4, false, rng), ConfigError);
    Tensor<double> x({1, 4, 1, 1});
    Tensor<double> w({4, 4, 1, 1});
    Tape<double> tape;
    CHECK_THROWS_AS(ops::conv2d(tape, tape.leaf(x, false), tape.leaf(w, false), 1, 0, 3),
                    ConfigError);
    // non-positive output extent: 5x5 kernel on a 3x3 image without padding
    Tensor<double> small({1, 2, 3, 3});
    Tensor<double> big({2, 2, 5, 5});
    Tape<double> t2;
    CHECK_THROWS_AS(ops::conv2d(t2, t2.leaf(small, false), t2.leaf(big, false), 1, 0, 1),
                    DimensionError);
}

TEST_CASE("batchnorm zero input stays zero and train mode standardizes") {
    BatchNorm2d<double> bn(3);
    Tensor<double> zeros({4, 3, 2, 2});
    Tape<double> tape;
    Tensor<double> y = bn.forward(tape, tape.leaf(zeros, false));
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);

    Rng rng(6);
    Tensor<double> x = random_tensor({3, 3, 4, 4}, rng, -2.0, 5.0);
    Tape<double> t2;
    Tensor<double> ys = bn.forward(t2, t2.leaf(x, false));
    const std::int64_t m = 3 * 16;
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t n = 0; n < 3; ++n)
            for (std::int64_t p = 0; p < 16; ++p) mean += ys.data()[(n * 3 + c) * 16 + p];
        mean /= m;
        for (std::int64_t n = 0; n < 3; ++n)
            for (std::int64_t p = 0; p < 16; ++p) {
                const double d = ys.data()[(n * 3 + c) * 16 + p] - mean;
                var += d * d;
            }
        var /= m;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks it slightly
    }
}

TEST_CASE("batchnorm two-sample hand computation") {
    BatchNorm2d<double> bn(1);  // eps 1e-5
    Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
    Tape<double> tape;
    Tensor<double> y = bn.forward(tape, tape.leaf(x, false));
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y.data()[0] == doctest::Approx(-expect).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx(expect).epsilon(1e-9));
    CHECK(y.data()[0] == doctest::Approx(-0.99999).epsilon(1e-4));
}

TEST_CASE("batchnorm eval mode is a pure idempotent affine map") {
    BatchNorm2d<double> bn(2);
    Rng rng(7);
    // push the running stats away from the identity
    Tensor<double> warm = random_tensor({4, 2, 3, 3}, rng, -1.0, 3.0);
    Tape<double> t0;
    bn.forward(t0, t0.leaf(warm, false));
    bn.set_training(false);
    Tensor<double> x = random_tensor({2, 2, 3, 3}, rng);
    Tape<double> t1, t2;
    Tensor<double> y1 = bn.forward(t1, t1.leaf(x, false));
    Tensor<double> y2 = bn.forward(t2, t2.leaf(x, false));
    CHECK(oracle::max_abs_diff(y1, y2) == 0.0);
    // per-channel affine: y = a*x + b for fitted a, b
    for (std::int64_t c = 0; c < 2; ++c) {
        const double x0 = x.data()[c * 9], y0 = y1.data()[c * 9];
        const double x1 = x.data()[c * 9 + 1], yv = y1.data()[c * 9 + 1];
        const double a = (yv - y0) / (x1 - x0);
        const double b = y0 - a * x0;
        for (std::int64_t p = 0; p < 9; ++p)
            CHECK(y1.data()[c * 9 + p] == doctest::Approx(a * x.data()[c * 9 + p] + b).epsilon(1e-9));
    }
}

TEST_CASE("batchnorm rejects a degenerate train batch") {
    BatchNorm2d<double> bn(3);
    Tensor<double> x({1, 3, 1, 1});
    Tape<double> tape;
    CHECK_THROWS_AS(bn.forward(tape, tape.leaf(x, false)), NumericalError);
}

TEST_CASE("batchnorm running buffers update with the declared momentum") {
    BatchNorm2d<double> bn(1);  // momentum 0.1
    Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
    Tape<double> tape;
    bn.forward(tape, tape.leaf(x, false));
    // batch mean 2, biased var 1, unbiased var 2
    CHECK(bn.running_mean()[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
    CHECK(bn.running_var()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
}

TEST_CASE("relu, pooling and loss basics") {
    Tape<double> tape;
    Tensor<double> x({1, 1, 1, 2}, {-2.0, 3.0});
    Tensor<double> y = ops::relu(tape, tape.leaf(x, false));
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 3.0);

    Tensor<double> c = Tensor<double>::full({1, 2, 4, 4}, 0.75);
    Tensor<double> avg = ops::avgpool(tape, tape.leaf(c, false), 2, 2);
    for (std::int64_t i = 0; i < avg.numel(); ++i) CHECK(avg.data()[i] == doctest::Approx(0.75));

    Tensor<double> p({1, 2}, {1.0, 2.0});
    Tensor<double> t({1, 2}, {1.0, 2.0});
    Tensor<double> zero = ops::mse(tape, tape.leaf(p, false), t);
    CHECK(zero.data()[0] == 0.0);

    Tensor<double> mx({1, 1, 2, 2}, {1.0, 5.0, 3.0, 2.0});
    Tensor<double> mp = ops::maxpool(tape, tape.leaf(mx, false), 2, 2);
    CHECK(mp.data()[0] == 5.0);
}

TEST_CASE("layer adjoints pass the finite-difference registry") {
    const std::vector<std::string> names = {"conv2d_full", "conv2d_grouped_strided",
                                            "conv2d_depthwise", "conv2d_pointwise",
                                            "batchnorm_train", "batchnorm_eval", "maxpool",
                                            "avgpool", "linear"};
    for (const auto& c : standard_gradcheck_cases()) {
        if (std::find(names.begin(), names.end(), c.name) == names.end()) continue;
        for (std::uint64_t s = 0; s < 3; ++s) {
            Rng rng(500 + 31 * s);
            INFO(c.name, " seed ", s);
            CHECK(c.run(rng) < 1e-4);
        }
    }
}

TEST_CASE("frozen model is safe for concurrent eval-mode inference") {
    Rng init(8);
    Sequential<float> net;
    net.add("conv", std::make_unique<Conv2d<float>>(2, 4, 3, 1, 1, 1, false, init));
    net.add("norm", std::make_unique<BatchNorm2d<float>>(4));
    net.add("act", std::make_unique<Relu<float>>());
    // warm the running stats, then freeze
    Rng data(9);
    Tensor<float> warm({4, 2, 6, 6});
    for (std::int64_t i = 0; i < warm.numel(); ++i)
        warm.mutable_data()[i] = static_cast<float>(data.uniform(-1, 1));
    {
        Tape<float> t;
        net.forward(t, t.leaf(warm, false));
    }
    net.set_training(false);
    Tensor<float> x({2, 2, 6, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i)
        x.mutable_data()[i] = static_cast<float>(data.uniform(-1, 1));
    Tape<float> t0;
    Tensor<float> expect = net.forward(t0, t0.leaf(x, false));
    std::vector<double> diffs(4, -1.0);
    std::vector<std::thread> workers;
    for (int w = 0; w < 4; ++w) {
        workers.emplace_back([&, w] {
            Tape<float> t;
            Tensor<float> y = net.forward(t, t.leaf(x, false));
            diffs[static_cast<std::size_t>(w)] = oracle::max_abs_diff(y, expect);
        });
    }
    for (auto& th : workers) th.join();
    for (double d : diffs) CHECK(d == 0.0);
}
