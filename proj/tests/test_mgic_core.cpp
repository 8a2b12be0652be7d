#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "mgic/check_registry.hpp"
#include "mgic/cost.hpp"
#include "mgic/coupling.hpp"
#include "support/oracles.hpp"

using namespace mgic;
using checkdetail::random_tensor;

TEST_CASE("num_levels") {
    CHECK(num_levels(16, 4) == 2);
    CHECK(num_levels(64, 64) == 0);
    CHECK(num_levels(48, 8) == 2);  // coarsest width 12 in [8, 16)
    CHECK(num_levels(64, 8) == 3);
    CHECK_THROWS_AS(num_levels(4, 8), ConfigError);
}

TEST_CASE("effective_group_size") {
    CHECK(effective_group_size(64, {120, 40}) == 40);
    CHECK(effective_group_size(8, {64}) == 8);
    CHECK(effective_group_size(16, {24}) == 12);
    CHECK(effective_group_size(5, {7}) == 1);
}

TEST_CASE("transfer initialization is strictly positive with unit row sums") {
    Rng rng(1);
    TransferPair<double> pair(16, 4, 0, rng);
    auto check_rows = [](Conv2d<double>& conv, std::int64_t fan_in) {
        const double* w = conv.weight().value.data();
        const std::int64_t rows = conv.weight().value.numel() / fan_in;
        for (std::int64_t r = 0; r < rows; ++r) {
            double sum = 0;
            for (std::int64_t i = 0; i < fan_in; ++i) {
                CHECK(w[r * fan_in + i] > 0.0);
                sum += w[r * fan_in + i];
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    };
    check_rows(pair.restriction(), 4);
    check_rows(pair.prolongation(), 2);
}

TEST_CASE("row-stochastic transfers preserve channel-constant inputs") {
    Rng rng(2);
    TransferPair<double> pair(8, 4, 0, rng);
    Tensor<double> x = Tensor<double>::full({1, 8, 2, 2}, 2.5);
    Tape<double> tape;
    Tensor<double> down = pair.restrict_fwd(tape, tape.leaf(x, false));
    for (std::int64_t i = 0; i < down.numel(); ++i)
        CHECK(down.data()[i] == doctest::Approx(2.5).epsilon(1e-9));
    Tensor<double> up = pair.prolong_fwd(tape, down);
    for (std::int64_t i = 0; i < up.numel(); ++i)
        CHECK(up.data()[i] == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("descent chain of a fresh block preserves channel constants") {
    Rng rng(3);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    Tensor<double> x = Tensor<double>::full({1, 16, 2, 2}, -1.75);
    Tape<double> tape;
    Tensor<double> cur = tape.leaf(x, false);
    for (std::int64_t j = 0; j < block.n_levels(); ++j)
        cur = block.transfer(j).restrict_fwd(tape, cur);
    CHECK(cur.dim(1) == 4);
    for (std::int64_t i = 0; i < cur.numel(); ++i)
        CHECK(cur.data()[i] == doctest::Approx(-1.75).epsilon(1e-9));
}

TEST_CASE("odd group sizes cannot be halved") {
    Rng rng(4);
    CHECK_THROWS_AS(TransferPair<double>(9, 3, 0, rng), ConfigError);
    // clamping lands on an odd divisor -> configuration error
    CHECK_THROWS_AS(MgicBlock<double>(18, MgicConfig(3, 3, BlockTemplate::simple_conv(3)), rng),
                    ConfigError);
}

TEST_CASE("block structure for the 16-channel three-grid example") {
    Rng rng(5);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    CHECK(block.n_levels() == 2);
    CHECK(block.coarse_width() == 4);
    CHECK(block.transfer(0).width() == 16);
    CHECK(block.transfer(1).width() == 8);
    // degenerate hierarchy: bare template
    MgicBlock<double> flat(8, MgicConfig(8, 8, BlockTemplate::simple_conv(3)), rng);
    CHECK(flat.n_levels() == 0);
    Rng data(6);
    Tensor<double> x = random_tensor({2, 8, 4, 4}, data);
    Tape<double> t1, t2;
    Tensor<double> via_block = flat.forward(t1, t1.leaf(x, false));
    Tensor<double> via_template = flat.coarse_block().forward(t2, t2.leaf(x, false));
    CHECK(oracle::max_abs_diff(via_block, via_template) == 0.0);
}

TEST_CASE("enumerated parameters match the worked 9536 example") {
    Rng rng(7);
    MgicBlock<double> block(64, MgicConfig(8, 8, BlockTemplate::simple_conv(3)), rng);
    CHECK(count_non_norm_params(block) == 9536);
    CHECK(count_params(block) > 9536);  // norm scale/shift on top
}

TEST_CASE("divisibility failure names the offending level") {
    Rng rng(8);
    // width 16, s_g 4 -> groups 4; hidden width 2 is not divisible into 4 groups
    try {
        MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::bottleneck(0.125, 1)), rng);
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("level 0") != std::string::npos);
    }
}

TEST_CASE("identity-configured block is the identity map") {
    Rng rng(9);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::bottleneck(0.25, 3)), rng);
    block.configure_identity();
    Rng data(10);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor<double> x = random_tensor({2, 16, 5, 5}, data);
        block.set_training(true);
        Tape<double> t1;
        CHECK(oracle::max_abs_diff(block.forward(t1, t1.leaf(x, false)), x) < 1e-6);
        block.set_training(false);
        Tape<double> t2;
        CHECK(oracle::max_abs_diff(block.forward(t2, t2.leaf(x, false)), x) < 1e-6);
    }
}

TEST_CASE("two-level forward matches the literal transcription") {
    Rng data(11);
    for (int trial = 0; trial < 4; ++trial) {
        Rng rng(100 + static_cast<std::uint64_t>(trial));
        const std::int64_t c = trial % 2 == 0 ? 8 : 12;
        const std::int64_t s_c = c / 2;
        BlockTemplate tpl = trial < 2 ? BlockTemplate::simple_conv(3)
                                      : BlockTemplate::bottleneck(2.0, 1);
        MgicBlock<double> block(c, MgicConfig(4, s_c, tpl), rng);
        REQUIRE(block.n_levels() == 1);
        Tensor<double> x = random_tensor({2, c, 3, 3}, data);

        block.set_training(false);
        Tape<double> tape;
        Tensor<double> via_forward = block.forward(tape, tape.leaf(x, false));
        Tensor<double> via_eqs = oracle::two_level_transcription(block, x);
        CHECK(oracle::max_abs_diff(via_forward, via_eqs) < 1e-6);

        // train mode: both paths start from identical normalization buffers
        block.set_training(true);
        auto saved = oracle::snapshot_buffers<double>(block);
        Tape<double> t1;
        Tensor<double> train_fwd = block.forward(t1, t1.leaf(x, false));
        oracle::restore_buffers<double>(block, saved);
        Tensor<double> train_eqs = oracle::two_level_transcription(block, x);
        CHECK(oracle::max_abs_diff(train_fwd, train_eqs) < 1e-6);
    }
}

TEST_CASE("forward preserves the input shape and rejects mismatches") {
    Rng rng(12);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    Rng data(13);
    Tensor<double> x = random_tensor({3, 16, 4, 5}, data);
    Tape<double> tape;
    Tensor<double> y = block.forward(tape, tape.leaf(x, false));
    CHECK(y.shape() == x.shape());
    Tensor<double> bad = random_tensor({1, 8, 4, 4}, data);
    Tape<double> t2;
    CHECK_THROWS_AS(block.forward(t2, t2.leaf(bad, false)), DimensionError);
}

TEST_CASE("channel shortcut") {
    Rng rng(14);
    SUBCASE("identity-center kernels pass the input through") {
        ChannelShortcut<double> sc(4, 4, 1, rng);
        // groups = gcd(4,4) = 4, so each kernel is [1,3,3]; put 1 at the center
        auto& w = sc.conv().weight().value;
        std::fill(w.mutable_vec().begin(), w.mutable_vec().end(), 0.0);
        for (std::int64_t o = 0; o < 4; ++o) w.mutable_data()[o * 9 + 4] = 1.0;
        Rng data(15);
        Tensor<double> x = random_tensor({2, 4, 4, 4}, data);
        Tape<double> tape;
        CHECK(oracle::max_abs_diff(sc.forward(tape, tape.leaf(x, false)), x) == 0.0);
    }
    SUBCASE("stride-2 width change") {
        ChannelShortcut<double> sc(16, 32, 2, rng);
        Rng data(16);
        Tensor<double> x = random_tensor({2, 16, 8, 8}, data);
        Tape<double> tape;
        Tensor<double> y = sc.forward(tape, tape.leaf(x, false));
        CHECK(y.shape() == std::vector<std::int64_t>{2, 32, 4, 4});
        CHECK(count_params(sc) == 288);  // 32 * 1 * 9, groups = gcd = 16
    }
    SUBCASE("stride validation") {
        CHECK_THROWS_AS(ChannelShortcut<double>(8, 8, 3, rng), ConfigError);
    }
}

TEST_CASE("bottleneck block") {
    Rng rng(17);
    SUBCASE("zeroed residual branch is the identity") {
        BottleneckBlock<double> block(8, 8, 0.5, 3, rng);
        block.zero_residual();
        Rng data(18);
        Tensor<double> x = random_tensor({2, 8, 4, 4}, data);
        Tape<double> tape;
        CHECK(oracle::max_abs_diff(block.forward(tape, tape.leaf(x, false)), x) == 0.0);
    }
    SUBCASE("fully coupled instance matches a step-by-step transcription") {
        BottleneckBlock<double> block(8, 8, 0.5, 3, rng);
        block.set_training(false);
        Rng data(19);
        Tensor<double> x = random_tensor({2, 8, 3, 3}, data);
        Tape<double> t1;
        Tensor<double> via_forward = block.forward(t1, t1.leaf(x, false));
        Tape<double> t2;
        Tensor<double> cur = t2.leaf(x, false);
        Tensor<double> t = ops::relu(t2, block.norm1().forward(t2, cur));
        t = block.k1().forward(t2, t);
        t = ops::relu(t2, block.norm2().forward(t2, t));
        t = block.k2().forward(t2, t);
        t = ops::relu(t2, block.norm3().forward(t2, t));
        t = block.k3().forward(t2, t);
        Tensor<double> via_steps = ops::add(t2, cur, t);
        CHECK(oracle::max_abs_diff(via_forward, via_steps) < 1e-6);
    }
    SUBCASE("grouped instance has a block-diagonal channel Jacobian") {
        BottleneckBlock<double> block(8, 4, 2.0, 1, rng);
        block.set_training(false);
        Rng probe_rng(20);
        auto sens = channel_sensitivity(block, 8, 4, 1e-4, probe_rng);
        for (std::int64_t i = 0; i < 8; ++i)
            for (std::int64_t o = 0; o < 8; ++o) {
                if (i / 4 != o / 4) CHECK(sens[static_cast<std::size_t>(i * 8 + o)] == 0.0);
            }
        for (std::int64_t c = 0; c < 8; ++c)
            CHECK(sens[static_cast<std::size_t>(c * 8 + c)] > 1e-12);  // residual identity path
    }
}

TEST_CASE("sequence template maps width to width") {
    Rng rng(21);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::sequence({3, 1})), rng);
    Rng data(22);
    Tensor<double> x = random_tensor({1, 16, 3, 3}, data);
    Tape<double> tape;
    CHECK(block.forward(tape, tape.leaf(x, false)).shape() == x.shape());
}

TEST_CASE("full coupling at small scale versus a grouped-only control") {
    Rng init(23);
    MgicBlock<double> block(8, MgicConfig(4, 4, BlockTemplate::bottleneck(2.0, 1)), init);
    Rng probe(24);
    auto sens = channel_sensitivity(block, 8, 8, 1e-4, probe);
    std::int64_t positive = 0;
    for (double v : sens) positive += v > 1e-12 ? 1 : 0;
    CHECK(positive == 64);  // every input reaches every output

    Rng init2(25);
    BottleneckBlock<double> control(8, 4, 2.0, 1, init2);
    Rng probe2(26);
    auto sens2 = channel_sensitivity(control, 8, 8, 1e-4, probe2);
    std::int64_t nonzero = 0;
    for (double v : sens2) nonzero += v > 0.0 ? 1 : 0;
    CHECK(nonzero == 2 * 4 * 4);  // two diagonal blocks
}

TEST_CASE("parameter growth is linear in width") {
    Rng rng(27);
    std::vector<std::int64_t> widths = {64, 128, 256, 512};
    std::vector<std::int64_t> params;
    for (std::int64_t c : widths) {
        MgicBlock<double> block(c, MgicConfig(8, 8, BlockTemplate::simple_conv(3)), rng);
        params.push_back(count_non_norm_params(block));
    }
    // doubling the width adds one level: exactly 2p(c) + 2*s_c*s_g*(d^2+1) - s_c^2*d^2
    const std::int64_t extra = 2 * 8 * 8 * 10 - 8 * 8 * 9;
    for (std::size_t i = 0; i + 1 < params.size(); ++i) {
        CHECK(params[i + 1] == 2 * params[i] + extra);
    }
    // and the doubling ratio approaches 2 from above
    for (std::size_t i = 1; i + 1 < params.size(); ++i) {
        CHECK(static_cast<double>(params[i + 1]) / static_cast<double>(params[i]) <= 2.05);
    }
}

TEST_CASE("mgic gradient correctness") {
    for (const auto& c : standard_gradcheck_cases()) {
        if (c.name != "mgic_block") continue;
        Rng rng(4242);
        CHECK(c.run(rng) < 1e-4);
    }
}

TEST_CASE("identity configuration requires a residual template") {
    Rng rng(28);
    MgicBlock<double> block(8, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    CHECK_THROWS_AS(block.configure_identity(), ConfigError);
}

TEST_CASE("parameter names are unique slash-joined paths") {
    Rng rng(29);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    auto params = collect_params(block, "block");
    std::set<std::string> names;
    for (auto* p : params) {
        CHECK(!p->name.empty());
        CHECK(names.insert(p->name).second);
    }
    CHECK(names.count("block/level0/R/weight") == 1);
    CHECK(names.count("block/level1/relax/conv/weight") == 1);
    CHECK(names.count("block/coarse/norm/gamma") == 1);
}
