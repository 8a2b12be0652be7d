#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mgic/blocks.hpp"
#include "mgic/check_registry.hpp"
#include "mgic/cost.hpp"

using namespace mgic;

TEST_CASE("count_params on single layers and empty networks") {
    Rng rng(1);
    Conv2d<double> full(64, 64, 3, 1, 1, 1, false, rng);
    CHECK(count_params(full) == 36864);
    Sequential<double> empty;
    CHECK(count_params(empty) == 0);
}

TEST_CASE("closed form worked example and bound") {
    CHECK(closed_form_mgic_params(64, 8, 8, 3) == 9536);
    CHECK(closed_form_mgic_params(64, 8, 8, 3) == 5120 + 2560 + 1280 + 576);
    CHECK(closed_form_mgic_params(64, 8, 8, 3) < 2 * (8 * 64 * 10) + 576);
    // degenerate hierarchy: coarsest-only term
    CHECK(closed_form_mgic_params(8, 8, 8, 3) == 8 * 8 * 9);
    // level-0 relaxation term alone: s_g * c * d^2
    CHECK(8 * 64 * 9 == 4608);
    CHECK_THROWS_AS(closed_form_mgic_params(24, 16, 8, 3), ConfigError);
}

TEST_CASE("closed form equals enumeration over a random sweep") {
    Rng rng(2);
    int done = 0;
    while (done < 8) {
        const std::int64_t c = 1 << rng.uniform_int(4, 8);
        const std::int64_t s_g = 1 << rng.uniform_int(2, 4);
        const std::int64_t s_c = s_g * (rng.uniform_int(0, 1) + 1);
        const std::int64_t d = 2 * rng.uniform_int(0, 2) + 1;
        if (c < s_c) continue;
        MgicBlock<double> block(c, MgicConfig(s_g, s_c, BlockTemplate::simple_conv(d)), rng);
        INFO("c=", c, " s_g=", s_g, " s_c=", s_c, " d=", d);
        CHECK(closed_form_mgic_params(c, s_g, s_c, d) == count_non_norm_params(block));
        CHECK(closed_form_mgic_params(c, s_g, s_c, d) <
              2 * (s_g * c * (d * d + 1)) + s_c * s_c * d * d);
        ++done;
    }
}

TEST_CASE("linear width scaling against the quadratic baseline") {
    for (std::int64_t c : {128, 256, 512}) {
        const double ratio = static_cast<double>(closed_form_mgic_params(2 * c, 8, 8, 3)) /
                             static_cast<double>(closed_form_mgic_params(c, 8, 8, 3));
        CHECK(ratio <= 2.05);
        const double base = static_cast<double>(fully_coupled_params(2 * c, 3)) /
                            static_cast<double>(fully_coupled_params(c, 3));
        CHECK(base == 4.0);
    }
}

TEST_CASE("mac counting worked examples") {
    NetDesc conv;
    conv.kind = "conv";
    conv.attr = {{"c_in", 64}, {"c_out", 64}, {"k", 1}, {"stride", 1},
                 {"pad", 0},   {"groups", 1},  {"bias", 0}};
    CostReport r = analyze_cost(conv, {1, 64, 7, 7});
    CHECK(r.macs == 200704);
    CHECK(r.flops == 2 * r.macs);

    NetDesc dw;
    dw.kind = "conv";
    dw.attr = {{"c_in", 16}, {"c_out", 16}, {"k", 3}, {"stride", 1},
               {"pad", 1},   {"groups", 16}, {"bias", 0}};
    CHECK(analyze_cost(dw, {1, 16, 8, 8}).macs == 9216);

    // doubling the groups halves convolution macs
    NetDesc g2 = dw;
    g2.attr["groups"] = 8;
    g2.attr["c_in"] = 16;
    CHECK(analyze_cost(g2, {1, 16, 8, 8}).macs == 2 * analyze_cost(dw, {1, 16, 8, 8}).macs);
}

TEST_CASE("cost walker params equal the enumerated parameter count") {
    Rng rng(3);
    MgicBlock<double> block(32, MgicConfig(4, 8, BlockTemplate::bottleneck(2.0, 3)), rng);
    CostReport r = analyze_cost(block.describe(), {2, 32, 6, 6});
    CHECK(r.params == count_params(block));

    Sequential<double> net;
    net.add("stem", std::make_unique<Conv2d<double>>(1, 16, 3, 1, 1, 1, false, rng));
    net.add("norm", std::make_unique<BatchNorm2d<double>>(16));
    net.add("act", std::make_unique<Relu<double>>());
    net.add("block", std::make_unique<MgicBlock<double>>(
                         16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng));
    net.add("gap", std::make_unique<GlobalAvgPool<double>>());
    net.add("head", std::make_unique<Linear<double>>(16, 10, true, rng));
    CostReport rn = analyze_cost(net.describe(), {2, 1, 12, 12});
    CHECK(rn.params == count_params(net));
    CHECK(rn.flops == 2 * rn.macs);
}

TEST_CASE("activation accounting") {
    CHECK(hierarchy_activation_ratio(16, 4) == doctest::Approx(1.75));
    for (std::int64_t c : {16, 64, 256}) {
        for (std::int64_t s_c : {4, 8}) {
            CHECK(hierarchy_activation_ratio(c, s_c) < 2.0);
        }
    }
    Rng rng(4);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    CostReport r = analyze_cost(block.describe(), {1, 16, 5, 5});
    CHECK(r.infer_activation <= r.train_activation);
    CHECK(r.train_activation > 0);
}

TEST_CASE("report serialization keys") {
    Rng rng(5);
    MgicBlock<double> block(16, MgicConfig(4, 4, BlockTemplate::simple_conv(3)), rng);
    nlohmann::json j = analyze_cost(block.describe(), {1, 16, 5, 5}).to_json();
    for (const char* key :
         {"params", "macs", "flops", "train_activation", "infer_activation", "per_layer"}) {
        CHECK(j.contains(key));
    }
    CHECK(j.at("per_layer").is_array());
    CHECK(!j.at("per_layer").empty());
    CHECK(j.at("per_layer").at(0).contains("name"));
    CHECK(j.at("per_layer").at(0).contains("macs"));
}

TEST_CASE("degenerate grid point equals the fully coupled baseline") {
    Rng rng(6);
    MgicBlock<double> block(64, MgicConfig(64, 64, BlockTemplate::simple_conv(3)), rng);
    CHECK(block.n_levels() == 0);
    CHECK(count_non_norm_params(block) == fully_coupled_params(64, 3));
}

TEST_CASE("ablation monotonicity of the closed form") {
    // growing s_g at fixed s_c
    std::int64_t prev = 0;
    for (std::int64_t s_g : {4, 8, 16}) {
        const std::int64_t p = closed_form_mgic_params(128, s_g, 16, 3);
        CHECK(p > prev);
        prev = p;
    }
    // growing s_c at fixed s_g
    prev = 0;
    for (std::int64_t s_c : {8, 16, 32}) {
        const std::int64_t p = closed_form_mgic_params(128, 8, s_c, 3);
        CHECK(p > prev);
        prev = p;
    }
}
