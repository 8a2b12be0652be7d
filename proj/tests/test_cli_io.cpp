#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mgic/checkpoint.hpp"
#include "mgic/cli.hpp"
#include "mgic/csv.hpp"
#include "mgic/check_registry.hpp"
#include "mgic/idx.hpp"

using namespace mgic;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "mgic_cli_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

json tiny_approx_config() {
    return {{"alpha", 0.1},  // width 16
            {"s_g", 4},
            {"s_c", 4},
            {"block", "mgic"},
            {"n_points", 128},
            {"eval_points", 64},
            {"epochs", 2},
            {"batch_size", 32},
            {"lr", 1e-3},
            {"seed", 5}};
}

}  // namespace

TEST_CASE("analyze block report") {
    const std::string dir = temp_dir("analyze");
    json config = {{"block",
                    {{"c", 64}, {"s_g", 8}, {"s_c", 8}, {"template", {{"kind", "simple"}, {"d", 3}}}}},
                   {"input", {{"batch", 1}, {"height", 7}, {"width", 7}}},
                   {"sweep_widths", {128, 256, 512}}};
    CHECK(cli::cmd_analyze(config, dir) == 0);
    json report = json::parse(read_file(dir + "/cost.json"));
    CHECK(report.at("params_conv") == 9536);
    CHECK(report.at("closed_form_params") == 9536);
    CHECK(report.at("baseline_params") == 36864);
    CHECK(report.at("param_ratio").get<double>() == doctest::Approx(0.2587).epsilon(1e-3));
    const auto& sweep = report.at("sweep");
    for (std::size_t i = 0; i + 1 < sweep.size(); ++i) {
        const double mgic_ratio =
            sweep[i + 1].at("closed_form_params").get<double>() /
            sweep[i].at("closed_form_params").get<double>();
        const double base_ratio = sweep[i + 1].at("baseline_params").get<double>() /
                                  sweep[i].at("baseline_params").get<double>();
        CHECK(mgic_ratio <= 2.05);
        CHECK(base_ratio == 4.0);
    }
}

TEST_CASE("analyze degenerate block equals the baseline") {
    const std::string dir = temp_dir("analyze_degenerate");
    json config = {{"block",
                    {{"c", 64}, {"s_g", 64}, {"s_c", 64}, {"template", {{"kind", "simple"}, {"d", 3}}}}}};
    CHECK(cli::cmd_analyze(config, dir) == 0);
    json report = json::parse(read_file(dir + "/cost.json"));
    CHECK(report.at("params_conv") == report.at("baseline_params"));
}

TEST_CASE("config schema rejects unknown keys with a pointer path") {
    const std::string dir = temp_dir("schema");
    json config = tiny_approx_config();
    config["bogus"] = 1;
    try {
        cli::cmd_approx(config, dir);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("/bogus") != std::string::npos);
    }
    json nested = {{"block", {{"c", 16}, {"s_g", 4}, {"s_c", 4}, {"oops", true}}}};
    try {
        cli::cmd_analyze(nested, dir);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("/block/oops") != std::string::npos);
    }
    json wrong_type = tiny_approx_config();
    wrong_type["epochs"] = "ten";
    CHECK_THROWS_AS(cli::cmd_approx(wrong_type, dir), ConfigError);
}

TEST_CASE("approx smoke run emits history, result and checkpoint") {
    const std::string dir = temp_dir("approx");
    CHECK(cli::cmd_approx(tiny_approx_config(), dir) == 0);
    json result = json::parse(read_file(dir + "/result.json"));
    CHECK(result.at("width") == 16);
    CHECK(result.at("params").get<std::int64_t>() > 0);
    CHECK(result.at("final_eval_mse").get<double>() > 0.0);
    const std::string csv = read_file(dir + "/history.csv");
    CHECK(csv.rfind("epoch,train_mse,eval_mse\n", 0) == 0);
    CHECK(csv.find("#git-describe=") != std::string::npos);
    CHECK(csv.find("head-width=2") != std::string::npos);
    CHECK(fs::exists(dir + "/model.ckpt"));
}

TEST_CASE("checkpoint round trip is bit exact") {
    const std::string dir = temp_dir("checkpoint");
    REQUIRE(cli::cmd_approx(tiny_approx_config(), dir) == 0);
    const std::string first = dir + "/model.ckpt";
    Model<float> loaded = load_checkpoint(first);
    const std::string second = dir + "/model2.ckpt";
    save_checkpoint(loaded, second);
    CHECK(read_file(first) == read_file(second));

    SUBCASE("flipped payload byte fails the checksum") {
        std::string bytes = read_file(first);
        bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
        const std::string bad = dir + "/corrupt.ckpt";
        std::ofstream f(bad, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.close();
        try {
            load_checkpoint(bad);
            FAIL("expected an io error");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("checksum") != std::string::npos);
        }
    }
    SUBCASE("truncated file is rejected") {
        std::string bytes = read_file(first);
        bytes.resize(bytes.size() / 2);
        const std::string bad = dir + "/truncated.ckpt";
        std::ofstream f(bad, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.close();
        CHECK_THROWS_AS(load_checkpoint(bad), IoError);
    }
    SUBCASE("analyze runs directly from a checkpoint, no dataset needed") {
        const std::string adir = temp_dir("checkpoint_analyze");
        json config = {{"checkpoint", first}};
        CHECK(cli::cmd_analyze(config, adir) == 0);
        json report = json::parse(read_file(adir + "/cost.json"));
        json result = json::parse(read_file(dir + "/result.json"));
        CHECK(report.at("params_total") == result.at("params"));
    }
}

TEST_CASE("reconstruct reruns produce identical csv bytes") {
    json config = {{"channels", 16}, {"s_c", 4},    {"s_g_list", {2, 4}}, {"n", 8},
                   {"height", 6},    {"width", 6},  {"rank", 4},          {"epochs", 3},
                   {"batch_size", 4}, {"lr", 0.01}, {"seed", 3}};
    const std::string d1 = temp_dir("recon1");
    const std::string d2 = temp_dir("recon2");
    CHECK(cli::cmd_reconstruct(config, d1) == 0);
    CHECK(cli::cmd_reconstruct(config, d2) == 0);
    const std::string a = read_file(d1 + "/reconstruct.csv");
    CHECK(a == read_file(d2 + "/reconstruct.csv"));
    CHECK(a.rfind("s_g,param_count,final_mse\n", 0) == 0);
    // trailing metadata comment is the last line
    const auto pos = a.rfind('\n', a.size() - 2);
    CHECK(a.substr(pos + 1, 1) == "#");
}

TEST_CASE("gradcheck command reports per-case results and catches bad adjoints") {
    auto cases = standard_gradcheck_cases();
    // fixture: an op whose recorded adjoint is deliberately wrong
    cases.push_back({"corrupted_adjoint_fixture", [](Rng& rng) {
        Tensor<double> x0 = checkdetail::random_tensor({2, 2}, rng);
        ScalarMap<double> f = [](const Tensor<double>& pt, std::vector<double>* grad) {
            double s = 0;
            for (std::int64_t i = 0; i < pt.numel(); ++i) s += pt.data()[i] * pt.data()[i];
            if (grad) grad->assign(static_cast<std::size_t>(pt.numel()), 1.0);  // wrong on purpose
            return s;
        };
        return finite_difference_check(f, x0, 1e-5);
    }});
    auto results = run_gradcheck_cases(cases, 7, 1e-4, 1);
    bool found = false;
    for (const auto& r : results) {
        if (r.name == "corrupted_adjoint_fixture") {
            found = true;
            CHECK(!r.passed);
        }
    }
    CHECK(found);
}

TEST_CASE("ablate grid records per-cell errors and continues") {
    const std::string dir = temp_dir("ablate");
    json base = tiny_approx_config();
    base.erase("s_g");
    base.erase("s_c");
    base["epochs"] = 1;
    base["n_points"] = 64;
    base["eval_points"] = 32;
    base["save_checkpoint"] = false;
    // s_g = 8 with s_c = 4 violates s_c >= s_g and must fail that cell only
    json config = {{"mode", "approx"}, {"s_g", {4, 8}}, {"s_c", {4}}, {"base", base}, {"seed", 2}};
    CHECK(cli::cmd_ablate(config, dir) == 0);
    const std::string csv = read_file(dir + "/ablate.csv");
    CHECK(csv.rfind("s_g,s_c,params,macs,metric,error\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n' ? 1 : 0;
    CHECK(lines == 4);  // header + 2 cells + metadata
    CHECK(csv.find("\n4,4,") != std::string::npos);
    const auto bad_row = csv.find("\n8,4,");
    REQUIRE(bad_row != std::string::npos);
    CHECK(csv.find("s_c", bad_row) != std::string::npos);  // error text mentions the constraint
}

TEST_CASE("cli dispatch maps error categories to exit codes") {
    cli::Options missing;
    missing.command = "analyze";
    missing.config_path = "/nonexistent/config.json";
    CHECK(cli::run(missing) == 3);

    cli::Options unknown;
    unknown.command = "frobnicate";
    CHECK(cli::run(unknown) == 1);

    const std::string dir = temp_dir("dispatch");
    const std::string cfg_path = dir + "/bad.json";
    std::ofstream f(cfg_path);
    f << "{\"alpha\": 0.1, \"wrong\": 1}";
    f.close();
    cli::Options bad;
    bad.command = "approx";
    bad.config_path = cfg_path;
    bad.out_dir = dir;
    CHECK(cli::run(bad) == 1);
}

TEST_CASE("classify rejects out-of-range labels") {
    const std::string dir = temp_dir("classify_labels");
    save_idx_labels(dir + "/labels.idx", {0, 1, 12});
    {
        IdxContent imgs;
        imgs.dims = {3, 8, 8};
        imgs.bytes.assign(3 * 64, 100);
        save_idx_raw(dir + "/images.idx", imgs);
    }
    json config = {{"train_images", dir + "/images.idx"},
                   {"train_labels", dir + "/labels.idx"},
                   {"test_images", dir + "/images.idx"},
                   {"test_labels", dir + "/labels.idx"},
                   {"epochs", 1}};
    CHECK_THROWS_AS(cli::cmd_classify(config, dir), ConfigError);
}
