#pragma once

#include <optional>
#include <string>

#include "mgic/jsonutil.hpp"

namespace mgic::cli {

struct Options {
    std::string command;
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> head_width;
};

// Dispatches a command, mapping mgic errors to exit codes
// (0 ok, 1 usage/config, 2 numerical, 3 I/O).
int run(const Options& opts);

// Command entry points on parsed configs, exposed for tests.
int cmd_analyze(const json& config, const std::string& out_dir);
int cmd_approx(const json& config, const std::string& out_dir);
int cmd_reconstruct(const json& config, const std::string& out_dir);
int cmd_classify(const json& config, const std::string& out_dir);
int cmd_gradcheck(const json& config, const std::string& out_dir);
int cmd_ablate(const json& config, const std::string& out_dir);

}  // namespace mgic::cli
