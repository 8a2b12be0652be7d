#include <CLI11.hpp>

#include "mgic/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"multigrid-in-channels network toolkit"};
    app.require_subcommand(1);

    mgic::cli::Options opts;
    std::uint64_t seed = 0;
    std::int64_t head_width = 0;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"analyze", "parameter/FLOP/memory accounting for a block or network"},
        {"approx", "implicit function regression experiment"},
        {"reconstruct", "transfer-operator channel autoencoder sweep"},
        {"classify", "small image classification on IDX data"},
        {"gradcheck", "finite-difference check of every primitive"},
        {"ablate", "grid sweep over (s_g, s_c)"}};

    for (const auto& [name, desc] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", opts.config_path, "JSON config file")
            ->check(CLI::ExistingFile)
            ->required(name != "gradcheck");
        sub->add_option("--out", opts.out_dir, "output directory");
        CLI::Option* s = sub->add_option("--seed", seed, "override the config seed");
        CLI::Option* hw = sub->add_option("--head-width", head_width, "regression head width");
        sub->callback([&, name, s, hw] {
            opts.command = name;
            if (s->count()) opts.seed = seed;
            if (hw->count()) opts.head_width = head_width;
        });
    }

    CLI11_PARSE(app, argc, argv);
    return mgic::cli::run(opts);
}
