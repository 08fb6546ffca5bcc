#include <iostream>

#include <CLI11.hpp>

#include "s2dit/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"s2dit: sandwich diffusion-transformer kernels and streaming inference"};
    app.require_subcommand(1);

    std::string config_path;
    s2dit::cli::Overrides ov;
    uint64_t seed = 0;
    std::string dtype, out;
    size_t chunks = 0, window = 0, steps = 0;
    bool oracle = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", seed, "rng seed")->each([&](const std::string&) { ov.seed = seed; });
        sub->add_option("--dtype", dtype, "f32 or f64")->each([&](const std::string&) {
            ov.dtype = dtype;
        });
        sub->add_option("--out", out, "output directory")->each([&](const std::string&) {
            ov.out = out;
        });
    };

    CLI::App* search = app.add_subcommand("search", "budget allocation + routing search");
    add_common(search);
    CLI::App* bench = app.add_subcommand("bench", "per-block wall times and latency projection");
    add_common(bench);
    CLI::App* stream = app.add_subcommand("stream-sim", "chunked autoregressive generation");
    add_common(stream);
    stream->add_option("--chunks", chunks)->each([&](const std::string&) { ov.chunks = chunks; });
    stream->add_option("--window", window)->each([&](const std::string&) { ov.window = window; });
    stream->add_option("--steps", steps)->each([&](const std::string&) { ov.steps = steps; });
    stream->add_flag("--oracle", oracle, "also run the stateless reference and report deviation")
        ->each([&](const std::string&) { ov.oracle = oracle; });
    CLI::App* distill = app.add_subcommand("distill", "train a student on a KD cache");
    add_common(distill);
    distill->add_option("--steps", steps)->each([&](const std::string&) { ov.steps = steps; });
    CLI::App* gradcheck = app.add_subcommand("grad-check", "finite-difference the op catalog");
    add_common(gradcheck);
    gradcheck->add_flag("--negative-control", ov.negative_control,
                        "include a corrupted-vjp fixture that must fail");
    CLI::App* dump = app.add_subcommand("attn-dump", "dump implicit linear-attention maps");
    add_common(dump);
    CLI::App* cache = app.add_subcommand("cache-build", "precompute a KD tuple cache");
    add_common(cache);

    CLI11_PARSE(app, argc, argv);

    const std::string cmd = app.get_subcommands().front()->get_name();
    return s2dit::cli::run_command(cmd, config_path, ov, std::cout);
}
