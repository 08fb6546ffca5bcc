#pragma once

#include <optional>
#include <ostream>
#include <string>

namespace s2dit {
namespace cli {

// Exit codes, stable across commands.
constexpr int kOk = 0;
constexpr int kError = 1;        // unclassified runtime failure
constexpr int kConfigError = 2;  // bad config / usage / missing inputs
constexpr int kInfeasible = 3;   // budget infeasibility from the allocator
constexpr int kNumeric = 4;      // non-finite values or degenerate numerics

/// Flag overrides; flags win over config-file values.
struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> dtype;
    std::optional<std::string> out;
    std::optional<size_t> chunks;
    std::optional<size_t> window;
    std::optional<size_t> steps;
    std::optional<bool> oracle;
    bool negative_control = false;
};

/// Dispatch a subcommand (search, bench, stream-sim, distill, grad-check,
/// attn-dump, cache-build) with a JSON config file. Returns an exit code.
int run_command(const std::string& command, const std::string& config_path, const Overrides& ov,
                std::ostream& log);

}  // namespace cli
}  // namespace s2dit
