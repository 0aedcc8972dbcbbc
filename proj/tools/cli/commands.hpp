#ifndef FINESTRAT_CLI_COMMANDS_HPP
#define FINESTRAT_CLI_COMMANDS_HPP

#include <cstdint>
#include <optional>
#include <string>

namespace finestrat::cli {

struct CommandOptions {
    std::string spec;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> replicates;
    std::optional<int> threads;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitSpec = 2;
inline constexpr int kExitExhausted = 3;

int cmd_assign(const CommandOptions& opts);
int cmd_estimate(const CommandOptions& opts);
int cmd_simulate(const CommandOptions& opts);
int cmd_calibrate(const CommandOptions& opts);

}  // namespace finestrat::cli

#endif  // FINESTRAT_CLI_COMMANDS_HPP
