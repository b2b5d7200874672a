#pragma once

#include <string>
#include <vector>

namespace sbfa {

inline constexpr int kExitUsage = 64;
inline constexpr int kExitIo = 65;

/// Entry point of the `sbfa` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace sbfa
