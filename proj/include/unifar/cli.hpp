#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace unifar::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Keys accepted in a --config file.
const std::vector<std::string>& config_keys();

}  // namespace unifar::cli
