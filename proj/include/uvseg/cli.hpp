#pragma once

#include <exception>
#include <iostream>
#include <string>
#include <vector>

namespace uvs::cli {

/// Exit codes: 0 success, 1 unexpected failure, 2 config or validation,
/// 3 numerical failure, 4 artifact mismatch.
inline constexpr int exit_ok = 0;
inline constexpr int exit_failure = 1;
inline constexpr int exit_config = 2;
inline constexpr int exit_numerical = 3;
inline constexpr int exit_artifact = 4;

int exit_code(const std::exception& e);

/// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

} // namespace uvs::cli
