#pragma once

#include <string>
#include <vector>

namespace evasim::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,       // unexpected error
  kUsage = 2,         // unknown flag, missing argument
  kConfig = 3,        // invalid configuration
  kInput = 4,         // missing or malformed input file
  kNumerical = 5,     // training diverged
  kUnreachable = 6,   // generation target not reachable
};

// Runs one subcommand. `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace evasim::cli
