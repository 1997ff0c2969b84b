#pragma once

#include <iosfwd>

namespace fieldrecon {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumerical = 3,
};

/// Entry point of the `fieldrecon` tool. Commands: gen-data, train-score,
/// train-surrogate, sample, reconstruct, sweep, render. Results go to `out`,
/// progress and errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fieldrecon
