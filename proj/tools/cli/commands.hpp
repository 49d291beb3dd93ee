#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mfldiv::cli {

enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,           // unknown flag, missing argument
  kInvalidConfig = 3,   // unparsable config or rejected values
  kMissingFile = 4,     // an input path does not exist
  kInvalidInput = 5,    // a dataset, MDP or checkpoint is malformed
  kNumerical = 6,       // divergence or a singular solve
  kIo = 7,              // an output could not be written
  kInternal = 70,
};

std::string_view exit_code_name(ExitCode code);

// Entry point shared by the binary and the tests. args[0] is the program name.
// Results go to `out`; logs and machine-readable errors go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mfldiv::cli
