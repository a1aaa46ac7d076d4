#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace langseg::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIo = 3,
  kValidation = 4,
  kNumeric = 5,
};

/// Runs one command. `args` excludes the program name. Diagnostics go to
/// `err` as a single line; results and progress go to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace langseg::cli
