#pragma once

#include <string>
#include <vector>

namespace reqvec {

/// Runs one subcommand. `args` excludes the program name. Exit codes:
///   0 success, 2 usage, 3 io, 4 schema/format, 5 shape/dimension,
///   6 domain errors, 1 anything unexpected.
int run_cli(const std::vector<std::string>& args);

}  // namespace reqvec
