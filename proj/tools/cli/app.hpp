#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cosim::cli {

/// Parses and runs one command. Returns the process exit code: 0 on
/// success, 1 for validation errors and bad usage, 2 for runtime errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cosim::cli
