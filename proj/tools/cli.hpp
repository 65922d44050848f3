#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace defreg::cli {

// Runs one command line (arguments after the program name). Returns the process exit
// code: 0 success, 1 usage or validation error, 2 I/O or environment error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string version();

} // namespace defreg::cli
