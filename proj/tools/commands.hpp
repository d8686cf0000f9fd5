#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spce::cli {

// Runs one command line (without the program name). Errors are reported on
// `err` as a JSON object; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spce::cli
