#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nsbuild::cli {

// Parses and runs one nsbuild command line. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nsbuild::cli
