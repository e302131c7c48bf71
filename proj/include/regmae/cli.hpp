#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace regmae::cli {

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 2 on config/validation errors and 1 on runtime failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace regmae::cli
