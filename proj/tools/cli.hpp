#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nnmil::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidationFailure = 1;
inline constexpr int kIoFailure = 2;

/// Runs one subcommand. `args` excludes the program name. Diagnostics go to
/// `err` as a single line; results and usage go to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nnmil::cli
