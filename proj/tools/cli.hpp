#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace caranet::cli {

enum ExitCode : int { ok = 0, usage_error = 2, numeric_failure = 3 };

/// Runs one command line (args[0] is the program name). Output goes to
/// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace caranet::cli
