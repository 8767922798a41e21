#pragma once

// The mixprune command line: synth-data, run, sweep, export, report.

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace mixprune::cli {

/// Runs one command line and returns the exit code: 0 success, 2 bad
/// configuration or input, 3 runtime failure. On failure a one-line JSON
/// object {"error": {"kind", "message"}} is written to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Help text of one subcommand ("" for the top level).
std::string help(const std::string& command);

/// Long option names of every subcommand, for documentation checks.
std::map<std::string, std::vector<std::string>> option_names();

}  // namespace mixprune::cli
