#pragma once

#include <iosfwd>

namespace subjectopt {

/// Subcommands: generate, edit, eval, serve, sweep. Exit codes: 0 success,
/// 1 usage or invalid input, 2 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace subjectopt
