#pragma once

#include <iosfwd>

namespace pfascan {

enum ExitCode : int { kOk = 0, kConfigError = 2, kValidationError = 3, kIoError = 4 };

/// Parses argv and runs one subcommand. Errors are reported as a single
/// "error: <kind>: <message>" line on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pfascan
