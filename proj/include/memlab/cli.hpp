#pragma once

#include <iosfwd>

namespace memlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Runs one `memlab` subcommand. Results go to `out`, diagnostics and usage
// text to `err`.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace memlab
