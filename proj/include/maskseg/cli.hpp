#pragma once

#include <iosfwd>

namespace maskseg {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

/// Entry point of the `maskseg` tool (synth, train, infer, eval).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace maskseg
