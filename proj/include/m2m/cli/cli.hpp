#pragma once

#include <iosfwd>

namespace m2m::cli {

/// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFault = 3;

/// Entry point of the `m2m` tool: ingest, train, separate, evaluate, render.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace m2m::cli
