#pragma once

#include <ostream>

namespace dal {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitPropertyFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

// Entry point of the `dal` tool: pretrain, eval, audit, dump-attention,
// equivalence, ablation-suite.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dal
