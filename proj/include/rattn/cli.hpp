#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rattn {

/// Entry point of the `result_attn` tool. Subcommands: train, eval, count,
/// analyze-attention, plot. Returns 0 on success, 2 for usage errors and 1
/// for runtime failures (missing files, bad configs, numeric errors).
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rattn
