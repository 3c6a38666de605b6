#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fieldsynth::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kBadInput = 2;

// Runs the command line `args` (args[0] is the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fieldsynth::cli
