#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ufa::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 1;
inline constexpr int kIoError = 2;

// args excludes the program name. Results go to out, diagnostics and
// progress to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ufa::cli
