#pragma once

#include <iosfwd>

namespace mmrl {

// Exit codes: 0 success, 1 runtime error, 2 usage/config error, 3 protocol
// violation. Diagnostics go to `err` as a single line.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mmrl
