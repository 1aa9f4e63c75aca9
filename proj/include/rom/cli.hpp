#pragma once

#include <ostream>

namespace rom::cli {

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // validation or verification failure
inline constexpr int kExitIo = 2;       // I/O or format error

// Entry point behind the `romc` binary: plan, compress, report, verify, gen-toy.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rom::cli
