#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace xane3::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitCheckFailed = 3;

/// Run one command line. Normal output goes to `out`; failures print a
/// single `error: <kind>: <message>` line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace xane3::cli
