#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ntkgen {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitVerifyFailed = 3;

/// Entry point shared by the `ntkgen` executable and the tests. `args`
/// excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ntkgen
