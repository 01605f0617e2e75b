// Command-line driver. Exit codes: 0 success, 2 usage, 3 data, 4 numeric.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ecglp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Hash of the library and tool sources at configure time.
const char* code_version();

}  // namespace ecglp::cli
