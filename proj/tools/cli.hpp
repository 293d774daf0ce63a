#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sdevi::cli {

/// Runs one invocation. args excludes the program name.
/// Returns 0 on success, 1 on a usage error, 2 on a runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sdevi::cli
