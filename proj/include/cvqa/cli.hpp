#pragma once

#include <string>
#include <vector>

namespace cvqa::cli {

// Full command-line driver. Returns the process exit code: 0 on success,
// 1 on a runtime failure (stderr carries `error[<category>]: <message>`),
// 2 on a usage error.
int run_cli(int argc, const char* const* argv);

// Same driver for programmatic use; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace cvqa::cli
