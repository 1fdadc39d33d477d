#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace kpp::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kDiverged = 2 };

std::string version();

/// Turns `key = value` lines into `--key=value` arguments. Blank lines and `#` comments are
/// skipped; underscores in keys become dashes.
std::vector<std::string> config_file_args(const std::filesystem::path& path);

/// Entry point of the `kpp` tool. `args[0]` is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kpp::cli
