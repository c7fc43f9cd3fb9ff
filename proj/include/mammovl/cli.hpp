#pragma once

#include <json.hpp>

#include <ostream>
#include <string>
#include <vector>

namespace mammovl::cli {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int internal = 1;
inline constexpr int usage = 2;  // config, usage, integrity and extraction errors
inline constexpr int numerical = 3;
inline constexpr int data = 4;
}  // namespace exit_code

/// Every key a run config may carry, at its default value. Command
/// sections hold a "training" object that is checked by the owning module
/// instead of against this document.
nlohmann::json default_run_config();

/// Entry point of the `mammovl` tool. `args` excludes the program name.
/// Precedence, lowest first: built-in defaults, preset (pretrain), the
/// --config file, command-line flags. Final artifact paths go to `out`,
/// error messages to `err`, progress to the log (stderr).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mammovl::cli
