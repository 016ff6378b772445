#pragma once

#include <string_view>

namespace cosim {

/// Accepts error|warn|info|debug. Throws BadArgument for anything else.
void set_log_level(std::string_view level);

/// Reads COSIM_LOG; defaults to "warn" when unset.
void init_logging_from_env();

}  // namespace cosim
