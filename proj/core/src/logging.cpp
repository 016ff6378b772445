#include "cosim/logging.hpp"

#include <cstdlib>
#include <mutex>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

#include "cosim/error.hpp"
#include "log_internal.hpp"

namespace cosim {
namespace detail {

std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto log = spdlog::stderr_color_mt("cosim");
    log->set_pattern("[%l] %v");
    log->set_level(spdlog::level::warn);
    return log;
  }();
  return instance;
}

}  // namespace detail

void set_log_level(std::string_view level) {
  spdlog::level::level_enum parsed;
  if (level == "error") {
    parsed = spdlog::level::err;
  } else if (level == "warn") {
    parsed = spdlog::level::warn;
  } else if (level == "info") {
    parsed = spdlog::level::info;
  } else if (level == "debug") {
    parsed = spdlog::level::debug;
  } else {
    throw Error(ErrorCode::BadArgument, "log level must be error|warn|info|debug, got '" +
                                            std::string(level) + "'");
  }
  detail::logger()->set_level(parsed);
}

void init_logging_from_env() {
  const char* env = std::getenv("COSIM_LOG");
  set_log_level(env != nullptr && *env != '\0' ? std::string_view(env) : std::string_view("warn"));
}

}  // namespace cosim
