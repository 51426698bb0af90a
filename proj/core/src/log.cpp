#include "emask/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace emask {

namespace {
std::atomic<LogLevel> g_level{LogLevel::Warning};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) noexcept { g_level = level; }
LogLevel log_level() noexcept { return g_level; }

void log_warning(std::string_view message) {
  if (g_level < LogLevel::Warning) return;
  std::lock_guard lock(g_mutex);
  std::clog << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_level < LogLevel::Info) return;
  std::lock_guard lock(g_mutex);
  std::clog << message << '\n';
}

}  // namespace emask
