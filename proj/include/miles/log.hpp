#pragma once

#include <cstdlib>
#include <iostream>
#include <string>

namespace miles::log {

enum class Level { error = 0, info = 1, debug = 2 };

/// MILES_LOG_LEVEL in {error, info, debug}; anything else means info.
inline Level level() {
  static const Level lvl = [] {
    const char* env = std::getenv("MILES_LOG_LEVEL");
    const std::string v = env ? env : "";
    if (v == "error") return Level::error;
    if (v == "debug") return Level::debug;
    return Level::info;
  }();
  return lvl;
}

inline void write(Level at, const std::string& msg) {
  if (static_cast<int>(at) > static_cast<int>(level())) return;
  static const char* tags[] = {"error", "info", "debug"};
  std::cerr << '[' << tags[static_cast<int>(at)] << "] " << msg << '\n';
}

inline void error(const std::string& msg) { write(Level::error, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace miles::log
