#pragma once

#include <string>

namespace karma::log {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

// Initialized from KARMA_LOG_LEVEL (error|info|debug), default info.
Level level();
void set_level(Level lv);

void error(const std::string& msg);
void info(const std::string& msg);
void debug(const std::string& msg);

}  // namespace karma::log
