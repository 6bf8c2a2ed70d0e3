#include "karma/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace karma::log {

namespace {

Level parse_env() {
    const char* env = std::getenv("KARMA_LOG_LEVEL");
    if (!env) return Level::kInfo;
    if (std::strcmp(env, "error") == 0) return Level::kError;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    return Level::kInfo;
}

Level g_level = parse_env();

}  // namespace

Level level() { return g_level; }
void set_level(Level lv) { g_level = lv; }

void error(const std::string& msg) {
    std::fprintf(stderr, "[karma] error: %s\n", msg.c_str());
}

void info(const std::string& msg) {
    if (g_level >= Level::kInfo) std::fprintf(stderr, "[karma] %s\n", msg.c_str());
}

void debug(const std::string& msg) {
    if (g_level >= Level::kDebug) std::fprintf(stderr, "[karma] debug: %s\n", msg.c_str());
}

}  // namespace karma::log
