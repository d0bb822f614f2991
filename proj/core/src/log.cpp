#include "ovformer/log.hpp"

#include <cstdlib>
#include <cstring>
#include <mutex>

namespace ovf {

namespace {

LogLevel parse_env() {
    const char* v = std::getenv("OVFORMER_LOG");
    if (v == nullptr) return LogLevel::Info;
    if (std::strcmp(v, "error") == 0) return LogLevel::Error;
    if (std::strcmp(v, "debug") == 0) return LogLevel::Debug;
    return LogLevel::Info;
}

LogLevel g_level = parse_env();
std::mutex g_mutex;

}  // namespace

LogLevel log_level() { return g_level; }

void set_log_level(LogLevel lvl) { g_level = lvl; }

void log_msg(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) > static_cast<int>(g_level)) return;
    static const char* tag[] = {"error", "info", "debug"};
    std::lock_guard<std::mutex> lock(g_mutex);
    std::fprintf(stderr, "[%s] %s\n", tag[static_cast<int>(lvl)], msg.c_str());
}

}  // namespace ovf
