#pragma once

#include <cstdio>
#include <string>

namespace ovf {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level is read once from OVFORMER_LOG ({error|info|debug}, default info).
LogLevel log_level();
void set_log_level(LogLevel lvl);

void log_msg(LogLevel lvl, const std::string& msg);

inline void log_error(const std::string& msg) { log_msg(LogLevel::Error, msg); }
inline void log_info(const std::string& msg) { log_msg(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_msg(LogLevel::Debug, msg); }

}  // namespace ovf
