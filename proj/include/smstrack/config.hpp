#pragma once

// Server configuration: a flat `key = value` file, '#' starts a comment.
// Every key can be overridden by the environment variable SMSTRACK_<KEY>
// (upper-cased), e.g. SMSTRACK_LISTEN_PORT=8080.

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "smstrack/error.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

struct ServerConfig {
  std::string listen_host = "127.0.0.1";
  int listen_port = 8080;
  std::string token_file;
  std::string store_path = "smstrack-data";
  std::string transport = "loopback";  // loopback | at | http
  std::string serial_device = "/dev/ttyUSB0";
  int serial_baud = 115200;
  std::string modem_url = "http://127.0.0.1:9000";
  std::string timezone = "UTC";
  int response_timeout_s = 180;
  int tick_ms = 1000;
  bool sync_writes = true;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline int to_int(const std::string& key, const std::string& value, int lo, int hi) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size() || v < lo || v > hi) throw std::out_of_range(value);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError,
                key + " must be an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got '" + value + "'",
                key);
  }
}

inline bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw Error(Errc::ConfigError, key + " must be true or false, got '" + value + "'", key);
}

inline void apply_key(ServerConfig& c, const std::string& key, const std::string& value) {
  if (key == "listen_host") c.listen_host = value;
  else if (key == "listen_port") c.listen_port = to_int(key, value, 0, 65535);
  else if (key == "token_file") c.token_file = value;
  else if (key == "store_path") c.store_path = value;
  else if (key == "transport") {
    if (value != "loopback" && value != "at" && value != "http") {
      throw Error(Errc::ConfigError, "transport must be loopback, at or http", key);
    }
    c.transport = value;
  } else if (key == "serial_device") c.serial_device = value;
  else if (key == "serial_baud") c.serial_baud = to_int(key, value, 1200, 4000000);
  else if (key == "modem_url") c.modem_url = value;
  else if (key == "timezone") {
    load_zone(value);
    c.timezone = value;
  } else if (key == "response_timeout_s") c.response_timeout_s = to_int(key, value, 1, 86400);
  else if (key == "tick_ms") c.tick_ms = to_int(key, value, 10, 60000);
  else if (key == "sync_writes") c.sync_writes = to_bool(key, value);
  else throw Error(Errc::ConfigError, "unknown key '" + key + "'", key);
}

/// Applies one key; any failure becomes a ConfigError naming `where`.
inline void apply(ServerConfig& c, const std::string& key, const std::string& value, const std::string& where) {
  try {
    apply_key(c, key, value);
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, where + ": " + e.message(), key);
  }
}

inline const char* const kKeys[] = {"listen_host", "listen_port", "token_file",  "store_path",
                                    "transport",   "serial_device", "serial_baud", "modem_url",
                                    "timezone",    "response_timeout_s", "tick_ms", "sync_writes"};

}  // namespace config_detail

/// Parses config text; `origin` prefixes error locations ("server.conf:3").
inline ServerConfig parse_config(const std::string& text, const std::string& origin = "config") {
  ServerConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::ConfigError, where + ": expected key = value");
    config_detail::apply(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)), where);
  }
  return c;
}

/// Overrides keys from SMSTRACK_* environment variables.
inline void apply_env_overrides(ServerConfig& c) {
  for (const char* key : config_detail::kKeys) {
    std::string name = "SMSTRACK_";
    for (const char* p = key; *p; ++p) name += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    if (const char* v = std::getenv(name.c_str())) config_detail::apply(c, key, v, name);
  }
}

inline ServerConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot read config file " + path, "config");
  std::stringstream ss;
  ss << in.rdbuf();
  auto c = parse_config(ss.str(), path);
  apply_env_overrides(c);
  return c;
}

}  // namespace smstrack
