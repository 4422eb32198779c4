#pragma once

#include <absl/time/civil_time.h>
#include <absl/time/time.h>

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "smstrack/error.hpp"

namespace smstrack {

using Duration = std::chrono::milliseconds;
using Timestamp = std::chrono::sys_time<Duration>;

inline constexpr Duration seconds(std::int64_t s) { return std::chrono::seconds(s); }
inline constexpr Duration minutes(std::int64_t m) { return std::chrono::minutes(m); }

inline std::int64_t unix_millis(Timestamp t) { return t.time_since_epoch().count(); }
inline Timestamp from_unix_millis(std::int64_t ms) { return Timestamp{Duration{ms}}; }
inline Timestamp from_unix_seconds(std::int64_t s) { return Timestamp{seconds(s)}; }

inline double to_minutes(Duration d) { return static_cast<double>(d.count()) / 60000.0; }
inline double to_seconds(Duration d) { return static_cast<double>(d.count()) / 1000.0; }

inline absl::Time to_absl(Timestamp t) { return absl::FromUnixMillis(unix_millis(t)); }
inline Timestamp from_absl(absl::Time t) { return from_unix_millis(absl::ToUnixMillis(t)); }

/// Builds a UTC timestamp from calendar fields.
inline Timestamp utc(int year, int month, int day, int hour = 0, int minute = 0, int second = 0) {
  const absl::CivilSecond cs(year, month, day, hour, minute, second);
  return from_absl(absl::FromCivil(cs, absl::UTCTimeZone()));
}

/// ISO-8601 UTC, always with millisecond precision: 2024-06-01T12:00:00.000Z
inline std::string format_time(Timestamp t) {
  return absl::FormatTime("%Y-%m-%dT%H:%M:%E3SZ", to_absl(t), absl::UTCTimeZone());
}

/// Accepts RFC 3339 timestamps (fraction and offset optional, "Z" assumed),
/// a bare date (midnight UTC), or an integer count of Unix seconds.
inline Timestamp parse_time(std::string_view text) {
  if (text.empty()) throw Error(Errc::Validation, "empty timestamp");
  const std::string_view digits = text.front() == '-' ? text.substr(1) : text;
  const bool all_digits = !digits.empty() && digits.find_first_not_of("0123456789") == std::string_view::npos;
  if (all_digits) {
    std::int64_t secs = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), secs);
    if (ec == std::errc{} && ptr == text.data() + text.size()) return from_unix_seconds(secs);
  }
  const std::string s(text);
  absl::Time parsed;
  std::string err;
  for (const char* fmt : {"%Y-%m-%dT%H:%M:%E*S%Ez", "%Y-%m-%dT%H:%M:%E*SZ", "%Y-%m-%dT%H:%M:%E*S",
                          "%Y-%m-%dT%H:%MZ", "%Y-%m-%d"}) {
    if (absl::ParseTime(fmt, s, absl::UTCTimeZone(), &parsed, &err)) return from_absl(parsed);
  }
  throw Error(Errc::Validation, "unparseable timestamp '" + s + "'");
}

inline absl::TimeZone load_zone(const std::string& name) {
  absl::TimeZone tz;
  if (name.empty() || name == "UTC") return absl::UTCTimeZone();
  if (!absl::LoadTimeZone(name, &tz)) throw Error(Errc::ConfigError, "unknown time zone '" + name + "'", "timezone");
  return tz;
}

/// Time source read by scheduling, timeout, and ingestion logic.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() const = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() const override {
    return std::chrono::time_point_cast<Duration>(std::chrono::system_clock::now());
  }
};

/// Virtual clock for tests and the simulator; advanced explicitly.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(Timestamp start = Timestamp{}) : now_(unix_millis(start)) {}
  Timestamp now() const override { return from_unix_millis(now_.load()); }
  void set(Timestamp t) { now_.store(unix_millis(t)); }
  void advance(Duration d) { now_.fetch_add(d.count()); }

 private:
  std::atomic<std::int64_t> now_;
};

/// Maps wall time onto virtual time at a fixed speed-up: virtual = origin + factor * elapsed.
class AcceleratedClock final : public Clock {
 public:
  AcceleratedClock(Timestamp origin, double factor)
      : origin_(origin), factor_(factor < 1.0 ? 1.0 : factor), wall_start_(std::chrono::steady_clock::now()) {}
  Timestamp now() const override {
    const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start_);
    return origin_ + Duration{static_cast<std::int64_t>(elapsed.count() * factor_)};
  }

 private:
  Timestamp origin_;
  double factor_;
  std::chrono::steady_clock::time_point wall_start_;
};

}  // namespace smstrack
