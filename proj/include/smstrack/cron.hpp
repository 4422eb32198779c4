#pragma once

// Five-field cron expressions: minute hour day-of-month month day-of-week.
// Each field is a comma list of `*`, `N`, `A-B`, `*/S`, `A-B/S` or `A/S`.
// Day-of-week is 0-7 with both 0 and 7 meaning Sunday. When both day fields
// are restricted (neither is exactly `*`) a day matches if either one does,
// as in Vixie cron.

#include <absl/time/civil_time.h>
#include <absl/time/time.h>

#include <algorithm>
#include <bitset>
#include <charconv>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/time.hpp"

namespace smstrack::cron {

struct CronSpec {
  std::bitset<60> minutes;
  std::bitset<24> hours;
  std::bitset<32> days_of_month;  // bit 0 unused
  std::bitset<13> months;         // bit 0 unused
  std::bitset<7> days_of_week;    // 0 = Sunday
  bool dom_restricted = false;
  bool dow_restricted = false;
  std::string expression;

  bool day_matches(int dom, int month, int dow) const {
    if (!months[static_cast<std::size_t>(month)]) return false;
    const bool dom_ok = days_of_month[static_cast<std::size_t>(dom)];
    const bool dow_ok = days_of_week[static_cast<std::size_t>(dow)];
    if (dom_restricted && dow_restricted) return dom_ok || dow_ok;
    return dom_ok && dow_ok;
  }

  bool matches(const absl::CivilMinute& cm) const {
    const int dow = (static_cast<int>(absl::GetWeekday(absl::CivilDay(cm))) + 1) % 7;  // absl: Monday = 0
    return minutes[static_cast<std::size_t>(cm.minute())] && hours[static_cast<std::size_t>(cm.hour())] &&
           day_matches(cm.day(), cm.month(), dow);
  }
};

namespace detail {

struct FieldRange {
  int lo;
  int hi;
  const char* name;
};

inline constexpr FieldRange kFields[5] = {
    {0, 59, "minute"}, {0, 23, "hour"}, {1, 31, "day-of-month"}, {1, 12, "month"}, {0, 7, "day-of-week"}};

[[noreturn]] inline void fail(int field, const std::string& reason) {
  throw Error(Errc::CronSyntaxError, "field " + std::to_string(field) + " (" + kFields[field].name + "): " + reason,
              std::to_string(field));
}

inline int parse_int(std::string_view s, int field) {
  if (s.empty()) fail(field, "empty value");
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) fail(field, "'" + std::string(s) + "' is not a number");
  return v;
}

// Returns the set of values as a 64-bit mask.
inline std::uint64_t parse_field(std::string_view text, int field) {
  const auto [lo, hi, name] = kFields[field];
  (void)name;
  if (text.empty()) fail(field, "empty field");
  std::uint64_t mask = 0;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    const std::string_view item = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (item.empty()) fail(field, "empty list item");

    std::string_view range = item;
    int step = 1;
    bool has_step = false;
    if (const auto slash = item.find('/'); slash != std::string_view::npos) {
      range = item.substr(0, slash);
      step = parse_int(item.substr(slash + 1), field);
      has_step = true;
      if (step <= 0) fail(field, "step must be positive");
    }
    int a = lo;
    int b = hi;
    if (range == "*") {
    } else if (const auto dash = range.find('-'); dash != std::string_view::npos) {
      a = parse_int(range.substr(0, dash), field);
      b = parse_int(range.substr(dash + 1), field);
    } else {
      a = parse_int(range, field);
      b = has_step ? hi : a;
    }
    if (a < lo || a > hi || b < lo || b > hi) {
      fail(field, "value out of range " + std::to_string(lo) + "-" + std::to_string(hi));
    }
    if (a > b) fail(field, "range start exceeds end");
    for (int v = a; v <= b; v += step) mask |= (std::uint64_t{1} << v);

    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return mask;
}

}  // namespace detail

inline CronSpec parse_cron(std::string_view expr) {
  std::vector<std::string> fields;
  {
    std::istringstream in{std::string(expr)};
    std::string f;
    while (in >> f) fields.push_back(f);
  }
  if (fields.size() != 5) {
    throw Error(Errc::CronSyntaxError, "expected 5 fields, got " + std::to_string(fields.size()), "expression");
  }
  CronSpec spec;
  spec.minutes = std::bitset<60>(detail::parse_field(fields[0], 0));
  spec.hours = std::bitset<24>(detail::parse_field(fields[1], 1));
  spec.days_of_month = std::bitset<32>(detail::parse_field(fields[2], 2));
  spec.months = std::bitset<13>(detail::parse_field(fields[3], 3));
  auto dow = detail::parse_field(fields[4], 4);
  if (dow & (std::uint64_t{1} << 7)) dow = (dow | 1u) & 0x7Fu;
  spec.days_of_week = std::bitset<7>(dow);
  spec.dom_restricted = fields[2] != "*";
  spec.dow_restricted = fields[4] != "*";
  spec.expression = fields[0] + " " + fields[1] + " " + fields[2] + " " + fields[3] + " " + fields[4];
  return spec;
}

// Days searched before giving up; covers leap-day-only expressions.
inline constexpr int kSearchDays = 366 * 9;

/// Earliest instant strictly after `after` whose local time in `zone` matches.
/// Local times skipped by a DST jump never match; repeated local times match
/// at both instants. Empty if nothing matches within ~9 years.
inline std::optional<Timestamp> next_fire(const CronSpec& spec, Timestamp after, const absl::TimeZone& zone) {
  const absl::Time after_abs = to_absl(after);
  const absl::CivilDay first_day = absl::CivilDay(absl::ToCivilMinute(after_abs, zone)) - 1;
  std::optional<absl::Time> best;
  int days_after_hit = 0;
  for (int i = 0; i < kSearchDays; ++i) {
    const absl::CivilDay day = first_day + i;
    if (best) {
      // A repeated hour can push a later civil day's instant before an
      // earlier one's, so look one day past the first hit.
      if (++days_after_hit > 1) break;
    }
    const int dow = (static_cast<int>(absl::GetWeekday(day)) + 1) % 7;
    if (!spec.day_matches(day.day(), day.month(), dow)) continue;
    for (int h = 0; h < 24; ++h) {
      if (!spec.hours[static_cast<std::size_t>(h)]) continue;
      for (int m = 0; m < 60; ++m) {
        if (!spec.minutes[static_cast<std::size_t>(m)]) continue;
        const auto info = zone.At(absl::CivilSecond(day.year(), day.month(), day.day(), h, m, 0));
        absl::Time candidates[2];
        int n = 0;
        if (info.kind == absl::TimeZone::TimeInfo::UNIQUE) {
          candidates[n++] = info.pre;
        } else if (info.kind == absl::TimeZone::TimeInfo::REPEATED) {
          candidates[n++] = info.pre;
          candidates[n++] = info.post;
        }
        for (int c = 0; c < n; ++c) {
          if (candidates[c] > after_abs && (!best || candidates[c] < *best)) best = candidates[c];
        }
      }
    }
  }
  if (!best) return std::nullopt;
  return from_absl(*best);
}

}  // namespace smstrack::cron
