#pragma once

#include <absl/time/civil_time.h>
#include <absl/time/time.h>

#include <algorithm>
#include <bitset>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "smstrack/cron.hpp"
#include "smstrack/error.hpp"
#include "smstrack/ids.hpp"
#include "smstrack/registry.hpp"
#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

inline constexpr Duration kMinimumInterval = std::chrono::seconds(60);
// Fires older than this when evaluated are treated as missed and skipped.
inline constexpr Duration kMissedFireGrace = std::chrono::seconds(60);

inline constexpr const char* kWeekdayNames[7] = {"sun", "mon", "tue", "wed", "thu", "fri", "sat"};

/// Time-of-day x weekday mask in a time zone; [start, end) within one day.
struct ActivationWindow {
  int start_minute = 0;  // minutes since local midnight
  int end_minute = 24 * 60;
  std::bitset<7> days;   // 0 = Sunday
  std::string timezone = "UTC";

  void validate() const {
    if (start_minute < 0 || end_minute > 24 * 60 || start_minute >= end_minute) {
      throw Error(Errc::InvalidWindow, "window start must be before end within one day", "window.start");
    }
    if (days.none()) throw Error(Errc::InvalidWindow, "window needs at least one weekday", "window.days");
    load_zone(timezone);
  }

  friend bool operator==(const ActivationWindow&, const ActivationWindow&) = default;
};

inline int weekday_index(const absl::CivilDay& day) { return (static_cast<int>(absl::GetWeekday(day)) + 1) % 7; }

inline bool window_contains(const ActivationWindow& w, Timestamp t) {
  const auto zone = load_zone(w.timezone);
  const auto cs = absl::ToCivilSecond(to_absl(t), zone);
  if (!w.days[static_cast<std::size_t>(weekday_index(absl::CivilDay(cs)))]) return false;
  const int minute_of_day = cs.hour() * 60 + cs.minute();
  return minute_of_day >= w.start_minute && minute_of_day < w.end_minute;
}

/// Earliest instant >= t inside the window; empty only for an invalid window.
inline std::optional<Timestamp> window_next_open(const ActivationWindow& w, Timestamp t) {
  if (window_contains(w, t)) return t;
  const auto zone = load_zone(w.timezone);
  const absl::CivilDay today = absl::CivilDay(absl::ToCivilSecond(to_absl(t), zone));
  for (int i = 0; i <= 8; ++i) {
    const absl::CivilDay day = today + i;
    if (!w.days[static_cast<std::size_t>(weekday_index(day))]) continue;
    const absl::CivilSecond open(day.year(), day.month(), day.day(), w.start_minute / 60, w.start_minute % 60, 0);
    const auto candidate = from_absl(absl::FromCivil(open, zone));
    if (candidate > t && window_contains(w, candidate)) return candidate;
  }
  return std::nullopt;
}

inline std::string format_hhmm(int minute_of_day) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d:%02d", minute_of_day / 60, minute_of_day % 60);
  return buf;
}

inline int parse_hhmm(const std::string& s, const char* field) {
  int h = 0, m = 0;
  char colon = 0;
  std::istringstream in(s);
  if (!(in >> h >> colon >> m) || colon != ':' || h < 0 || h > 24 || m < 0 || m > 59 || (h == 24 && m != 0) ||
      !in.eof()) {
    throw Error(Errc::InvalidWindow, "expected HH:MM, got '" + s + "'", field);
  }
  return h * 60 + m;
}

inline Json to_json(const ActivationWindow& w) {
  Json days = Json::array();
  for (int d = 0; d < 7; ++d) {
    if (w.days[static_cast<std::size_t>(d)]) days.push_back(kWeekdayNames[d]);
  }
  return Json{{"start", format_hhmm(w.start_minute)},
              {"end", format_hhmm(w.end_minute)},
              {"days", days},
              {"timezone", w.timezone}};
}

inline ActivationWindow window_from_json(const Json& j, const std::string& default_zone) {
  ActivationWindow w;
  if (!j.is_object()) throw Error(Errc::InvalidWindow, "window must be an object", "window");
  w.start_minute = parse_hhmm(j.value("start", std::string("00:00")), "window.start");
  w.end_minute = parse_hhmm(j.value("end", std::string("24:00")), "window.end");
  w.timezone = j.value("timezone", default_zone);
  if (!j.contains("days") || !j["days"].is_array()) throw Error(Errc::InvalidWindow, "days list required", "window.days");
  for (const auto& d : j["days"]) {
    int idx = -1;
    if (d.is_number_integer()) {
      idx = d.get<int>() % 7;
      if (d.get<int>() < 0 || d.get<int>() > 7) idx = -1;
    } else if (d.is_string()) {
      std::string s = d.get<std::string>();
      std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
      for (int k = 0; k < 7; ++k) {
        if (s.rfind(kWeekdayNames[k], 0) == 0) idx = k;
      }
    }
    if (idx < 0) throw Error(Errc::InvalidWindow, "bad weekday " + d.dump(), "window.days");
    w.days.set(static_cast<std::size_t>(idx));
  }
  w.validate();
  return w;
}

enum class ScheduleKind { Date, Interval, Cron };

inline std::string_view kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Date: return "date";
    case ScheduleKind::Interval: return "interval";
    case ScheduleKind::Cron: return "cron";
  }
  return "date";
}

struct ScheduleTarget {
  enum class Type { Device, Group } type = Type::Device;
  std::string id;
  friend bool operator==(const ScheduleTarget&, const ScheduleTarget&) = default;
};

struct Schedule {
  std::string schedule_id;
  ScheduleKind kind = ScheduleKind::Interval;
  ScheduleTarget target;
  std::optional<Timestamp> at;               // Date
  std::optional<Duration> every;             // Interval
  std::optional<Timestamp> anchor;           // Interval: fires at anchor + k * every, k >= 1
  std::optional<cron::CronSpec> cron;        // Cron
  std::string timezone = "UTC";              // zone the cron expression is read in
  std::optional<ActivationWindow> window;
  bool enabled = true;

  /// Exactly the fields of the kind must be populated.
  void validate() const {
    switch (kind) {
      case ScheduleKind::Date:
        if (!at) throw Error(Errc::InvalidSchedule, "date schedule needs 'at'", "at");
        if (every || cron) throw Error(Errc::InvalidSchedule, "date schedule takes only 'at'", "kind");
        break;
      case ScheduleKind::Interval:
        if (!every) throw Error(Errc::InvalidSchedule, "interval schedule needs 'every_s'", "every_s");
        if (*every < kMinimumInterval) throw Error(Errc::InvalidSchedule, "interval must be at least 60 s", "every_s");
        if (!anchor) throw Error(Errc::InvalidSchedule, "interval schedule needs an anchor", "anchor");
        if (at || cron) throw Error(Errc::InvalidSchedule, "interval schedule takes only 'every_s'", "kind");
        break;
      case ScheduleKind::Cron:
        if (!cron) throw Error(Errc::InvalidSchedule, "cron schedule needs 'cron'", "cron");
        if (at || every) throw Error(Errc::InvalidSchedule, "cron schedule takes only 'cron'", "kind");
        break;
    }
    if (target.id.empty()) throw Error(Errc::InvalidSchedule, "schedule needs a target", "target");
    load_zone(timezone);
    if (window) window->validate();
  }
};

inline Json to_json(const Schedule& s) {
  Json j{{"schedule_id", s.schedule_id},
         {"kind", kind_name(s.kind)},
         {"target", {{"type", s.target.type == ScheduleTarget::Type::Group ? "group" : "device"}, {"id", s.target.id}}},
         {"timezone", s.timezone},
         {"enabled", s.enabled}};
  if (s.at) j["at"] = format_time(*s.at);
  if (s.every) j["every_s"] = s.every->count() / 1000;
  if (s.anchor) j["anchor"] = format_time(*s.anchor);
  if (s.cron) j["cron"] = s.cron->expression;
  j["window"] = s.window ? to_json(*s.window) : Json(nullptr);
  return j;
}

/// Builds a schedule from its JSON form. `now` anchors interval schedules that
/// do not name an anchor.
inline Schedule schedule_from_json(const Json& j, const std::string& default_zone, Timestamp now) {
  if (!j.is_object()) throw Error(Errc::Validation, "schedule must be an object");
  Schedule s;
  s.schedule_id = j.value("schedule_id", std::string());
  const std::string kind = j.value("kind", std::string());
  if (kind == "date") s.kind = ScheduleKind::Date;
  else if (kind == "interval") s.kind = ScheduleKind::Interval;
  else if (kind == "cron") s.kind = ScheduleKind::Cron;
  else throw Error(Errc::InvalidSchedule, "kind must be date, interval or cron", "kind");

  if (!j.contains("target")) throw Error(Errc::InvalidSchedule, "schedule needs a target", "target");
  const auto& t = j["target"];
  if (t.is_object()) {
    const std::string type = t.value("type", std::string("device"));
    if (type == "group") s.target.type = ScheduleTarget::Type::Group;
    else if (type != "device") throw Error(Errc::InvalidSchedule, "target type must be device or group", "target.type");
    s.target.id = t.value("id", std::string());
  } else if (t.is_string()) {
    s.target.id = t.get<std::string>();
    if (s.target.id.rfind("grp-", 0) == 0) s.target.type = ScheduleTarget::Type::Group;
  } else {
    throw Error(Errc::InvalidSchedule, "target must be an object or id", "target");
  }

  s.timezone = j.value("timezone", default_zone);
  try {
    if (j.contains("at") && !j["at"].is_null()) s.at = parse_time(j["at"].get<std::string>());
    if (j.contains("anchor") && !j["anchor"].is_null()) s.anchor = parse_time(j["anchor"].get<std::string>());
    if (j.contains("every_s") && !j["every_s"].is_null()) s.every = seconds(j["every_s"].get<std::int64_t>());
    if (j.contains("every_min") && !j["every_min"].is_null()) s.every = minutes(j["every_min"].get<std::int64_t>());
    const char* cron_key = j.contains("cron") ? "cron" : (j.contains("expr") ? "expr" : nullptr);
    if (cron_key && !j[cron_key].is_null()) s.cron = cron::parse_cron(j[cron_key].get<std::string>());
    if (j.contains("window") && !j["window"].is_null()) s.window = window_from_json(j["window"], default_zone);
    s.enabled = j.value("enabled", true);
  } catch (const Json::exception& e) {
    throw Error(Errc::Validation, std::string("malformed schedule: ") + e.what());
  }
  if (s.kind == ScheduleKind::Interval && !s.anchor) s.anchor = now;
  s.validate();
  return s;
}

/// Next raw (window-ignoring) fire instant strictly after t.
inline std::optional<Timestamp> next_raw_fire(const Schedule& s, Timestamp t) {
  switch (s.kind) {
    case ScheduleKind::Date:
      if (*s.at > t) return *s.at;
      return std::nullopt;
    case ScheduleKind::Interval: {
      const auto every = s.every->count();
      const auto since = (t - *s.anchor).count();
      const std::int64_t k = since < 0 ? 1 : since / every + 1;
      return *s.anchor + Duration{k * every};
    }
    case ScheduleKind::Cron:
      return cron::next_fire(*s.cron, t, load_zone(s.timezone));
  }
  return std::nullopt;
}

/// Next fire instant strictly after t that the activation window admits.
inline std::optional<Timestamp> next_fire(const Schedule& s, Timestamp t) {
  auto candidate = next_raw_fire(s, t);
  if (!s.window) return candidate;
  // A window opens at least weekly, so a few hundred hops always suffice.
  for (int hops = 0; candidate && hops < 100000; ++hops) {
    if (window_contains(*s.window, *candidate)) return candidate;
    const auto open = window_next_open(*s.window, *candidate);
    if (!open) return std::nullopt;
    candidate = next_raw_fire(s, *open - Duration{1});
  }
  return std::nullopt;
}

/// Windowed fire instants in (from, to].
inline std::vector<Timestamp> fire_instants(const Schedule& s, Timestamp from, Timestamp to) {
  std::vector<Timestamp> out;
  auto t = next_fire(s, from);
  while (t && *t <= to) {
    out.push_back(*t);
    t = next_fire(s, *t);
  }
  return out;
}

inline std::int64_t estimate_request_count(const Schedule& s, Timestamp from, Duration horizon) {
  if (horizon < std::chrono::hours(24)) {
    throw Error(Errc::PreconditionViolated, "horizon must be at least one day", "horizon");
  }
  return static_cast<std::int64_t>(fire_instants(s, from, from + horizon).size());
}

/// Counts from the schedule's natural origin: the anchor for interval
/// schedules, otherwise `fallback_from`.
inline std::int64_t estimate_request_count(const Schedule& s, Duration horizon, Timestamp fallback_from = {}) {
  return estimate_request_count(s, s.anchor.value_or(fallback_from), horizon);
}

struct LocateJob {
  std::string device_id;
  Timestamp fire_at;
  std::string schedule_id;  // "manual" for operator-triggered locates

  friend bool operator==(const LocateJob&, const LocateJob&) = default;
};

/// Owns schedule definitions and their next-due instants. Not thread-safe;
/// the service's evaluation loop is the only caller.
class Scheduler {
 public:
  Scheduler(Store& store, const DeviceRegistry& registry, std::string default_zone, Timestamp now)
      : store_(store), registry_(registry), ids_(store), default_zone_(std::move(default_zone)) {
    for (const auto& [id, rec] : store_.scan(ns::kSchedules)) {
      Schedule s = schedule_from_json(rec, default_zone_, now);
      // Missed fires while down are skipped.
      entries_[id] = Entry{s, s.enabled ? next_fire(s, now - Duration{1}) : std::nullopt};
    }
  }

  const std::string& default_zone() const { return default_zone_; }

  Schedule create(Schedule s, Timestamp now) {
    if (s.kind == ScheduleKind::Interval && !s.anchor) s.anchor = now;
    check_target(s.target);
    s.validate();
    auto first = next_fire(s, now - Duration{1});
    if (s.kind == ScheduleKind::Date && (!first || *s.at < now)) {
      throw Error(Errc::NoFutureOccurrence, "date schedule is in the past", "at");
    }
    WriteBatch batch;
    s.schedule_id = ids_.next("sch", batch);
    batch.put(ns::kSchedules, s.schedule_id, to_json(s));
    store_.commit(batch);
    entries_[s.schedule_id] = Entry{s, s.enabled ? first : std::nullopt};
    return s;
  }

  Schedule replace(const std::string& id, Schedule s, Timestamp now) {
    get(id);
    if (s.kind == ScheduleKind::Interval && !s.anchor) s.anchor = now;
    check_target(s.target);
    s.schedule_id = id;
    s.validate();
    store_.put(ns::kSchedules, id, to_json(s));
    entries_[id] = Entry{s, s.enabled ? next_fire(s, now - Duration{1}) : std::nullopt};
    return s;
  }

  void remove(const std::string& id) {
    get(id);
    store_.erase(ns::kSchedules, id);
    entries_.erase(id);
  }

  Schedule get(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw Error(Errc::UnknownSchedule, "no schedule '" + id + "'", "schedule_id");
    return it->second.schedule;
  }

  std::vector<Schedule> list() const {
    std::vector<Schedule> out;
    for (const auto& [id, e] : entries_) out.push_back(e.schedule);
    return out;
  }

  std::optional<Timestamp> next_due(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) return std::nullopt;
    return it->second.next_due;
  }

  /// Earliest pending fire across all schedules.
  std::optional<Timestamp> next_wakeup() const {
    std::optional<Timestamp> best;
    for (const auto& [id, e] : entries_) {
      if (e.next_due && (!best || *e.next_due < *best)) best = e.next_due;
    }
    return best;
  }

  /// Devices targeted right now; group targets expand to current members.
  std::vector<std::string> expand_target(const ScheduleTarget& target) const {
    std::vector<std::string> out;
    if (target.type == ScheduleTarget::Type::Device) {
      if (registry_.has_device(target.id)) out.push_back(target.id);
    } else if (registry_.has_group(target.id)) {
      for (const auto& d : registry_.group_members(target.id)) out.push_back(d.device_id);
    }
    return out;
  }

  /// Jobs due at `now`, one per (schedule, member device), skipping devices
  /// that already have an outstanding job or were already picked this round.
  /// Pure: calling it again with the same state and `now` gives the same list.
  std::vector<LocateJob> due_jobs(Timestamp now, const std::function<bool(const std::string&)>& is_outstanding) const {
    std::vector<LocateJob> jobs;
    std::set<std::string> picked;
    for (const auto& [id, e] : entries_) {
      if (!e.next_due || *e.next_due > now || now - *e.next_due > kMissedFireGrace) continue;
      for (const auto& device_id : expand_target(e.schedule.target)) {
        if (is_outstanding(device_id) || picked.count(device_id)) continue;
        picked.insert(device_id);
        jobs.push_back(LocateJob{device_id, *e.next_due, id});
      }
    }
    return jobs;
  }

  /// Moves every schedule due at or before `now` to its next fire; returns
  /// (schedule_id, fire_at) for the fires consumed within the grace period.
  std::vector<std::pair<std::string, Timestamp>> advance(Timestamp now) {
    std::vector<std::pair<std::string, Timestamp>> fired;
    for (auto& [id, e] : entries_) {
      if (!e.next_due || *e.next_due > now) continue;
      if (now - *e.next_due <= kMissedFireGrace) fired.emplace_back(id, *e.next_due);
      e.next_due = next_fire(e.schedule, now);
    }
    return fired;
  }

 private:
  struct Entry {
    Schedule schedule;
    std::optional<Timestamp> next_due;
  };

  void check_target(const ScheduleTarget& target) const {
    if (target.type == ScheduleTarget::Type::Device && !registry_.has_device(target.id)) {
      throw Error(Errc::UnknownDevice, "no device '" + target.id + "'", "target.id");
    }
    if (target.type == ScheduleTarget::Type::Group && !registry_.has_group(target.id)) {
      throw Error(Errc::UnknownGroup, "no group '" + target.id + "'", "target.id");
    }
  }

  Store& store_;
  const DeviceRegistry& registry_;
  IdAllocator ids_;
  std::string default_zone_;
  std::map<std::string, Entry> entries_;
};

}  // namespace smstrack
