#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/scheduler.hpp"
#include "smstrack/time.hpp"

namespace smstrack::energy {

/// Continuous idle draw plus a fixed charge per locate/response cycle.
///
/// With a request every `interval` minutes the locator lasts
///     capacity / (idle_draw/60 + per_request_charge/interval)   minutes,
/// which rises monotonically with the interval towards capacity / (idle_draw/60).
struct BatteryModel {
  double capacity_mah = 850.0;
  double idle_draw_ma = 0.0;
  double per_request_mah = 0.0;

  double idle_mah_per_minute() const { return idle_draw_ma / 60.0; }
  double idle_only_lifetime_minutes() const { return capacity_mah / idle_mah_per_minute(); }

  void validate() const {
    if (!(capacity_mah > 0) || !(idle_draw_ma > 0) || !(per_request_mah > 0)) {
      throw Error(Errc::Validation, "battery model parameters must all be positive");
    }
  }

  friend bool operator==(const BatteryModel&, const BatteryModel&) = default;
};

struct LifetimePoint {
  double interval_minutes;
  double lifetime_minutes;
};

/// Least-squares fit of  lifetime*idle_rate + (lifetime/interval)*per_request = capacity.
/// Two points with distinct intervals give the exact solution.
inline BatteryModel fit_battery_model(const std::vector<LifetimePoint>& points, double capacity_mah) {
  if (!(capacity_mah > 0)) throw Error(Errc::PreconditionViolated, "capacity must be positive", "capacity");
  std::map<double, int> distinct;
  for (const auto& p : points) {
    if (!(p.interval_minutes > 0) || !(p.lifetime_minutes > 0)) {
      throw Error(Errc::PreconditionViolated, "intervals and lifetimes must be positive", "points");
    }
    distinct[p.interval_minutes]++;
  }
  if (points.size() < 2 || distinct.size() < 2) {
    throw Error(Errc::PreconditionViolated, "need at least two points with distinct intervals", "points");
  }
  // Normal equations A^T A x = A^T b with rows (L, L/I) and b = capacity.
  double s11 = 0, s12 = 0, s22 = 0, r1 = 0, r2 = 0;
  for (const auto& p : points) {
    const double a1 = p.lifetime_minutes;
    const double a2 = p.lifetime_minutes / p.interval_minutes;
    s11 += a1 * a1;
    s12 += a1 * a2;
    s22 += a2 * a2;
    r1 += a1 * capacity_mah;
    r2 += a2 * capacity_mah;
  }
  const double det = s11 * s22 - s12 * s12;
  if (std::abs(det) <= 1e-12 * s11 * s22) throw Error(Errc::DegenerateFit, "points do not determine the model");
  const double idle_rate = (r1 * s22 - r2 * s12) / det;
  const double per_request = (s11 * r2 - s12 * r1) / det;
  if (!(idle_rate > 0) || !(per_request > 0)) {
    throw Error(Errc::DegenerateFit, "fit forces a non-positive parameter (idle " + std::to_string(idle_rate) +
                                         " mAh/min, per-request " + std::to_string(per_request) + " mAh)");
  }
  return BatteryModel{capacity_mah, idle_rate * 60.0, per_request};
}

inline double predict_lifetime(const BatteryModel& model, double interval_minutes) {
  if (!(interval_minutes >= 1.0)) throw Error(Errc::PreconditionViolated, "interval must be at least 1 minute", "interval");
  return model.capacity_mah / (model.idle_mah_per_minute() + model.per_request_mah / interval_minutes);
}

/// Drains the battery day by day against the schedule's actual fire instants
/// (activation window included), starting at `start`. Returns minutes.
inline double predict_lifetime_for_schedule(const BatteryModel& model, const Schedule& schedule, Timestamp start) {
  model.validate();
  const double idle = model.idle_mah_per_minute();
  double remaining = model.capacity_mah;
  Timestamp day_start = start;
  const Duration day = std::chrono::hours(24);
  while (true) {
    const auto instants = fire_instants(schedule, day_start, day_start + day);
    const double day_cost = idle * 1440.0 + model.per_request_mah * static_cast<double>(instants.size());
    if (day_cost < remaining) {
      remaining -= day_cost;
      day_start += day;
      continue;
    }
    Timestamp prev = day_start;
    for (const auto t : instants) {
      const double idle_cost = idle * to_minutes(t - prev);
      if (idle_cost >= remaining) return to_minutes(prev - start) + remaining / idle;
      remaining -= idle_cost + model.per_request_mah;
      if (remaining <= 0) return to_minutes(t - start);
      prev = t;
    }
    return to_minutes(prev - start) + remaining / idle;
  }
}

inline std::string format_model(const BatteryModel& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "capacity_mah=%.17g\nidle_draw_ma=%.17g\nper_request_mah=%.17g\n", m.capacity_mah,
                m.idle_draw_ma, m.per_request_mah);
  return buf;
}

/// Parses the three-field `key=value` model file.
inline BatteryModel parse_model(const std::string& text) {
  BatteryModel m{0, 0, 0};
  int seen = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw Error(Errc::Validation, "model line without '=': " + line);
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    double v = 0;
    try {
      std::size_t used = 0;
      v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw Error(Errc::Validation, "bad number for " + key, key);
    }
    if (key == "capacity_mah") m.capacity_mah = v;
    else if (key == "idle_draw_ma") m.idle_draw_ma = v;
    else if (key == "per_request_mah") m.per_request_mah = v;
    else throw Error(Errc::Validation, "unknown model key '" + key + "'", key);
    ++seen;
  }
  if (seen < 3) throw Error(Errc::Validation, "model file needs capacity_mah, idle_draw_ma and per_request_mah");
  m.validate();
  return m;
}

inline Json to_json(const BatteryModel& m) {
  return Json{{"capacity_mah", m.capacity_mah}, {"idle_draw_ma", m.idle_draw_ma}, {"per_request_mah", m.per_request_mah}};
}

inline BatteryModel model_from_json(const Json& j) {
  BatteryModel m{j.at("capacity_mah").get<double>(), j.at("idle_draw_ma").get<double>(),
                 j.at("per_request_mah").get<double>()};
  m.validate();
  return m;
}

/// Model calibrated on the measured endpoints: 715 min at one request per
/// minute and 3637 min at one request every 20 minutes, 850 mAh.
inline BatteryModel reference_model() { return fit_battery_model({{1, 715}, {20, 3637}}, 850.0); }

}  // namespace smstrack::energy
