#pragma once

// Deterministic virtual fleet. One event loop advances a ManualClock through
// the tracker service; every random draw comes from per-locator generators
// seeded from the scenario seed, so a (config, seed) pair always produces the
// same event log byte for byte.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "smstrack/energy.hpp"
#include "smstrack/error.hpp"
#include "smstrack/gateway.hpp"
#include "smstrack/service.hpp"
#include "smstrack/sms_codec.hpp"
#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack::sim {

inline constexpr double kEarthRadiusM = 6371008.8;
inline constexpr double kPi = 3.14159265358979323846;

/// mt19937_64 with hand-written transforms: the standard distributions are
/// implementation-defined, these are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal (Box-Muller, one value per call).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

// ---- error and latency models ----------------------------------------------

/// Two-component Rayleigh mixture of horizontal error: with probability p the
/// radius has scale sigma1, otherwise sigma2.
struct ErrorModel {
  double sigma1_m = 2.6388652106659305;
  double sigma2_m = 10.555460842663722;
  double p = 0.8929855811494468;

  void validate() const {
    if (!(sigma1_m >= 0) || !(sigma2_m >= 0)) throw Error(Errc::ConfigError, "error sigmas must be >= 0", "error");
    if (!(p >= 0 && p <= 1)) throw Error(Errc::ConfigError, "error mixture weight must be in [0, 1]", "error.p");
  }

  /// Analytic P(r <= radius).
  double cdf(double radius) const {
    auto rayleigh = [&](double s) { return s <= 0 ? 1.0 : 1.0 - std::exp(-radius * radius / (2 * s * s)); };
    return p * rayleigh(sigma1_m) + (1 - p) * rayleigh(sigma2_m);
  }
};

struct Offset {
  double dx_m = 0;  // east
  double dy_m = 0;  // north
  double radius() const { return std::hypot(dx_m, dy_m); }
};

inline Offset sample_radial_error(const ErrorModel& m, Rng& rng) {
  const double sigma = rng.uniform() < m.p ? m.sigma1_m : m.sigma2_m;
  const double r = sigma * std::sqrt(-2.0 * std::log(1.0 - rng.uniform()));
  const double theta = 2.0 * kPi * rng.uniform();
  return {r * std::cos(theta), r * std::sin(theta)};
}

/// Moves (lat, lon) by a metric offset using the local scale at that latitude.
inline std::pair<double, double> apply_offset(double lat, double lon, const Offset& o) {
  const double dlat = o.dy_m / kEarthRadiusM * 180.0 / kPi;
  const double dlon = o.dx_m / (kEarthRadiusM * std::cos(lat * kPi / 180.0)) * 180.0 / kPi;
  return {std::clamp(lat + dlat, -90.0, 90.0), std::remainder(lon + dlon, 360.0)};
}

inline double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  const double r = kPi / 180.0;
  const double dlat = (lat2 - lat1) * r;
  const double dlon = (lon2 - lon1) * r;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * r) * std::cos(lat2 * r) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

/// Truncated normal response latency in seconds.
struct LatencyModel {
  double mean_s = 36.6;
  double spread_s = 6.15;
  double min_s = 10;
  double max_s = 170;

  void validate() const {
    if (!(min_s >= 0) || !(min_s <= max_s)) throw Error(Errc::ConfigError, "latency needs 0 <= min_s <= max_s", "latency");
    if (!(spread_s >= 0)) throw Error(Errc::ConfigError, "latency spread_s must be >= 0", "latency.spread_s");
    if (!std::isfinite(mean_s)) throw Error(Errc::ConfigError, "latency mean_s must be finite", "latency.mean_s");
  }

  double sample(Rng& rng) const {
    if (spread_s > 0) {
      for (int i = 0; i < 64; ++i) {
        const double x = mean_s + spread_s * rng.normal();
        if (x >= min_s && x <= max_s) return x;
      }
    }
    return std::clamp(mean_s, min_s, max_s);
  }
};

// ---- routes -----------------------------------------------------------------

/// A stop on the route: the locator waits dwell_s there, then drives to the
/// next waypoint at speed_kmh.
struct Waypoint {
  double lat = 0;
  double lon = 0;
  double dwell_s = 0;
  double speed_kmh = 0;
};

struct RoutePoint {
  double lat = 0;
  double lon = 0;
  double speed_kmh = 0;
};

/// Position as a pure function of time since the route started. Without
/// `loop` the locator stays at the last waypoint once it arrives.
class Route {
 public:
  Route() = default;
  Route(std::vector<Waypoint> waypoints, bool loop) : waypoints_(std::move(waypoints)), loop_(loop) {
    if (waypoints_.empty()) throw Error(Errc::ConfigError, "route needs at least one waypoint", "route");
    for (std::size_t i = 0; i < waypoints_.size(); ++i) {
      const auto& w = waypoints_[i];
      if (!codec::latitude_in_range(w.lat) || !codec::longitude_in_range(w.lon)) {
        throw Error(Errc::ConfigError, "waypoint " + std::to_string(i) + " is out of range", "route");
      }
      if (!(w.dwell_s >= 0)) throw Error(Errc::ConfigError, "dwell_s must be >= 0", "route");
      const bool has_leg = i + 1 < waypoints_.size() || (loop_ && waypoints_.size() > 1);
      if (has_leg && !(w.speed_kmh > 0)) {
        throw Error(Errc::ConfigError, "waypoint " + std::to_string(i) + " needs speed_kmh > 0 to reach the next", "route");
      }
    }
    build();
  }

  bool stationary() const { return waypoints_.size() == 1; }
  const std::vector<Waypoint>& waypoints() const { return waypoints_; }

  RoutePoint at(Duration since_start) const {
    double t = std::max(0.0, to_seconds(since_start));
    if (loop_ && period_s_ > 0) t = std::fmod(t, period_s_);
    for (const auto& seg : segments_) {
      if (t >= seg.t0 + seg.duration) continue;
      const double f = seg.duration > 0 ? (t - seg.t0) / seg.duration : 0.0;
      const auto& a = waypoints_[seg.from];
      const auto& b = waypoints_[seg.to];
      if (seg.from == seg.to) return {a.lat, a.lon, 0};
      return {a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon), a.speed_kmh};
    }
    const auto& last = loop_ ? waypoints_.front() : waypoints_.back();
    return {last.lat, last.lon, 0};
  }

 private:
  struct Segment {
    double t0;
    double duration;
    std::size_t from;
    std::size_t to;
  };

  void build() {
    double t = 0;
    const std::size_t n = waypoints_.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& w = waypoints_[i];
      segments_.push_back({t, w.dwell_s, i, i});
      t += w.dwell_s;
      const bool last = i + 1 == n;
      if (last && !(loop_ && n > 1)) break;
      const std::size_t j = last ? 0 : i + 1;
      const double km = haversine_m(w.lat, w.lon, waypoints_[j].lat, waypoints_[j].lon) / 1000.0;
      const double secs = km / w.speed_kmh * 3600.0;
      segments_.push_back({t, secs, i, j});
      t += secs;
    }
    period_s_ = t;
  }

  std::vector<Waypoint> waypoints_;
  bool loop_ = false;
  std::vector<Segment> segments_;
  double period_s_ = 0;
};

// ---- virtual locator --------------------------------------------------------

struct LocatorSpec {
  std::string label;
  std::string imei;
  std::string phone_number;
  std::string password = "123456";
  double capacity_mah = kDefaultBatteryCapacityMah;
  Route route;
  double fix_success_prob = 0.95;
  double incomplete_prob = 0.02;
  LatencyModel latency;
  ErrorModel error;
};

/// A reply on its way back to the server.
struct PendingReply {
  std::string from;
  std::string body;
  Timestamp deliver_at;
  double latency_s = 0;
  codec::MessageKind kind = codec::MessageKind::Fix;
};

/// Battery-powered locator: idle draw runs continuously, each locate command
/// costs a fixed charge, and at zero charge it goes silent.
class VirtualLocator {
 public:
  VirtualLocator(LocatorSpec spec, const energy::BatteryModel& model, Timestamp start, std::uint64_t seed,
                 std::uint64_t stream)
      : spec_(std::move(spec)),
        idle_mah_per_min_(model.idle_mah_per_minute()),
        per_request_mah_(model.per_request_mah),
        remaining_mah_(spec_.capacity_mah),
        start_(start),
        last_update_(start),
        rng_(seed, stream) {
    // The locator leaves the depot with a cached fix of its starting point.
    const auto p = spec_.route.at(Duration{0});
    last_fix_ = {p.lat, p.lon};
  }

  const LocatorSpec& spec() const { return spec_; }
  double remaining_mah() const { return remaining_mah_; }
  bool depleted() const { return depleted_at_.has_value(); }
  std::optional<Timestamp> depleted_at() const { return depleted_at_; }
  std::size_t commands_received() const { return commands_; }
  std::size_t replies_sent() const { return replies_; }

  int battery_percent() const {
    const long pct = std::lround(100.0 * remaining_mah_ / spec_.capacity_mah);
    return static_cast<int>(std::clamp(pct, 0L, 100L));
  }

  RoutePoint true_position(Timestamp t) const { return spec_.route.at(t - start_); }

  /// Instant at which idle draw alone empties the battery.
  std::optional<Timestamp> idle_depletion_time() const {
    if (depleted() || idle_mah_per_min_ <= 0) return std::nullopt;
    const double ms = std::ceil(remaining_mah_ / idle_mah_per_min_ * 60000.0);
    return last_update_ + Duration{static_cast<std::int64_t>(ms)};
  }

  /// Applies idle draw up to t; returns true if the battery emptied.
  bool drain_to(Timestamp t) {
    if (depleted() || t <= last_update_) return false;
    const double cost = idle_mah_per_min_ * to_minutes(t - last_update_);
    if (cost >= remaining_mah_) {
      const double ms = std::ceil(remaining_mah_ / idle_mah_per_min_ * 60000.0);
      depleted_at_ = std::min(t, last_update_ + Duration{static_cast<std::int64_t>(ms)});
      remaining_mah_ = 0;
      last_update_ = t;
      return true;
    }
    remaining_mah_ -= cost;
    last_update_ = t;
    return false;
  }

  /// Handles one locate command received at `now`. Empty when the locator is
  /// (or becomes) depleted: it never answers.
  std::optional<PendingReply> respond_to_locate(Timestamp now) {
    drain_to(now);
    if (depleted()) return std::nullopt;
    ++commands_;
    if (remaining_mah_ <= per_request_mah_) {
      remaining_mah_ = 0;
      depleted_at_ = now;
      return std::nullopt;
    }
    remaining_mah_ -= per_request_mah_;

    const auto truth = true_position(now);
    const bool incomplete = rng_.uniform() < spec_.incomplete_prob;
    const bool got_fix = rng_.uniform() < spec_.fix_success_prob;
    const Offset err = sample_radial_error(spec_.error, rng_);
    const double latency_s = spec_.latency.sample(rng_);

    std::pair<double, double> reported = last_fix_;
    if (got_fix) {
      reported = apply_offset(truth.lat, truth.lon, err);
      last_fix_ = reported;
    }
    PendingReply reply;
    reply.from = spec_.phone_number;
    reply.latency_s = latency_s;
    reply.deliver_at = now + Duration{static_cast<std::int64_t>(std::llround(latency_s * 1000.0))};
    if (incomplete) {
      reply.kind = codec::MessageKind::Incomplete;
      reply.body = codec::canonical_maps_url(reported.first, reported.second);
    } else {
      auto msg = codec::make_fix(reported.first, reported.second, got_fix ? truth.speed_kmh : 0.0, battery_percent(),
                                 spec_.imei, !got_fix);
      msg.speed_kmh = std::round(*msg.speed_kmh * 10.0) / 10.0;
      reply.kind = msg.kind;
      reply.body = codec::format_tracker_response(msg);
    }
    ++replies_;
    return reply;
  }

 private:
  LocatorSpec spec_;
  double idle_mah_per_min_;
  double per_request_mah_;
  double remaining_mah_;
  Timestamp start_;
  Timestamp last_update_;
  Rng rng_;
  std::pair<double, double> last_fix_;
  std::optional<Timestamp> depleted_at_;
  std::size_t commands_ = 0;
  std::size_t replies_ = 0;
};

// ---- scenario ---------------------------------------------------------------

struct GroupSpec {
  std::string name;
  std::vector<std::string> members;  // locator labels
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  // Virtual seconds per wall second; empty runs as fast as possible.
  std::optional<double> clock_acceleration;
  Timestamp start = utc(2024, 1, 1);
  Duration duration = std::chrono::hours(24 * 7);
  std::string timezone = "UTC";
  Duration response_timeout = kDefaultResponseTimeout;
  bool stop_when_depleted = true;
  energy::BatteryModel battery = energy::reference_model();
  std::vector<LocatorSpec> locators;
  std::vector<GroupSpec> groups;
  // Schedule JSON as accepted by the API, with targets naming a locator label
  // ({"locator": "truck-1"}) or a group name ({"group": "fleet"}).
  std::vector<Json> schedules;
};

namespace scenario_detail {

struct Reader {
  std::string origin;

  [[noreturn]] void fail(const std::string& path, const std::string& message) const {
    throw Error(Errc::ConfigError, origin + ": " + path + ": " + message, path);
  }

  const Json& require(const Json& j, const std::string& key, const std::string& path) const {
    if (!j.is_object() || !j.contains(key)) fail(path + "/" + key, "required");
    return j.at(key);
  }

  double number(const Json& j, const std::string& key, const std::string& path, double fallback) const {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number()) fail(path + "/" + key, "must be a number");
    return j[key].get<double>();
  }

  std::string string(const Json& j, const std::string& key, const std::string& path, const std::string& fallback) const {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_string()) fail(path + "/" + key, "must be a string");
    return j[key].get<std::string>();
  }

  /// Runs `f`, re-raising any module error with this location.
  template <typename F>
  auto at(const std::string& path, F&& f) const {
    try {
      return f();
    } catch (const Error& e) {
      if (e.code() == Errc::ConfigError && e.message().rfind(origin + ": ", 0) == 0) throw;
      fail(path, e.message());
    } catch (const Json::exception& e) {
      fail(path, e.what());
    }
  }
};

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

}  // namespace scenario_detail

/// Parses the JSON scenario file. Errors are ConfigError located as
/// "origin:line:col" (syntax) or "origin: /json/pointer" (content).
inline ScenarioConfig parse_scenario(const std::string& text, const std::string& origin = "scenario") {
  using scenario_detail::Reader;
  Reader rd{origin};
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(Errc::ConfigError, origin + ":" + scenario_detail::line_col(text, e.byte ? e.byte - 1 : 0) +
                                       ": invalid JSON (" + e.what() + ")");
  }
  if (!root.is_object()) rd.fail("", "scenario must be a JSON object");

  ScenarioConfig c;
  if (root.contains("seed")) {
    if (!root["seed"].is_number_integer()) rd.fail("/seed", "must be an integer");
    c.seed = root["seed"].get<std::uint64_t>();
  }
  if (root.contains("clock_acceleration") && !root["clock_acceleration"].is_null()) {
    const double f = rd.number(root, "clock_acceleration", "", 1);
    if (!(f >= 1)) rd.fail("/clock_acceleration", "must be >= 1");
    c.clock_acceleration = f;
  }
  if (root.contains("start")) c.start = rd.at("/start", [&] { return parse_time(rd.string(root, "start", "", "")); });
  const double duration_min = rd.number(root, "duration_min", "", to_minutes(c.duration));
  if (!(duration_min > 0)) rd.fail("/duration_min", "must be positive");
  c.duration = Duration{static_cast<std::int64_t>(std::llround(duration_min * 60000.0))};
  c.timezone = rd.string(root, "timezone", "", c.timezone);
  rd.at("/timezone", [&] { return load_zone(c.timezone); });
  const double timeout_s = rd.number(root, "response_timeout_s", "", to_seconds(c.response_timeout));
  if (!(timeout_s > 0)) rd.fail("/response_timeout_s", "must be positive");
  c.response_timeout = Duration{static_cast<std::int64_t>(std::llround(timeout_s * 1000.0))};
  if (root.contains("stop_when_depleted")) {
    if (!root["stop_when_depleted"].is_boolean()) rd.fail("/stop_when_depleted", "must be true or false");
    c.stop_when_depleted = root["stop_when_depleted"].get<bool>();
  }
  if (root.contains("battery_model")) {
    c.battery = rd.at("/battery_model", [&] { return energy::model_from_json(root["battery_model"]); });
  }

  const Json& locators = rd.require(root, "locators", "");
  if (!locators.is_array() || locators.empty()) rd.fail("/locators", "must be a non-empty array");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < locators.size(); ++i) {
    const std::string path = "/locators/" + std::to_string(i);
    const Json& l = locators[i];
    if (!l.is_object()) rd.fail(path, "must be an object");
    LocatorSpec s;
    s.label = rd.string(l, "label", path, "locator-" + std::to_string(i + 1));
    if (!labels.insert(s.label).second) rd.fail(path + "/label", "duplicate label '" + s.label + "'");
    char imei[32], phone[32];
    std::snprintf(imei, sizeof imei, "35%013zu", i + 1);
    std::snprintf(phone, sizeof phone, "+6010%07zu", i + 1);
    s.imei = rd.string(l, "imei", path, imei);
    if (!codec::is_valid_imei(s.imei)) rd.fail(path + "/imei", "must be 15 digits");
    s.phone_number = rd.string(l, "phone_number", path, phone);
    s.password = rd.string(l, "password", path, s.password);
    if (!codec::is_valid_password(s.password)) rd.fail(path + "/password", "must be 6 digits");
    s.capacity_mah = rd.number(l, "capacity_mah", path, c.battery.capacity_mah);
    if (!(s.capacity_mah > 0)) rd.fail(path + "/capacity_mah", "must be positive");
    s.fix_success_prob = rd.number(l, "fix_success_prob", path, s.fix_success_prob);
    if (!(s.fix_success_prob >= 0 && s.fix_success_prob <= 1)) rd.fail(path + "/fix_success_prob", "must be in [0, 1]");
    s.incomplete_prob = rd.number(l, "incomplete_prob", path, s.incomplete_prob);
    if (!(s.incomplete_prob >= 0 && s.incomplete_prob <= 1)) rd.fail(path + "/incomplete_prob", "must be in [0, 1]");
    if (l.contains("latency")) {
      const Json& j = l["latency"];
      const std::string p = path + "/latency";
      s.latency = {rd.number(j, "mean_s", p, s.latency.mean_s), rd.number(j, "spread_s", p, s.latency.spread_s),
                   rd.number(j, "min_s", p, s.latency.min_s), rd.number(j, "max_s", p, s.latency.max_s)};
      rd.at(p, [&] { s.latency.validate(); return 0; });
    }
    if (l.contains("error")) {
      const Json& j = l["error"];
      const std::string p = path + "/error";
      s.error = {rd.number(j, "sigma1_m", p, s.error.sigma1_m), rd.number(j, "sigma2_m", p, s.error.sigma2_m),
                 rd.number(j, "p", p, s.error.p)};
      rd.at(p, [&] { s.error.validate(); return 0; });
    }
    const Json& route = rd.require(l, "route", path);
    if (!route.is_array()) rd.fail(path + "/route", "must be an array of waypoints");
    std::vector<Waypoint> wps;
    for (std::size_t k = 0; k < route.size(); ++k) {
      const std::string wp = path + "/route/" + std::to_string(k);
      const Json& w = route[k];
      rd.require(w, "lat", wp);
      rd.require(w, "lon", wp);
      wps.push_back({rd.number(w, "lat", wp, 0), rd.number(w, "lon", wp, 0), rd.number(w, "dwell_s", wp, 0),
                     rd.number(w, "speed_kmh", wp, 0)});
    }
    const bool loop = l.contains("loop") && l["loop"].is_boolean() && l["loop"].get<bool>();
    s.route = rd.at(path + "/route", [&] { return Route(std::move(wps), loop); });
    c.locators.push_back(std::move(s));
  }

  if (root.contains("groups")) {
    const Json& groups = root["groups"];
    if (!groups.is_array()) rd.fail("/groups", "must be an array");
    for (std::size_t i = 0; i < groups.size(); ++i) {
      const std::string path = "/groups/" + std::to_string(i);
      GroupSpec g;
      const Json& name = rd.require(groups[i], "name", path);
      if (!name.is_string() || name.get<std::string>().empty()) rd.fail(path + "/name", "must be a non-empty string");
      g.name = name.get<std::string>();
      const Json& members = rd.require(groups[i], "members", path);
      if (!members.is_array()) rd.fail(path + "/members", "must be an array of locator labels");
      for (const auto& m : members) {
        if (!m.is_string() || !labels.count(m.get<std::string>())) {
          rd.fail(path + "/members", "unknown locator " + m.dump());
        }
        g.members.push_back(m.get<std::string>());
      }
      c.groups.push_back(std::move(g));
    }
  }

  if (root.contains("schedules")) {
    const Json& schedules = root["schedules"];
    if (!schedules.is_array()) rd.fail("/schedules", "must be an array");
    for (std::size_t i = 0; i < schedules.size(); ++i) {
      const std::string path = "/schedules/" + std::to_string(i);
      const Json& s = schedules[i];
      const Json& target = rd.require(s, "target", path);
      const bool named = target.is_object() && (target.contains("locator") || target.contains("group"));
      if (!named) rd.fail(path + "/target", "must name a locator label or a group");
      if (target.contains("locator") && !labels.count(target.value("locator", ""))) {
        rd.fail(path + "/target", "unknown locator " + target["locator"].dump());
      }
      if (target.contains("group")) {
        const auto name = target.value("group", "");
        const bool known = std::any_of(c.groups.begin(), c.groups.end(), [&](const auto& g) { return g.name == name; });
        if (!known) rd.fail(path + "/target", "unknown group " + target["group"].dump());
      }
      // Validate the rest against the schedule grammar with a placeholder target.
      Json probe = s;
      probe["target"] = "dev-00000000";
      rd.at(path, [&] { return schedule_from_json(probe, c.timezone, c.start); });
      c.schedules.push_back(s);
    }
  }
  return c;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot read scenario file " + path.string(), "scenario");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path.string());
}

/// One simulation run over a caller-owned store (normally empty).
class Simulation {
 public:
  Simulation(ScenarioConfig config, Store& store)
      : config_(std::move(config)),
        clock_(config_.start),
        service_(store, transport_, clock_, ServiceOptions{config_.timezone, config_.response_timeout}) {
    service_.events().set_sink([this](const Event& e) {
      record(e.time, "service", e.type, e.data, e.seq);
      if (e.type == event_type::kJobStateChanged && e.data.value("state", "") == "completed" &&
          e.data["latency_s"].is_number()) {
        latencies_[e.data.value("device_id", "")].push_back(e.data["latency_s"].get<double>());
      }
    });
    setup();
  }

  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  ~Simulation() { service_.events().set_sink(nullptr); }

  TrackerService& service() { return service_; }
  ManualClock& clock() { return clock_; }
  const ScenarioConfig& config() const { return config_; }
  Timestamp end() const { return config_.start + config_.duration; }
  const std::vector<VirtualLocator>& locators() const { return locators_; }
  const std::string& device_id(std::size_t i) const { return device_ids_.at(i); }
  const std::vector<std::string>& log() const { return log_; }
  bool finished() const { return finished_; }

  /// Called with every log line as it is produced.
  void set_log_sink(std::function<void(const std::string&)> sink) { log_sink_ = std::move(sink); }

  /// Processes the next event instant. Returns false once the run is over.
  bool step() {
    if (finished_) return false;
    const auto next = next_event_time();
    if (!next || *next > end()) {
      finish(end());
      return false;
    }
    pace(*next);
    const Timestamp now = *next;
    clock_.set(now);
    drain_all(now);
    while (!pending_.empty() && pending_.top().reply.deliver_at <= now) {
      const auto reply = pending_.top().reply;
      pending_.pop();
      transport_.inject(InboundSms{reply.from, reply.body, reply.deliver_at});
    }
    service_.tick(now);
    for (const auto& out : transport_.take_outbox()) handle_command(out, now);
    if (config_.stop_when_depleted && all_depleted()) {
      finish(now);
      return false;
    }
    return true;
  }

  void run() {
    while (step()) {
    }
  }

  /// Runs until the next event would pass `t`.
  void run_until(Timestamp t) {
    while (!finished_) {
      const auto next = next_event_time();
      if (!next || *next > t) break;
      step();
    }
  }

  Json summary() const {
    Json locs = Json::array();
    std::vector<double> all;
    for (std::size_t i = 0; i < locators_.size(); ++i) {
      const auto& l = locators_[i];
      const auto it = latencies_.find(device_ids_[i]);
      const std::vector<double> lat = it == latencies_.end() ? std::vector<double>{} : it->second;
      all.insert(all.end(), lat.begin(), lat.end());
      locs.push_back(Json{
          {"label", l.spec().label},
          {"device_id", device_ids_[i]},
          {"depleted_at", l.depleted_at() ? Json(format_time(*l.depleted_at())) : Json(nullptr)},
          {"depletion_min", l.depleted_at() ? Json(to_minutes(*l.depleted_at() - config_.start)) : Json(nullptr)},
          {"remaining_mah", l.remaining_mah()},
          {"commands_received", l.commands_received()},
          {"replies_sent", l.replies_sent()},
          {"latencies_s", lat},
          {"mean_latency_s", lat.empty() ? Json(nullptr) : Json(mean(lat))}});
    }
    return Json{{"seed", config_.seed},
                {"start", format_time(config_.start)},
                {"end", format_time(finished_at_.value_or(clock_.now()))},
                {"virtual_minutes", to_minutes(finished_at_.value_or(clock_.now()) - config_.start)},
                {"jobs", {{"completed", completed_}, {"timed_out", timed_out_}}},
                {"latency", {{"count", all.size()}, {"mean_s", all.empty() ? Json(nullptr) : Json(mean(all))}}},
                {"locators", locs}};
  }

 private:
  struct Queued {
    PendingReply reply;
    std::uint64_t seq;
    bool operator>(const Queued& o) const {
      return reply.deliver_at != o.reply.deliver_at ? reply.deliver_at > o.reply.deliver_at : seq > o.seq;
    }
  };

  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  void setup() {
    config_.battery.validate();
    std::map<std::string, std::string> by_label;
    for (std::size_t i = 0; i < config_.locators.size(); ++i) {
      const auto& spec = config_.locators[i];
      const auto d = service_.register_device(spec.imei, spec.phone_number, spec.password, spec.capacity_mah, spec.label);
      device_ids_.push_back(d.device_id);
      by_label[spec.label] = d.device_id;
      by_phone_[spec.phone_number] = i;
      locators_.emplace_back(spec, config_.battery, config_.start, config_.seed, i + 1);
    }
    std::map<std::string, std::string> by_group;
    for (const auto& g : config_.groups) {
      std::set<std::string> members;
      for (const auto& m : g.members) members.insert(by_label.at(m));
      by_group[g.name] = service_.create_group(g.name, members).group_id;
    }
    for (const auto& s : config_.schedules) {
      Json body = s;
      const Json& t = s["target"];
      if (t.contains("locator")) body["target"] = {{"type", "device"}, {"id", by_label.at(t["locator"].get<std::string>())}};
      else body["target"] = {{"type", "group"}, {"id", by_group.at(t["group"].get<std::string>())}};
      service_.create_schedule(body);
    }
  }

  std::optional<Timestamp> next_event_time() const {
    std::optional<Timestamp> next = service_.next_wakeup();
    auto consider = [&](std::optional<Timestamp> t) {
      if (t && (!next || *t < *next)) next = t;
    };
    if (!pending_.empty()) consider(pending_.top().reply.deliver_at);
    for (const auto& l : locators_) consider(l.idle_depletion_time());
    return next;
  }

  void drain_all(Timestamp now) {
    for (auto& l : locators_) {
      if (l.drain_to(now)) log_depleted(l);
    }
  }

  void handle_command(const OutboundSms& out, Timestamp now) {
    const auto it = by_phone_.find(out.to);
    if (it == by_phone_.end()) return;
    auto& l = locators_[it->second];
    const bool was_depleted = l.depleted();
    auto reply = l.respond_to_locate(now);
    if (!was_depleted && l.depleted()) log_depleted(l);
    if (!reply) {
      record(now, "sim", "locator_silent", Json{{"locator", l.spec().label}, {"job_id", out.correlation}});
      return;
    }
    record(now, "sim", "locator_replied",
           Json{{"locator", l.spec().label},
                {"job_id", out.correlation},
                {"kind", codec::kind_name(reply->kind)},
                {"latency_s", reply->latency_s},
                {"deliver_at", format_time(reply->deliver_at)},
                {"battery_mah", l.remaining_mah()}});
    pending_.push(Queued{std::move(*reply), ++queue_seq_});
  }

  void log_depleted(const VirtualLocator& l) {
    record(*l.depleted_at(), "sim", "locator_depleted",
           Json{{"locator", l.spec().label},
                {"minutes", to_minutes(*l.depleted_at() - config_.start)},
                {"commands_received", l.commands_received()}});
  }

  bool all_depleted() const {
    return std::all_of(locators_.begin(), locators_.end(), [](const auto& l) { return l.depleted(); });
  }

  void finish(Timestamp at) {
    if (finished_) return;
    const Timestamp t = std::min(at, end());
    clock_.set(t);
    drain_all(t);
    finished_ = true;
    finished_at_ = t;
    record(t, "sim", "run_finished", Json{{"virtual_minutes", to_minutes(t - config_.start)}});
  }

  void pace(Timestamp next) {
    if (!config_.clock_acceleration) return;
    const auto virtual_step = std::chrono::duration<double, std::milli>(next - clock_.now());
    const auto wall = virtual_step / *config_.clock_acceleration;
    if (wall.count() > 0) std::this_thread::sleep_for(wall);
  }

  void record(Timestamp t, const char* source, const std::string& type, const Json& data, std::uint64_t seq = 0) {
    if (type == event_type::kJobStateChanged) {
      const auto state = data.value("state", "");
      if (state == "completed") ++completed_;
      if (state == "timed_out") ++timed_out_;
    }
    Json line{{"t", format_time(t)}, {"source", source}, {"type", type}, {"data", data}};
    if (seq) line["seq"] = seq;
    log_.push_back(line.dump());
    if (log_sink_) log_sink_(log_.back());
  }

  ScenarioConfig config_;
  ManualClock clock_;
  LoopbackTransport transport_;
  TrackerService service_;
  std::vector<VirtualLocator> locators_;
  std::vector<std::string> device_ids_;
  std::map<std::string, std::size_t> by_phone_;
  std::priority_queue<Queued, std::vector<Queued>, std::greater<>> pending_;
  std::uint64_t queue_seq_ = 0;
  std::map<std::string, std::vector<double>> latencies_;
  std::vector<std::string> log_;
  std::function<void(const std::string&)> log_sink_;
  std::size_t completed_ = 0;
  std::size_t timed_out_ = 0;
  bool finished_ = false;
  std::optional<Timestamp> finished_at_;
};

struct ScenarioResult {
  std::vector<std::string> log;
  Json summary;
};

/// Runs the whole scenario on `store`.
inline ScenarioResult run_scenario(const ScenarioConfig& config, Store& store) {
  Simulation sim(config, store);
  sim.run();
  return {sim.log(), sim.summary()};
}

/// Writes events.jsonl, summary.json and snapshot.tar into `dir`.
inline void write_outputs(const std::filesystem::path& dir, const ScenarioResult& result, const Store& store) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "events.jsonl", std::ios::binary | std::ios::trunc);
    for (const auto& line : result.log) out << line << '\n';
    if (!out) throw Error(Errc::CorruptStore, "cannot write " + (dir / "events.jsonl").string());
  }
  {
    std::ofstream out(dir / "summary.json", std::ios::binary | std::ios::trunc);
    out << result.summary.dump(2) << '\n';
    if (!out) throw Error(Errc::CorruptStore, "cannot write " + (dir / "summary.json").string());
  }
  store.snapshot_export(dir / "snapshot.tar");
}

}  // namespace smstrack::sim
