#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/ids.hpp"
#include "smstrack/registry.hpp"
#include "smstrack/sms_codec.hpp"
#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

enum class FixQuality { Fresh, Stale, Salvaged };

inline std::string_view quality_name(FixQuality q) {
  switch (q) {
    case FixQuality::Fresh: return "fresh";
    case FixQuality::Stale: return "stale";
    case FixQuality::Salvaged: return "salvaged";
  }
  return "fresh";
}

inline FixQuality quality_from_name(std::string_view s) {
  if (s == "stale") return FixQuality::Stale;
  if (s == "salvaged") return FixQuality::Salvaged;
  return FixQuality::Fresh;
}

struct Position {
  std::string position_id;
  std::string device_id;
  double latitude = 0;
  double longitude = 0;
  std::optional<double> speed_kmh;
  std::optional<int> battery_percent;
  FixQuality fix_quality = FixQuality::Fresh;
  // Stale fix at the same coordinates as the previous stale fix.
  bool repeat = false;
  std::optional<Timestamp> device_time;
  Timestamp server_time;
  std::string source_message_id;

  friend bool operator==(const Position&, const Position&) = default;
};

inline Json to_json(const Position& p) {
  Json j{{"position_id", p.position_id},
         {"device_id", p.device_id},
         {"latitude", p.latitude},
         {"longitude", p.longitude},
         {"speed_kmh", p.speed_kmh ? Json(*p.speed_kmh) : Json(nullptr)},
         {"battery_percent", p.battery_percent ? Json(*p.battery_percent) : Json(nullptr)},
         {"fix_quality", quality_name(p.fix_quality)},
         {"repeat", p.repeat},
         {"device_time", p.device_time ? Json(format_time(*p.device_time)) : Json(nullptr)},
         {"server_time", unix_millis(p.server_time)},
         {"source_message_id", p.source_message_id}};
  return j;
}

inline Position position_from_json(const Json& j) {
  Position p;
  p.position_id = j.at("position_id").get<std::string>();
  p.device_id = j.at("device_id").get<std::string>();
  p.latitude = j.at("latitude").get<double>();
  p.longitude = j.at("longitude").get<double>();
  if (!j["speed_kmh"].is_null()) p.speed_kmh = j["speed_kmh"].get<double>();
  if (!j["battery_percent"].is_null()) p.battery_percent = j["battery_percent"].get<int>();
  p.fix_quality = quality_from_name(j.at("fix_quality").get<std::string>());
  p.repeat = j.value("repeat", false);
  if (!j["device_time"].is_null()) p.device_time = parse_time(j["device_time"].get<std::string>());
  p.server_time = from_unix_millis(j.at("server_time").get<std::int64_t>());
  p.source_message_id = j.at("source_message_id").get<std::string>();
  return p;
}

/// Human-facing form: server_time as ISO-8601.
inline Json to_api_json(const Position& p) {
  Json j = to_json(p);
  j["server_time"] = format_time(p.server_time);
  return j;
}

/// Exclusive pagination cursor "<server_time_ms>:<position_id>".
struct TrackCursor {
  std::int64_t server_time_ms = 0;
  std::string position_id;

  std::string encode() const { return std::to_string(server_time_ms) + ":" + position_id; }
  static TrackCursor decode(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw Error(Errc::Validation, "bad cursor", "cursor");
    try {
      return TrackCursor{std::stoll(s.substr(0, colon)), s.substr(colon + 1)};
    } catch (const std::exception&) {
      throw Error(Errc::Validation, "bad cursor", "cursor");
    }
  }
};

struct TrackPage {
  std::vector<Position> positions;
  std::optional<TrackCursor> next;
};

enum class ExportFormat { Csv, GeoJson };

inline ExportFormat export_format_from_name(const std::string& s) {
  if (s == "csv") return ExportFormat::Csv;
  if (s == "geojson") return ExportFormat::GeoJson;
  throw Error(Errc::Validation, "format must be csv or geojson", "format");
}

/// Turns decoded tracker messages into stored positions and serves tracks.
class PositionPipeline {
 public:
  PositionPipeline(Store& store, const DeviceRegistry& registry) : store_(store), registry_(registry), ids_(store) {
    for (const auto& [id, rec] : store_.scan(ns::kPositions)) {
      const auto& msg = rec.at("source_message_id").get_ref<const std::string&>();
      by_message_[msg] = id;
    }
  }

  /// Stores a position for Fix, LastKnownFix, and salvageable Incomplete
  /// messages. Re-ingesting the same source_message_id returns the original
  /// position and writes nothing.
  std::optional<Position> ingest(const std::string& device_id, const codec::TrackerMessage& msg, Timestamp server_time,
                                 const std::string& source_message_id) {
    if (!registry_.has_device(device_id)) throw Error(Errc::UnknownDevice, "no device '" + device_id + "'", "device_id");
    if (auto it = by_message_.find(source_message_id); it != by_message_.end()) {
      if (auto rec = store_.get(ns::kPositions, it->second)) return position_from_json(*rec);
    }
    if (!msg.has_position()) return std::nullopt;
    if (!codec::latitude_in_range(*msg.latitude) || !codec::longitude_in_range(*msg.longitude)) return std::nullopt;

    Position p;
    switch (msg.kind) {
      case codec::MessageKind::Fix: p.fix_quality = FixQuality::Fresh; break;
      case codec::MessageKind::LastKnownFix: p.fix_quality = FixQuality::Stale; break;
      case codec::MessageKind::Incomplete: p.fix_quality = FixQuality::Salvaged; break;
      case codec::MessageKind::Unrecognized: return std::nullopt;
    }
    p.device_id = device_id;
    p.latitude = *msg.latitude;
    p.longitude = *msg.longitude;
    p.speed_kmh = msg.speed_kmh;
    p.battery_percent = msg.battery_percent;
    p.device_time = msg.device_timestamp;
    p.source_message_id = source_message_id;
    p.server_time = server_time;

    const auto last = store_.last_position(device_id);
    if (last) {
      const Position prev = position_from_json(*last);
      // Tracks are ordered by server time, which must strictly increase.
      if (p.server_time <= prev.server_time) p.server_time = prev.server_time + Duration{1};
      p.repeat = p.fix_quality == FixQuality::Stale && prev.fix_quality == FixQuality::Stale &&
                 prev.latitude == p.latitude && prev.longitude == p.longitude;
    }

    WriteBatch batch;
    p.position_id = ids_.next("pos", batch);
    batch.put(ns::kPositions, p.position_id, to_json(p));
    store_.commit(batch);
    by_message_[source_message_id] = p.position_id;
    return p;
  }

  bool ingested(const std::string& source_message_id) const { return by_message_.count(source_message_id) > 0; }

  TrackPage query_track(const std::string& device_id, Timestamp from, Timestamp to,
                        const std::optional<TrackCursor>& after = std::nullopt, std::size_t limit = 0) const {
    if (!registry_.has_device(device_id)) throw Error(Errc::UnknownDevice, "no device '" + device_id + "'", "device_id");
    if (from > to) throw Error(Errc::PreconditionViolated, "from must not be after to", "from");
    std::optional<std::pair<std::int64_t, std::string>> cursor;
    if (after) cursor = std::pair{after->server_time_ms, after->position_id};
    // Fetch one extra to know whether another page exists.
    const auto recs = store_.scan_positions(device_id, unix_millis(from), unix_millis(to), cursor, limit ? limit + 1 : 0);
    TrackPage page;
    for (const auto& r : recs) page.positions.push_back(position_from_json(r));
    if (limit && page.positions.size() > limit) {
      page.positions.resize(limit);
      const auto& tail = page.positions.back();
      page.next = TrackCursor{unix_millis(tail.server_time), tail.position_id};
    }
    return page;
  }

  std::optional<Position> last_position(const std::string& device_id) const {
    if (auto rec = store_.last_position(device_id)) return position_from_json(*rec);
    return std::nullopt;
  }

  /// Most recent position that carried a battery reading.
  std::optional<Position> last_with_battery(const std::string& device_id) const {
    auto all = store_.scan_positions(device_id, INT64_MIN, INT64_MAX);
    for (auto it = all.rbegin(); it != all.rend(); ++it) {
      if (!(*it)["battery_percent"].is_null()) return position_from_json(*it);
    }
    return std::nullopt;
  }

  std::string export_track(const std::string& device_id, Timestamp from, Timestamp to, ExportFormat format) const {
    const auto track = query_track(device_id, from, to).positions;
    return format == ExportFormat::Csv ? to_csv(track) : to_geojson(track).dump();
  }

  /// Columns: server_time, latitude, longitude, speed, battery_percent, fix_quality.
  static std::string to_csv(const std::vector<Position>& track) {
    std::string out = "server_time,latitude,longitude,speed,battery_percent,fix_quality\n";
    char buf[128];
    for (const auto& p : track) {
      out += format_time(p.server_time);
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f,", p.latitude, p.longitude);
      out += buf;
      if (p.speed_kmh) {
        std::snprintf(buf, sizeof buf, "%.1f", *p.speed_kmh);
        out += buf;
      }
      out += ',';
      if (p.battery_percent) out += std::to_string(*p.battery_percent);
      out += ',';
      out += quality_name(p.fix_quality);
      out += '\n';
    }
    return out;
  }

  /// FeatureCollection: one LineString through the fresh fixes (when there are
  /// at least two), then a Point feature for every position.
  static Json to_geojson(const std::vector<Position>& track) {
    Json features = Json::array();
    Json line = Json::array();
    for (const auto& p : track) {
      if (p.fix_quality == FixQuality::Fresh) line.push_back(Json::array({p.longitude, p.latitude}));
    }
    if (line.size() >= 2) {
      features.push_back(Json{{"type", "Feature"},
                              {"geometry", {{"type", "LineString"}, {"coordinates", line}}},
                              {"properties", {{"kind", "track"}, {"fix_quality", "fresh"}}}});
    }
    for (const auto& p : track) {
      Json props = to_api_json(p);
      props.erase("latitude");
      props.erase("longitude");
      props["kind"] = "fix";
      features.push_back(Json{{"type", "Feature"},
                              {"geometry", {{"type", "Point"}, {"coordinates", Json::array({p.longitude, p.latitude})}}},
                              {"properties", props}});
    }
    return Json{{"type", "FeatureCollection"}, {"features", features}};
  }

 private:
  Store& store_;
  const DeviceRegistry& registry_;
  IdAllocator ids_;
  std::map<std::string, std::string> by_message_;
};

}  // namespace smstrack
