#pragma once

// Wire grammar spoken by the SMS locators.
//
//   command  := "smslink" PASSWORD                      PASSWORD = 6 decimal digits
//   response := ["LAST" SP] field (SP field)* [SP url]
//   field    := "lat:" DEC | "lon:" DEC | "speed:" DEC | "bat:" INT "%" | "id:" IMEI
//             | "time:" YYYY-MM-DDTHH:MM:SSZ
//   url      := "http" ["s"] "://" ... "maps" ... ["q=" DEC "," DEC ...]
//
// See docs/protocol.md for the byte-level description.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/time.hpp"

namespace smstrack::codec {

inline constexpr std::string_view kCommandPrefix = "smslink";
inline constexpr std::string_view kStaleMarker = "LAST";
inline constexpr std::string_view kMapsUrlPrefix = "http://maps.google.com/maps?q=";
inline constexpr std::size_t kMaxSmsLength = 160;

enum class MessageKind { Fix, LastKnownFix, Incomplete, Unrecognized };

inline std::string_view kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::Fix: return "fix";
    case MessageKind::LastKnownFix: return "last_known_fix";
    case MessageKind::Incomplete: return "incomplete";
    case MessageKind::Unrecognized: return "unrecognized";
  }
  return "unrecognized";
}

struct TrackerMessage {
  MessageKind kind = MessageKind::Unrecognized;
  std::optional<double> latitude;
  std::optional<double> longitude;
  std::optional<double> speed_kmh;
  std::optional<int> battery_percent;
  std::optional<std::string> maps_url;
  std::optional<std::string> imei;
  std::optional<Timestamp> device_timestamp;
  // Set for coordinates recovered from a bare maps link.
  bool low_quality = false;
  // Original body; kept for the message log, ignored by equality.
  std::string raw;

  bool has_position() const { return latitude.has_value() && longitude.has_value(); }

  friend bool operator==(const TrackerMessage& a, const TrackerMessage& b) {
    return a.kind == b.kind && a.latitude == b.latitude && a.longitude == b.longitude &&
           a.speed_kmh == b.speed_kmh && a.battery_percent == b.battery_percent && a.maps_url == b.maps_url &&
           a.imei == b.imei && a.device_timestamp == b.device_timestamp && a.low_quality == b.low_quality;
  }
};

inline bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

inline bool is_valid_password(std::string_view pw) { return pw.size() == 6 && all_digits(pw); }
inline bool is_valid_imei(std::string_view imei) { return imei.size() == 15 && all_digits(imei); }
inline bool latitude_in_range(double v) { return std::isfinite(v) && v >= -90.0 && v <= 90.0; }
inline bool longitude_in_range(double v) { return std::isfinite(v) && v >= -180.0 && v <= 180.0; }

inline std::string encode_locate_command(std::string_view password) {
  if (!is_valid_password(password)) {
    throw Error(Errc::InvalidPassword, "password must be exactly six decimal digits", "password");
  }
  std::string body(kCommandPrefix);
  body += password;
  return body;
}

namespace detail {

// Parses a whole token as a decimal number; rejects trailing garbage.
inline std::optional<double> parse_decimal(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::fixed);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Parses the longest decimal prefix; returns value and characters consumed.
inline std::optional<std::pair<double, std::size_t>> parse_decimal_prefix(std::string_view s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::fixed);
  if (ec != std::errc{} || ptr == s.data() || !std::isfinite(v)) return std::nullopt;
  return std::pair{v, static_cast<std::size_t>(ptr - s.data())};
}

inline std::optional<int> parse_battery(std::string_view s) {
  if (s.size() < 2 || s.back() != '%') return std::nullopt;
  s.remove_suffix(1);
  if (!all_digits(s) || s.size() > 3) return std::nullopt;
  int v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  if (v > 100) return std::nullopt;
  return v;
}

inline std::optional<Timestamp> parse_device_time(std::string_view s) {
  absl::Time t;
  std::string err;
  if (!absl::ParseTime("%Y-%m-%dT%H:%M:%SZ", std::string(s), absl::UTCTimeZone(), &t, &err)) return std::nullopt;
  return from_absl(t);
}

inline bool is_maps_url(std::string_view token) {
  const bool http = token.rfind("http://", 0) == 0 || token.rfind("https://", 0) == 0;
  return http && token.find("maps") != std::string_view::npos;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string fixed(double v, int places) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", places, v);
  return buf;
}

}  // namespace detail

/// Extracts "q=<lat>,<lon>" from a maps link. Out-of-range pairs yield nothing.
inline std::optional<std::pair<double, double>> salvage_coordinates_from_url(std::string_view url) {
  const auto q = url.find("q=");
  if (q == std::string_view::npos) return std::nullopt;
  std::string_view rest = url.substr(q + 2);
  const auto lat = detail::parse_decimal_prefix(rest);
  if (!lat) return std::nullopt;
  rest.remove_prefix(lat->second);
  if (rest.empty() || rest.front() != ',') return std::nullopt;
  rest.remove_prefix(1);
  const auto lon = detail::parse_decimal_prefix(rest);
  if (!lon) return std::nullopt;
  if (!latitude_in_range(lat->first) || !longitude_in_range(lon->first)) return std::nullopt;
  return std::pair{lat->first, lon->first};
}

inline std::string canonical_maps_url(double latitude, double longitude) {
  return std::string(kMapsUrlPrefix) + detail::fixed(latitude, 6) + "," + detail::fixed(longitude, 6);
}

/// Classifies one inbound SMS body. Total: every input maps to exactly one kind.
/// Precedence: staleness marker, then the full-fix grammar, then a bare maps
/// link, then Unrecognized.
inline TrackerMessage parse_tracker_response(std::string_view raw) {
  TrackerMessage out;
  out.raw = std::string(raw);
  auto tokens = detail::split_ws(raw);
  if (tokens.empty()) return out;

  const bool stale = tokens.front() == kStaleMarker;
  if (stale) tokens.erase(tokens.begin());

  std::optional<double> lat, lon, speed;
  std::optional<int> bat;
  std::optional<std::string> imei, url;
  std::optional<Timestamp> device_time;
  bool malformed = false;
  bool coordinates_out_of_range = false;

  for (auto tok : tokens) {
    if (detail::is_maps_url(tok)) {
      url = std::string(tok);
      continue;
    }
    const auto colon = tok.find(':');
    if (colon == std::string_view::npos || colon == 0) {
      malformed = true;
      continue;
    }
    const auto key = tok.substr(0, colon);
    const auto value = tok.substr(colon + 1);
    if (key == "lat") {
      lat = detail::parse_decimal(value);
      if (!lat) malformed = true;
      else if (!latitude_in_range(*lat)) coordinates_out_of_range = true;
    } else if (key == "lon") {
      lon = detail::parse_decimal(value);
      if (!lon) malformed = true;
      else if (!longitude_in_range(*lon)) coordinates_out_of_range = true;
    } else if (key == "speed") {
      speed = detail::parse_decimal(value);
      if (!speed || *speed < 0) malformed = true;
    } else if (key == "bat") {
      bat = detail::parse_battery(value);
      if (!bat) malformed = true;
    } else if (key == "id") {
      if (is_valid_imei(value)) imei = std::string(value);
      else malformed = true;
    } else if (key == "time") {
      device_time = detail::parse_device_time(value);
      if (!device_time) malformed = true;
    } else {
      malformed = true;
    }
  }

  const bool coordinates_ok = lat && lon && !coordinates_out_of_range;
  if (stale && coordinates_ok && !malformed) {
    out.kind = MessageKind::LastKnownFix;
  } else if (!stale && coordinates_ok && !malformed && speed && bat && imei && url) {
    out.kind = MessageKind::Fix;
  }
  if (out.kind == MessageKind::Fix || out.kind == MessageKind::LastKnownFix) {
    out.latitude = lat;
    out.longitude = lon;
    out.speed_kmh = speed;
    out.battery_percent = bat;
    out.imei = imei;
    out.maps_url = url;
    out.device_timestamp = device_time;
    return out;
  }

  if (url) {
    out.kind = MessageKind::Incomplete;
    out.maps_url = url;
    if (auto salvaged = salvage_coordinates_from_url(*url)) {
      out.latitude = salvaged->first;
      out.longitude = salvaged->second;
      out.low_quality = true;
    }
    return out;
  }
  return out;
}

/// Canonical text for a Fix or LastKnownFix; inverse of parse_tracker_response.
inline std::string format_tracker_response(const TrackerMessage& msg) {
  if (msg.kind != MessageKind::Fix && msg.kind != MessageKind::LastKnownFix) {
    throw Error(Errc::InvalidMessage, "only fix and last-known-fix messages have a canonical form", "kind");
  }
  if (!msg.has_position() || !msg.speed_kmh || !msg.battery_percent || !msg.imei) {
    throw Error(Errc::InvalidMessage, "fix is missing required fields");
  }
  if (!latitude_in_range(*msg.latitude) || !longitude_in_range(*msg.longitude)) {
    throw Error(Errc::InvalidMessage, "coordinates out of range");
  }
  if (*msg.speed_kmh < 0 || *msg.battery_percent < 0 || *msg.battery_percent > 100 || !is_valid_imei(*msg.imei)) {
    throw Error(Errc::InvalidMessage, "field out of range");
  }
  std::string out;
  if (msg.kind == MessageKind::LastKnownFix) {
    out += kStaleMarker;
    out += ' ';
  }
  out += "lat:" + detail::fixed(*msg.latitude, 6);
  out += " lon:" + detail::fixed(*msg.longitude, 6);
  out += " speed:" + detail::fixed(*msg.speed_kmh, 1);
  out += " bat:" + std::to_string(*msg.battery_percent) + "%";
  out += " id:" + *msg.imei;
  if (msg.device_timestamp) {
    out += " time:" + absl::FormatTime("%Y-%m-%dT%H:%M:%SZ", to_absl(*msg.device_timestamp), absl::UTCTimeZone());
  }
  out += ' ';
  out += msg.maps_url ? *msg.maps_url : canonical_maps_url(*msg.latitude, *msg.longitude);
  return out;
}

/// Convenience constructor used by the simulator and tests.
inline TrackerMessage make_fix(double lat, double lon, double speed, int battery, std::string imei,
                               bool stale = false) {
  TrackerMessage m;
  m.kind = stale ? MessageKind::LastKnownFix : MessageKind::Fix;
  m.latitude = lat;
  m.longitude = lon;
  m.speed_kmh = speed;
  m.battery_percent = battery;
  m.imei = std::move(imei);
  m.maps_url = canonical_maps_url(lat, lon);
  return m;
}

}  // namespace smstrack::codec
