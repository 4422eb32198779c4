#pragma once

// HTTP control plane over TrackerService. JSON in and out; bearer tokens with
// admin and viewer roles; /events is a server-sent-event stream whose `id` is
// the event sequence number, so clients resume with Last-Event-ID or ?since=.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include <httplib.h>

#include "smstrack/energy.hpp"
#include "smstrack/error.hpp"
#include "smstrack/service.hpp"

namespace smstrack {

enum class Role { Viewer, Admin };

/// Static bearer tokens: one "<token> <admin|viewer>" pair per line.
class TokenSet {
 public:
  void add(const std::string& token, Role role) { tokens_[token] = role; }

  std::optional<Role> lookup(const std::string& token) const {
    if (auto it = tokens_.find(token); it != tokens_.end()) return it->second;
    return std::nullopt;
  }

  bool empty() const { return tokens_.empty(); }

  static TokenSet parse(const std::string& text) {
    TokenSet set;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream fields(line);
      std::string token, role, extra;
      if (!(fields >> token)) continue;
      if (!(fields >> role) || (fields >> extra) || (role != "admin" && role != "viewer")) {
        throw Error(Errc::ConfigError, "token file line " + std::to_string(lineno) + ": expected '<token> admin|viewer'",
                    "token_file");
      }
      set.add(token, role == "admin" ? Role::Admin : Role::Viewer);
    }
    return set;
  }

  static TokenSet load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::ConfigError, "cannot read token file " + path, "token_file");
    std::stringstream ss;
    ss << in.rdbuf();
    auto set = parse(ss.str());
    if (set.empty()) throw Error(Errc::ConfigError, "token file " + path + " has no tokens", "token_file");
    return set;
  }

 private:
  std::map<std::string, Role> tokens_;
};

inline int http_status(Errc code) {
  switch (code) {
    case Errc::UnknownDevice:
    case Errc::UnknownGroup:
    case Errc::UnknownSchedule:
    case Errc::UnknownJob: return 404;
    case Errc::DuplicateOutstanding:
    case Errc::DuplicateImei:
    case Errc::DuplicatePhoneNumber: return 409;
    case Errc::TransportUnavailable: return 503;
    case Errc::CorruptStore:
    case Errc::VersionMismatch:
    case Errc::ConfigError: return 500;
    default: return 422;
  }
}

inline Json error_body(Errc code, const std::string& message, const std::string& field = {}) {
  Json e{{"code", errc_name(code)}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return Json{{"error", e}};
}

/// Device as returned by the API; the password never leaves the server.
inline Json device_view(const Device& d) {
  Json j = to_json(d);
  j.erase("password");
  return j;
}

class ApiServer {
 public:
  ApiServer(TrackerService& service, TokenSet tokens) : service_(service), tokens_(std::move(tokens)) { routes(); }

  ~ApiServer() { stop(); }
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    if (port == 0) port_ = server_.bind_to_any_port(host);
    else port_ = server_.bind_to_port(host, port) ? port : -1;
    if (port_ < 0) throw Error(Errc::ConfigError, "cannot listen on " + host + ":" + std::to_string(port), "listen_port");
    return port_;
  }

  /// Serves on a background thread.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  /// Serves on the calling thread until stop().
  void run() { server_.listen_after_bind(); }

  void stop() {
    stopping_ = true;
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;
  using Handler = std::function<void(const Req&, Res&)>;

  static void send_json(Res& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  /// Authenticates, checks role, parses nothing; maps module errors to statuses.
  Handler guarded(Role needed, Handler h) {
    return [this, needed, h = std::move(h)](const Req& req, Res& res) {
      const auto auth = req.get_header_value("Authorization");
      const std::string prefix = "Bearer ";
      std::optional<Role> role;
      if (auth.rfind(prefix, 0) == 0) role = tokens_.lookup(auth.substr(prefix.size()));
      if (!role) {
        res.set_header("WWW-Authenticate", "Bearer");
        return send_json(res, 401, error_body(Errc::Validation, "missing or unknown bearer token"));
      }
      if (needed == Role::Admin && *role != Role::Admin) {
        return send_json(res, 403, error_body(Errc::Validation, "admin token required"));
      }
      try {
        h(req, res);
      } catch (const Error& e) {
        send_json(res, http_status(e.code()), error_body(e.code(), e.message(), e.field()));
      } catch (const Json::exception& e) {
        send_json(res, 422, error_body(Errc::Validation, std::string("malformed JSON: ") + e.what()));
      }
    };
  }

  static Json body_object(const Req& req) {
    Json j = req.body.empty() ? Json::object() : Json::parse(req.body);
    if (!j.is_object()) throw Error(Errc::Validation, "request body must be a JSON object");
    return j;
  }

  template <typename T>
  static std::optional<T> opt(const Json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    try {
      return j[key].get<T>();
    } catch (const Json::exception&) {
      throw Error(Errc::Validation, std::string("wrong type for '") + key + "'", key);
    }
  }

  template <typename T>
  static T required(const Json& j, const char* key) {
    auto v = opt<T>(j, key);
    if (!v) throw Error(Errc::Validation, std::string("'") + key + "' is required", key);
    return *v;
  }

  static Timestamp time_param(const Req& req, const char* key, Timestamp fallback) {
    if (!req.has_param(key)) return fallback;
    try {
      return parse_time(req.get_param_value(key));
    } catch (const Error& e) {
      throw Error(Errc::Validation, e.message(), key);
    }
  }

  Json schedule_view(const Schedule& s) {
    Json j = to_json(s);
    const auto next = service_.schedule_next_due(s.schedule_id);
    j["next_due"] = next ? Json(format_time(*next)) : Json(nullptr);
    return j;
  }

  void routes() {
    server_.Get("/healthz", [](const Req&, Res& res) { send_json(res, 200, Json{{"status", "ok"}}); });

    // ---- devices ----
    server_.Get("/devices", guarded(Role::Viewer, [this](const Req&, Res& res) {
                  Json out = Json::array();
                  for (const auto& d : service_.list_devices()) out.push_back(device_view(d));
                  send_json(res, 200, out);
                }));
    server_.Post("/devices", guarded(Role::Admin, [this](const Req& req, Res& res) {
                   const auto b = body_object(req);
                   const auto d = service_.register_device(
                       required<std::string>(b, "imei"), required<std::string>(b, "phone_number"),
                       opt<std::string>(b, "password").value_or("123456"),
                       opt<double>(b, "battery_capacity_mah").value_or(kDefaultBatteryCapacityMah),
                       opt<std::string>(b, "label").value_or(""));
                   send_json(res, 201, device_view(d));
                 }));
    server_.Get(R"(/devices/([^/]+))", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  send_json(res, 200, device_view(service_.get_device(req.matches[1])));
                }));
    server_.Patch(R"(/devices/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                    const auto b = body_object(req);
                    for (const char* immutable : {"imei", "device_id"}) {
                      if (b.contains(immutable)) {
                        throw Error(Errc::Validation, std::string(immutable) + " cannot be changed", immutable);
                      }
                    }
                    DeviceUpdate u{opt<std::string>(b, "phone_number"), opt<std::string>(b, "password"),
                                   opt<double>(b, "battery_capacity_mah"), opt<std::string>(b, "label")};
                    send_json(res, 200, device_view(service_.update_device(req.matches[1], u)));
                  }));
    server_.Delete(R"(/devices/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                     service_.delete_device(req.matches[1]);
                     res.status = 204;
                   }));
    server_.Post(R"(/devices/([^/]+)/locate)", guarded(Role::Admin, [this](const Req& req, Res& res) {
                   send_json(res, 202, to_json(service_.locate_now(req.matches[1])));
                 }));
    server_.Get(R"(/devices/([^/]+)/track)", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  const std::string id = req.matches[1];
                  const auto from = time_param(req, "from", Timestamp{});
                  const auto to = time_param(req, "to", from_unix_millis(std::numeric_limits<std::int64_t>::max() / 2));
                  const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
                  if (format == "csv" || format == "geojson") {
                    const auto fmt = export_format_from_name(format);
                    res.status = 200;
                    res.set_content(service_.export_track(id, from, to, fmt),
                                    fmt == ExportFormat::Csv ? "text/csv" : "application/geo+json");
                    return;
                  }
                  if (format != "json") throw Error(Errc::Validation, "format must be json, csv or geojson", "format");
                  std::optional<TrackCursor> cursor;
                  if (req.has_param("cursor")) cursor = TrackCursor::decode(req.get_param_value("cursor"));
                  std::size_t limit = 0;
                  if (req.has_param("limit")) {
                    try {
                      limit = std::stoul(req.get_param_value("limit"));
                    } catch (const std::exception&) {
                      throw Error(Errc::Validation, "limit must be a positive integer", "limit");
                    }
                  }
                  const auto page = service_.query_track(id, from, to, cursor, limit);
                  Json positions = Json::array();
                  for (const auto& p : page.positions) positions.push_back(to_api_json(p));
                  send_json(res, 200,
                            Json{{"device_id", id},
                                 {"positions", positions},
                                 {"next_cursor", page.next ? Json(page.next->encode()) : Json(nullptr)}});
                }));

    // ---- groups ----
    server_.Get("/groups", guarded(Role::Viewer, [this](const Req&, Res& res) {
                  Json out = Json::array();
                  for (const auto& g : service_.list_groups()) out.push_back(to_json(g));
                  send_json(res, 200, out);
                }));
    server_.Post("/groups", guarded(Role::Admin, [this](const Req& req, Res& res) {
                   const auto b = body_object(req);
                   const auto members = opt<std::set<std::string>>(b, "member_device_ids").value_or(std::set<std::string>{});
                   send_json(res, 201, to_json(service_.create_group(required<std::string>(b, "name"), members)));
                 }));
    server_.Get(R"(/groups/([^/]+))", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  send_json(res, 200, to_json(service_.get_group(req.matches[1])));
                }));
    server_.Patch(R"(/groups/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                    const auto b = body_object(req);
                    send_json(res, 200,
                              to_json(service_.update_group(req.matches[1], opt<std::string>(b, "name"),
                                                            opt<std::set<std::string>>(b, "member_device_ids"))));
                  }));
    server_.Delete(R"(/groups/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                     service_.delete_group(req.matches[1]);
                     res.status = 204;
                   }));

    // ---- schedules ----
    server_.Get("/schedules", guarded(Role::Viewer, [this](const Req&, Res& res) {
                  Json out = Json::array();
                  for (const auto& s : service_.list_schedules()) out.push_back(schedule_view(s));
                  send_json(res, 200, out);
                }));
    server_.Post("/schedules", guarded(Role::Admin, [this](const Req& req, Res& res) {
                   const auto s = service_.create_schedule(body_object(req));
                   send_json(res, 201, schedule_view(s));
                 }));
    server_.Get(R"(/schedules/([^/]+))", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  send_json(res, 200, schedule_view(service_.get_schedule(req.matches[1])));
                }));
    server_.Patch(R"(/schedules/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                    send_json(res, 200, schedule_view(service_.update_schedule(req.matches[1], body_object(req))));
                  }));
    server_.Delete(R"(/schedules/([^/]+))", guarded(Role::Admin, [this](const Req& req, Res& res) {
                     service_.delete_schedule(req.matches[1]);
                     res.status = 204;
                   }));

    // ---- jobs and fleet ----
    server_.Get(R"(/jobs/([^/]+))", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  send_json(res, 200, to_json(service_.get_job(req.matches[1])));
                }));
    server_.Get("/fleet/status", guarded(Role::Viewer, [this](const Req&, Res& res) {
                  send_json(res, 200, service_.fleet_status());
                }));

    // ---- battery model ----
    server_.Get("/models/battery", guarded(Role::Viewer, [this](const Req&, Res& res) {
                  send_json(res, 200, model_view(service_.battery_model()));
                }));
    server_.Post("/models/battery/fit", guarded(Role::Admin, [this](const Req& req, Res& res) {
                   const auto b = body_object(req);
                   std::vector<energy::LifetimePoint> points;
                   if (!b.contains("points") || !b["points"].is_array()) {
                     throw Error(Errc::Validation, "'points' must be a list of [interval_min, lifetime_min]", "points");
                   }
                   for (const auto& p : b["points"]) {
                     if (p.is_array() && p.size() == 2) {
                       points.push_back({p[0].get<double>(), p[1].get<double>()});
                     } else if (p.is_object()) {
                       points.push_back({p.at("interval_min").get<double>(), p.at("lifetime_min").get<double>()});
                     } else {
                       throw Error(Errc::Validation, "bad point " + p.dump(), "points");
                     }
                   }
                   const double capacity = opt<double>(b, "capacity_mah").value_or(kDefaultBatteryCapacityMah);
                   send_json(res, 200, model_view(service_.fit_battery_model(points, capacity)));
                 }));
    // Lifetime for an interval or for a schedule (stored id or draft body).
    server_.Post("/models/battery/predict", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                   const auto b = body_object(req);
                   const auto model = service_.battery_model();
                   double minutes = 0;
                   if (auto interval = opt<double>(b, "interval_min")) {
                     minutes = energy::predict_lifetime(model, *interval);
                   } else if (auto id = opt<std::string>(b, "schedule_id")) {
                     minutes = service_.predict_schedule_lifetime(*id);
                   } else if (b.contains("schedule")) {
                     const auto now = service_.clock().now();
                     auto s = schedule_from_json(b["schedule"], service_.options().timezone, now);
                     minutes = energy::predict_lifetime_for_schedule(model, s, s.anchor.value_or(now));
                   } else {
                     throw Error(Errc::Validation, "give interval_min, schedule_id or schedule", "interval_min");
                   }
                   send_json(res, 200, Json{{"lifetime_min", minutes}});
                 }));

    // ---- event stream ----
    server_.Get("/events", guarded(Role::Viewer, [this](const Req& req, Res& res) {
                  std::uint64_t since = 0;
                  try {
                    if (req.has_param("since")) since = std::stoull(req.get_param_value("since"));
                    else if (req.has_header("Last-Event-ID")) since = std::stoull(req.get_header_value("Last-Event-ID"));
                  } catch (const std::exception&) {
                    throw Error(Errc::Validation, "since must be an event sequence number", "since");
                  }
                  // Long-poll form: one JSON array, for scripts.
                  if (req.has_param("format") && req.get_param_value("format") == "json") {
                    Json out = Json::array();
                    for (const auto& e : service_.events().since(since)) out.push_back(e.to_json());
                    return send_json(res, 200, out);
                  }
                  res.set_header("Cache-Control", "no-cache");
                  auto cursor = std::make_shared<std::uint64_t>(since);
                  res.set_chunked_content_provider(
                      "text/event-stream", [this, cursor](std::size_t, httplib::DataSink& sink) {
                        const auto events = service_.events().wait_since(*cursor, std::chrono::milliseconds(500));
                        if (stopping_) {
                          sink.done();
                          return true;
                        }
                        std::string chunk;
                        for (const auto& e : events) {
                          chunk += "id: " + std::to_string(e.seq) + "\nevent: " + e.type + "\ndata: " + e.to_json().dump() +
                                   "\n\n";
                          *cursor = e.seq;
                        }
                        // A comment line keeps idle connections alive and detects dead peers.
                        if (chunk.empty()) chunk = ":\n\n";
                        return sink.write(chunk.data(), chunk.size());
                      });
                }));
  }

  static Json model_view(const energy::BatteryModel& m) {
    Json j = energy::to_json(m);
    j["idle_mah_per_min"] = m.idle_mah_per_minute();
    j["idle_only_lifetime_min"] = m.idle_only_lifetime_minutes();
    return j;
  }

  TrackerService& service_;
  TokenSet tokens_;
  httplib::Server server_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  int port_ = -1;
};

/// Drives TrackerService::tick on a fixed period until stopped.
class TickLoop {
 public:
  TickLoop(TrackerService& service, std::chrono::milliseconds period) : service_(service), period_(period) {}
  ~TickLoop() { stop(); }

  void start() {
    thread_ = std::thread([this] {
      std::unique_lock lock(mutex_);
      while (!stopping_) {
        lock.unlock();
        try {
          service_.tick();
        } catch (const Error& e) {
          std::cerr << "tick failed: " << e.what() << "\n";
        }
        lock.lock();
        cv_.wait_for(lock, period_, [this] { return stopping_; });
      }
    });
  }

  void stop() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
  }

 private:
  TrackerService& service_;
  std::chrono::milliseconds period_;
  std::thread thread_;
  std::mutex mutex_;
  std::condition_variable cv_;
  bool stopping_ = false;
};

}  // namespace smstrack
