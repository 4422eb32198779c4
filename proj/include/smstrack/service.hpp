#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "smstrack/energy.hpp"
#include "smstrack/events.hpp"
#include "smstrack/gateway.hpp"
#include "smstrack/positions.hpp"
#include "smstrack/registry.hpp"
#include "smstrack/scheduler.hpp"
#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

struct ServiceOptions {
  std::string timezone = "UTC";
  Duration response_timeout = kDefaultResponseTimeout;
};

/// The tracking server's core: one serialized loop over scheduler, gateway and
/// position pipeline. Every public method takes the same lock, so API threads
/// and the tick loop never interleave inside a state change.
class TrackerService {
 public:
  TrackerService(Store& store, TransportPort& transport, const Clock& clock, ServiceOptions options = {})
      : store_(store),
        transport_(transport),
        clock_(clock),
        options_(std::move(options)),
        registry_(store),
        scheduler_(store, registry_, options_.timezone, clock.now()),
        pipeline_(store, registry_),
        gateway_(store, registry_, pipeline_, transport, events_, options_.response_timeout) {
    load_zone(options_.timezone);
    recover_pending_ingestion();
  }

  const Clock& clock() const { return clock_; }
  const ServiceOptions& options() const { return options_; }
  EventLog& events() { return events_; }
  Store& store() { return store_; }

  // ---- evaluation loop ----------------------------------------------------

  void tick() { tick(clock_.now()); }

  /// Inbound first (it can complete jobs), then timeouts, then due schedules.
  void tick(Timestamp now) {
    std::lock_guard lock(mutex_);
    poll_inbound_locked();
    gateway_.expire_timeouts(now);
    const auto jobs = scheduler_.due_jobs(now, [&](const std::string& id) { return gateway_.is_outstanding(id); });
    std::map<std::string, Json> fired_jobs;
    for (const auto& job : jobs) {
      try {
        const auto rec = gateway_.dispatch_locate(registry_.get_device(job.device_id), now, job.fire_at, job.schedule_id);
        fired_jobs[job.schedule_id].push_back(rec.job_id);
      } catch (const Error& e) {
        if (e.code() != Errc::TransportUnavailable && e.code() != Errc::DuplicateOutstanding) throw;
        transport_failures_++;
      }
    }
    for (const auto& [schedule_id, fire_at] : scheduler_.advance(now)) {
      events_.publish(event_type::kScheduleFired, now,
                      Json{{"schedule_id", schedule_id},
                           {"fire_at", format_time(fire_at)},
                           {"jobs", fired_jobs.count(schedule_id) ? fired_jobs[schedule_id] : Json::array()}});
    }
  }

  void poll_inbound(Timestamp now) {
    std::lock_guard lock(mutex_);
    poll_inbound_locked();
  }

  InboundOutcome deliver(const InboundSms& sms) {
    std::lock_guard lock(mutex_);
    return gateway_.on_inbound(sms);
  }

  std::optional<Timestamp> next_wakeup() const {
    std::lock_guard lock(mutex_);
    auto a = scheduler_.next_wakeup();
    auto b = gateway_.next_timeout();
    if (a && b) return std::min(*a, *b);
    return a ? a : b;
  }

  std::size_t transport_failures() const {
    std::lock_guard lock(mutex_);
    return transport_failures_;
  }

  // ---- devices and groups -------------------------------------------------

  Device register_device(const std::string& imei, const std::string& phone, const std::string& password,
                         double capacity_mah = kDefaultBatteryCapacityMah, const std::string& label = {}) {
    std::lock_guard lock(mutex_);
    return registry_.register_device(imei, phone, password, capacity_mah, label);
  }

  Device update_device(const std::string& id, const DeviceUpdate& update) {
    std::lock_guard lock(mutex_);
    return registry_.update_device(id, update);
  }

  void delete_device(const std::string& id) {
    std::lock_guard lock(mutex_);
    registry_.delete_device(id);
    gateway_.forget_device(id, clock_.now());
  }

  Device get_device(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return registry_.get_device(id);
  }

  std::vector<Device> list_devices() const {
    std::lock_guard lock(mutex_);
    return registry_.list_devices();
  }

  Group create_group(const std::string& name, const std::set<std::string>& members) {
    std::lock_guard lock(mutex_);
    return registry_.create_group(name, members);
  }

  Group update_group(const std::string& id, const std::optional<std::string>& name,
                     const std::optional<std::set<std::string>>& members) {
    std::lock_guard lock(mutex_);
    return registry_.update_group(id, name, members);
  }

  void delete_group(const std::string& id) {
    std::lock_guard lock(mutex_);
    registry_.delete_group(id);
  }

  Group get_group(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return registry_.get_group(id);
  }

  std::vector<Group> list_groups() const {
    std::lock_guard lock(mutex_);
    return registry_.list_groups();
  }

  std::vector<Device> group_members(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return registry_.group_members(id);
  }

  // ---- schedules ------------------------------------------------------------

  Schedule create_schedule(const Json& body) {
    std::lock_guard lock(mutex_);
    const auto now = clock_.now();
    return scheduler_.create(schedule_from_json(body, options_.timezone, now), now);
  }

  Schedule create_schedule(Schedule s) {
    std::lock_guard lock(mutex_);
    return scheduler_.create(std::move(s), clock_.now());
  }

  /// Merges `patch` over the stored JSON form and revalidates.
  Schedule update_schedule(const std::string& id, const Json& patch) {
    std::lock_guard lock(mutex_);
    const auto now = clock_.now();
    Json merged = to_json(scheduler_.get(id));
    merged.merge_patch(patch);
    // Changing kind clears the other kinds' fields unless the patch set them.
    if (patch.contains("kind")) {
      for (const char* key : {"at", "every_s", "cron", "anchor"}) {
        if (!patch.contains(key)) merged.erase(key);
      }
    }
    return scheduler_.replace(id, schedule_from_json(merged, options_.timezone, now), now);
  }

  void delete_schedule(const std::string& id) {
    std::lock_guard lock(mutex_);
    scheduler_.remove(id);
  }

  Schedule get_schedule(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return scheduler_.get(id);
  }

  std::vector<Schedule> list_schedules() const {
    std::lock_guard lock(mutex_);
    return scheduler_.list();
  }

  std::optional<Timestamp> schedule_next_due(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return scheduler_.next_due(id);
  }

  // ---- locating -------------------------------------------------------------

  JobRecord locate_now(const std::string& device_id) {
    std::lock_guard lock(mutex_);
    const auto now = clock_.now();
    return gateway_.dispatch_locate(registry_.get_device(device_id), now, now, "manual");
  }

  std::optional<JobRecord> outstanding_job(const std::string& device_id) const {
    std::lock_guard lock(mutex_);
    return gateway_.outstanding(device_id);
  }

  JobRecord get_job(const std::string& job_id) const {
    std::lock_guard lock(mutex_);
    return gateway_.get_job(job_id);
  }

  // ---- tracks ---------------------------------------------------------------

  TrackPage query_track(const std::string& device_id, Timestamp from, Timestamp to,
                        const std::optional<TrackCursor>& after = std::nullopt, std::size_t limit = 0) const {
    std::lock_guard lock(mutex_);
    return pipeline_.query_track(device_id, from, to, after, limit);
  }

  std::string export_track(const std::string& device_id, Timestamp from, Timestamp to, ExportFormat format) const {
    std::lock_guard lock(mutex_);
    return pipeline_.export_track(device_id, from, to, format);
  }

  /// Per device: last position, battery, outstanding job, last latency.
  Json fleet_status() const {
    std::lock_guard lock(mutex_);
    Json devices = Json::array();
    for (const auto& d : registry_.list_devices()) {
      const auto last = pipeline_.last_position(d.device_id);
      const auto with_battery = pipeline_.last_with_battery(d.device_id);
      const auto job = gateway_.outstanding(d.device_id);
      const auto latency = gateway_.last_latency(d.device_id);
      devices.push_back(Json{{"device_id", d.device_id},
                             {"label", d.label},
                             {"phone_number", d.phone_number},
                             {"last_position", last ? to_api_json(*last) : Json(nullptr)},
                             {"battery_percent", with_battery ? Json(*with_battery->battery_percent) : Json(nullptr)},
                             {"outstanding_job", job ? to_json(*job) : Json(nullptr)},
                             {"last_latency_s", latency ? Json(*latency) : Json(nullptr)}});
    }
    return Json{{"time", format_time(clock_.now())}, {"last_event_seq", events_.last_seq()}, {"devices", devices}};
  }

  // ---- battery model --------------------------------------------------------

  energy::BatteryModel battery_model() const {
    std::lock_guard lock(mutex_);
    if (auto rec = store_.get(ns::kModels, "battery")) return energy::model_from_json(*rec);
    return energy::reference_model();
  }

  energy::BatteryModel fit_battery_model(const std::vector<energy::LifetimePoint>& points, double capacity_mah) {
    std::lock_guard lock(mutex_);
    const auto model = energy::fit_battery_model(points, capacity_mah);
    store_.put(ns::kModels, "battery", energy::to_json(model));
    return model;
  }

  double predict_schedule_lifetime(const std::string& schedule_id) const {
    std::lock_guard lock(mutex_);
    const auto s = scheduler_.get(schedule_id);
    return energy::predict_lifetime_for_schedule(battery_model(), s, s.anchor.value_or(clock_.now()));
  }

 private:
  /// A modem that cannot be read is counted, not fatal: timeouts and
  /// schedules still run this tick.
  void poll_inbound_locked() {
    std::vector<InboundSms> inbound;
    try {
      inbound = transport_.poll();
    } catch (const Error& e) {
      if (e.code() != Errc::TransportUnavailable) throw;
      transport_failures_++;
    }
    for (const auto& sms : inbound) gateway_.on_inbound(sms);
  }

  /// Re-runs ingestion for logged messages whose position never landed (the
  /// process stopped between logging and ingesting). Ingestion is idempotent.
  void recover_pending_ingestion() {
    for (const auto& [id, rec] : store_.scan(ns::kMessages)) {
      if (rec["device_id"].is_null() || pipeline_.ingested(id)) continue;
      const auto device_id = rec["device_id"].get<std::string>();
      if (!registry_.has_device(device_id)) continue;
      const auto msg = codec::parse_tracker_response(rec["body"].get<std::string>());
      if (!msg.has_position()) continue;
      pipeline_.ingest(device_id, msg, parse_time(rec["received_at"].get<std::string>()), id);
    }
  }

  Store& store_;
  TransportPort& transport_;
  const Clock& clock_;
  ServiceOptions options_;
  mutable std::recursive_mutex mutex_;
  EventLog events_;
  DeviceRegistry registry_;
  Scheduler scheduler_;
  PositionPipeline pipeline_;
  Gateway gateway_;
  std::size_t transport_failures_ = 0;
};

}  // namespace smstrack
