#pragma once

#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/events.hpp"
#include "smstrack/ids.hpp"
#include "smstrack/positions.hpp"
#include "smstrack/registry.hpp"
#include "smstrack/scheduler.hpp"
#include "smstrack/sms_codec.hpp"
#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

inline constexpr Duration kDefaultResponseTimeout = std::chrono::seconds(180);

struct OutboundSms {
  std::string to;
  std::string body;
  Timestamp submitted_at;
  std::string correlation;  // job id
};

struct InboundSms {
  std::string from;
  std::string body;
  Timestamp received_at;
};

/// Capability to move SMS to and from the phone network.
class TransportPort {
 public:
  virtual ~TransportPort() = default;
  /// At most once per call. Throws Error(TransportUnavailable) when the
  /// message could not be handed to the modem.
  virtual void send(const OutboundSms& sms) = 0;
  /// Drains messages received since the previous poll.
  virtual std::vector<InboundSms> poll() = 0;
};

/// In-process transport: outbound messages queue up for a simulator, which
/// injects replies.
class LoopbackTransport final : public TransportPort {
 public:
  void send(const OutboundSms& sms) override {
    std::lock_guard lock(mutex_);
    if (!available_) throw Error(Errc::TransportUnavailable, "loopback modem is offline");
    outbox_.push_back(sms);
  }

  std::vector<InboundSms> poll() override {
    std::lock_guard lock(mutex_);
    std::vector<InboundSms> out(inbox_.begin(), inbox_.end());
    inbox_.clear();
    return out;
  }

  void inject(InboundSms sms) {
    std::lock_guard lock(mutex_);
    inbox_.push_back(std::move(sms));
  }

  std::vector<OutboundSms> take_outbox() {
    std::lock_guard lock(mutex_);
    std::vector<OutboundSms> out(outbox_.begin(), outbox_.end());
    outbox_.clear();
    return out;
  }

  void set_available(bool up) {
    std::lock_guard lock(mutex_);
    available_ = up;
  }

 private:
  std::mutex mutex_;
  bool available_ = true;
  std::deque<OutboundSms> outbox_;
  std::deque<InboundSms> inbox_;
};

enum class JobState { Sent, Completed, TimedOut };

inline std::string_view job_state_name(JobState s) {
  switch (s) {
    case JobState::Sent: return "sent";
    case JobState::Completed: return "completed";
    case JobState::TimedOut: return "timed_out";
  }
  return "sent";
}

inline JobState job_state_from_name(std::string_view s) {
  if (s == "completed") return JobState::Completed;
  if (s == "timed_out") return JobState::TimedOut;
  return JobState::Sent;
}

struct JobRecord {
  std::string job_id;
  std::string device_id;
  std::string schedule_id;
  Timestamp fire_at;
  Timestamp submitted_at;
  JobState state = JobState::Sent;
  std::optional<Timestamp> finished_at;
  std::optional<double> latency_s;
  std::optional<std::string> message_id;
};

inline Json to_json(const JobRecord& j) {
  return Json{{"job_id", j.job_id},
              {"device_id", j.device_id},
              {"schedule_id", j.schedule_id},
              {"fire_at", format_time(j.fire_at)},
              {"submitted_at", format_time(j.submitted_at)},
              {"state", job_state_name(j.state)},
              {"finished_at", j.finished_at ? Json(format_time(*j.finished_at)) : Json(nullptr)},
              {"latency_s", j.latency_s ? Json(*j.latency_s) : Json(nullptr)},
              {"message_id", j.message_id ? Json(*j.message_id) : Json(nullptr)}};
}

inline JobRecord job_from_json(const Json& j) {
  JobRecord r;
  r.job_id = j.at("job_id").get<std::string>();
  r.device_id = j.at("device_id").get<std::string>();
  r.schedule_id = j.at("schedule_id").get<std::string>();
  r.fire_at = parse_time(j.at("fire_at").get<std::string>());
  r.submitted_at = parse_time(j.at("submitted_at").get<std::string>());
  r.state = job_state_from_name(j.at("state").get<std::string>());
  if (!j["finished_at"].is_null()) r.finished_at = parse_time(j["finished_at"].get<std::string>());
  if (!j["latency_s"].is_null()) r.latency_s = j["latency_s"].get<double>();
  if (!j["message_id"].is_null()) r.message_id = j["message_id"].get<std::string>();
  return r;
}

struct InboundOutcome {
  std::string message_id;
  std::optional<std::string> device_id;
  codec::TrackerMessage message;
  std::optional<JobRecord> completed_job;
  std::optional<Position> position;
};

/// Sends locate commands, correlates replies with outstanding jobs, and
/// expires jobs whose device stays silent. Not thread-safe; owned by the
/// service's serialized loop.
class Gateway {
 public:
  Gateway(Store& store, const DeviceRegistry& registry, PositionPipeline& pipeline, TransportPort& transport,
          EventLog& events, Duration response_timeout = kDefaultResponseTimeout)
      : store_(store),
        registry_(registry),
        pipeline_(pipeline),
        transport_(transport),
        events_(events),
        ids_(store),
        timeout_(response_timeout) {
    for (const auto& [id, rec] : store_.scan(ns::kJobs)) {
      auto job = job_from_json(rec);
      if (job.state == JobState::Sent) outstanding_[job.device_id] = job;
      if (job.latency_s) last_latency_[job.device_id] = *job.latency_s;
    }
  }

  Duration response_timeout() const { return timeout_; }

  JobRecord dispatch_locate(const Device& device, Timestamp now, Timestamp fire_at, const std::string& schedule_id) {
    if (outstanding_.count(device.device_id)) {
      throw Error(Errc::DuplicateOutstanding, "device " + device.device_id + " already has an outstanding locate",
                  "device_id");
    }
    WriteBatch batch;
    JobRecord job;
    job.job_id = ids_.next("job", batch);
    job.device_id = device.device_id;
    job.schedule_id = schedule_id;
    job.fire_at = fire_at;
    job.submitted_at = now;
    OutboundSms sms{device.phone_number, codec::encode_locate_command(device.password), now, job.job_id};
    transport_.send(sms);  // throws TransportUnavailable; nothing recorded then
    batch.put(ns::kJobs, job.job_id, to_json(job));
    store_.commit(batch);
    outstanding_[device.device_id] = job;
    publish_job(job, now);
    return job;
  }

  /// Logs, routes, parses, and ingests one inbound SMS.
  InboundOutcome on_inbound(const InboundSms& sms) {
    InboundOutcome out;
    out.message = codec::parse_tracker_response(sms.body);
    const auto device = registry_.resolve_by_phone(sms.from);
    if (device) out.device_id = device->device_id;

    WriteBatch batch;
    out.message_id = ids_.next("msg", batch);
    batch.put(ns::kMessages, out.message_id,
              Json{{"message_id", out.message_id},
                   {"received_at", format_time(sms.received_at)},
                   {"from", sms.from},
                   {"body", sms.body},
                   {"device_id", device ? Json(device->device_id) : Json(nullptr)},
                   {"kind", codec::kind_name(out.message.kind)}});

    const bool answers = out.message.kind != codec::MessageKind::Unrecognized;
    if (device && answers) {
      if (auto it = outstanding_.find(device->device_id); it != outstanding_.end()) {
        JobRecord job = it->second;
        job.state = JobState::Completed;
        job.finished_at = sms.received_at;
        job.latency_s = to_seconds(sms.received_at - job.submitted_at);
        job.message_id = out.message_id;
        batch.put(ns::kJobs, job.job_id, to_json(job));
        out.completed_job = job;
      }
    }
    store_.commit(batch);
    events_.publish(event_type::kMessageLogged, sms.received_at,
                    Json{{"message_id", out.message_id},
                         {"device_id", out.device_id ? Json(*out.device_id) : Json(nullptr)},
                         {"kind", codec::kind_name(out.message.kind)}});

    if (out.completed_job) {
      outstanding_.erase(out.completed_job->device_id);
      last_latency_[out.completed_job->device_id] = *out.completed_job->latency_s;
      publish_job(*out.completed_job, sms.received_at);
    }
    if (device) {
      out.position = pipeline_.ingest(device->device_id, out.message, sms.received_at, out.message_id);
      if (out.position) {
        events_.publish(event_type::kPositionIngested, sms.received_at, to_api_json(*out.position));
      }
    }
    return out;
  }

  /// Jobs sent at least `timeout` ago become TimedOut.
  std::vector<JobRecord> expire_timeouts(Timestamp now) {
    std::vector<JobRecord> expired;
    for (auto it = outstanding_.begin(); it != outstanding_.end();) {
      if (now - it->second.submitted_at >= timeout_) {
        JobRecord job = it->second;
        job.state = JobState::TimedOut;
        job.finished_at = now;
        store_.put(ns::kJobs, job.job_id, to_json(job));
        expired.push_back(job);
        it = outstanding_.erase(it);
        publish_job(job, now);
      } else {
        ++it;
      }
    }
    return expired;
  }

  bool is_outstanding(const std::string& device_id) const { return outstanding_.count(device_id) > 0; }

  std::optional<JobRecord> outstanding(const std::string& device_id) const {
    if (auto it = outstanding_.find(device_id); it != outstanding_.end()) return it->second;
    return std::nullopt;
  }

  std::size_t outstanding_count() const { return outstanding_.size(); }

  std::optional<Timestamp> next_timeout() const {
    std::optional<Timestamp> best;
    for (const auto& [dev, job] : outstanding_) {
      const auto t = job.submitted_at + timeout_;
      if (!best || t < *best) best = t;
    }
    return best;
  }

  std::optional<double> last_latency(const std::string& device_id) const {
    if (auto it = last_latency_.find(device_id); it != last_latency_.end()) return it->second;
    return std::nullopt;
  }

  JobRecord get_job(const std::string& job_id) const {
    auto rec = store_.get(ns::kJobs, job_id);
    if (!rec) throw Error(Errc::UnknownJob, "no job '" + job_id + "'", "job_id");
    return job_from_json(*rec);
  }

  /// Forget outstanding state for a deleted device.
  void forget_device(const std::string& device_id, Timestamp now) {
    if (auto it = outstanding_.find(device_id); it != outstanding_.end()) {
      JobRecord job = it->second;
      job.state = JobState::TimedOut;
      job.finished_at = now;
      store_.put(ns::kJobs, job.job_id, to_json(job));
      outstanding_.erase(it);
      publish_job(job, now);
    }
    last_latency_.erase(device_id);
  }

 private:
  void publish_job(const JobRecord& job, Timestamp t) { events_.publish(event_type::kJobStateChanged, t, to_json(job)); }

  Store& store_;
  const DeviceRegistry& registry_;
  PositionPipeline& pipeline_;
  TransportPort& transport_;
  EventLog& events_;
  IdAllocator ids_;
  Duration timeout_;
  std::map<std::string, JobRecord> outstanding_;
  std::map<std::string, double> last_latency_;
};

}  // namespace smstrack
