#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "smstrack/store.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

struct Event {
  std::uint64_t seq = 0;
  Timestamp time;
  std::string type;
  Json data;

  Json to_json() const { return Json{{"seq", seq}, {"time", format_time(time)}, {"type", type}, {"data", data}}; }
};

namespace event_type {
inline constexpr const char* kPositionIngested = "position_ingested";
inline constexpr const char* kJobStateChanged = "job_state_changed";
inline constexpr const char* kScheduleFired = "schedule_fired";
inline constexpr const char* kMessageLogged = "message_logged";
}  // namespace event_type

/// In-order event stream with sequence numbers starting at 1. Readers resume
/// from any sequence still retained; the oldest events are dropped once
/// `retain` is exceeded.
class EventLog {
 public:
  explicit EventLog(std::size_t retain = 100000) : retain_(retain) {}

  std::uint64_t publish(const std::string& type, Timestamp time, Json data) {
    std::function<void(const Event&)> sink;
    Event e;
    {
      std::lock_guard lock(mutex_);
      e = Event{++last_seq_, time, type, std::move(data)};
      events_.push_back(e);
      while (events_.size() > retain_) events_.pop_front();
      sink = sink_;
    }
    cv_.notify_all();
    if (sink) sink(e);
    return e.seq;
  }

  /// Every retained event with seq > after, oldest first.
  std::vector<Event> since(std::uint64_t after, std::size_t limit = 0) const {
    std::lock_guard lock(mutex_);
    std::vector<Event> out;
    for (const auto& e : events_) {
      if (e.seq <= after) continue;
      out.push_back(e);
      if (limit && out.size() >= limit) break;
    }
    return out;
  }

  /// Blocks until an event newer than `after` exists, the timeout passes, or
  /// close() is called.
  std::vector<Event> wait_since(std::uint64_t after, std::chrono::milliseconds timeout) const {
    {
      std::unique_lock lock(mutex_);
      cv_.wait_for(lock, timeout, [&] { return closed_ || last_seq_ > after; });
    }
    return since(after);
  }

  std::uint64_t last_seq() const {
    std::lock_guard lock(mutex_);
    return last_seq_;
  }

  /// Called synchronously for each event, after it is recorded.
  void set_sink(std::function<void(const Event&)> sink) {
    std::lock_guard lock(mutex_);
    sink_ = std::move(sink);
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

 private:
  std::size_t retain_;
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::deque<Event> events_;
  std::uint64_t last_seq_ = 0;
  bool closed_ = false;
  std::function<void(const Event&)> sink_;
};

}  // namespace smstrack
