#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>

#include "smstrack/store.hpp"

namespace smstrack {

/// Sequential, zero-padded ids ("dev-00000001") so lexical order is creation
/// order. Counters live in the meta namespace and are written in the same batch
/// as the record that consumes them, one record per prefix.
class IdAllocator {
 public:
  explicit IdAllocator(Store& store) : store_(store) {
    for (const auto& [id, rec] : store_.scan(ns::kMeta)) {
      if (id.rfind(kKeyPrefix, 0) == 0) counters_[id.substr(kKeyPrefix.size())] = rec.get<std::int64_t>();
    }
  }

  std::string next(const std::string& prefix, WriteBatch& batch) {
    const auto n = ++counters_[prefix];
    batch.put(ns::kMeta, std::string(kKeyPrefix) + prefix, Json(n));
    return format(prefix, n);
  }

  /// Raises the counter so that `id` (as produced by format) is never reissued.
  void observe(const std::string& prefix, const std::string& id, WriteBatch& batch) {
    if (id.size() <= prefix.size() + 1 || id.compare(0, prefix.size(), prefix) != 0) return;
    try {
      const auto n = std::stoll(id.substr(prefix.size() + 1));
      if (n > counters_[prefix]) {
        counters_[prefix] = n;
        batch.put(ns::kMeta, std::string(kKeyPrefix) + prefix, Json(n));
      }
    } catch (const std::exception&) {
    }
  }

  static std::string format(const std::string& prefix, std::int64_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-%08lld", static_cast<long long>(n));
    return prefix + buf;
  }

 private:
  static constexpr std::string_view kKeyPrefix = "counter:";

  Store& store_;
  std::map<std::string, std::int64_t> counters_;
};

}  // namespace smstrack
