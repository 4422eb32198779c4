#pragma once

// Embedded single-directory record store.
//
// Layout of a store directory:
//   MANIFEST      {"format":"smstrack-store","version":1}
//   data.jsonl    compacted state, one {"ns","id","rec"} object per line
//   journal.log   write-ahead journal; each line is "<crc32 hex> <batch json>\n"
//
// A batch is one line, so it either replays completely or not at all. A torn
// final line (no newline) is an uncommitted write and is discarded on open; a
// complete line that fails its checksum is corruption and open() refuses it.

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smstrack/error.hpp"
#include "smstrack/tar.hpp"

namespace smstrack {

using Json = nlohmann::json;

namespace ns {
inline constexpr const char* kDevices = "devices";
inline constexpr const char* kGroups = "groups";
inline constexpr const char* kSchedules = "schedules";
inline constexpr const char* kPositions = "positions";
inline constexpr const char* kJobs = "jobs";
inline constexpr const char* kMessages = "messages";
inline constexpr const char* kModels = "models";
inline constexpr const char* kMeta = "meta";
}  // namespace ns

struct StoreOptions {
  // fsync after every commit; off for simulations and tests.
  bool sync_writes = true;
  // Journal size that triggers compaction on commit; 0 disables.
  std::uintmax_t compact_threshold_bytes = 16u << 20;
};

class WriteBatch {
 public:
  struct Op {
    bool erase = false;
    std::string ns;
    std::string id;
    Json rec;
  };

  WriteBatch& put(std::string ns, std::string id, Json rec) {
    ops_.push_back({false, std::move(ns), std::move(id), std::move(rec)});
    return *this;
  }
  WriteBatch& erase(std::string ns, std::string id) {
    ops_.push_back({true, std::move(ns), std::move(id), nullptr});
    return *this;
  }
  bool empty() const { return ops_.empty(); }
  const std::vector<Op>& ops() const { return ops_; }

 private:
  std::vector<Op> ops_;
};

/// Store port: transactional put/get/scan over (namespace, id) records plus
/// ordered position scans on (device_id, server_time).
class Store {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr const char* kFormatName = "smstrack-store";

  /// Volatile store; same semantics, nothing touches disk.
  static std::unique_ptr<Store> in_memory() { return std::unique_ptr<Store>(new Store()); }

  /// Creates the directory if needed, otherwise recovers it.
  static std::unique_ptr<Store> open(const std::filesystem::path& dir, StoreOptions options = {}) {
    std::unique_ptr<Store> s(new Store());
    s->dir_ = dir;
    s->options_ = options;
    s->recover();
    return s;
  }

  ~Store() {
    if (journal_fd_ >= 0) ::close(journal_fd_);
  }
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  bool persistent() const { return dir_.has_value(); }

  void commit(const WriteBatch& batch) {
    if (batch.empty()) return;
    std::unique_lock lock(mutex_);
    if (journal_fd_ >= 0) {
      Json line{{"ops", Json::array()}};
      for (const auto& op : batch.ops()) {
        Json j{{"ns", op.ns}, {"id", op.id}};
        if (op.erase) j["erase"] = true;
        else j["rec"] = op.rec;
        line["ops"].push_back(std::move(j));
      }
      append_journal(line.dump());
    }
    for (const auto& op : batch.ops()) apply(op.ns, op.id, op.erase ? nullptr : &op.rec);
    if (journal_fd_ >= 0 && options_.compact_threshold_bytes > 0 &&
        journal_bytes_ >= options_.compact_threshold_bytes) {
      compact_locked();
    }
  }

  void put(const std::string& ns, const std::string& id, Json rec) {
    WriteBatch b;
    b.put(ns, id, std::move(rec));
    commit(b);
  }

  void erase(const std::string& ns, const std::string& id) {
    WriteBatch b;
    b.erase(ns, id);
    commit(b);
  }

  std::optional<Json> get(const std::string& ns, const std::string& id) const {
    std::shared_lock lock(mutex_);
    auto n = data_.find(ns);
    if (n == data_.end()) return std::nullopt;
    auto r = n->second.find(id);
    if (r == n->second.end()) return std::nullopt;
    return r->second;
  }

  /// All records of a namespace, ordered by id.
  std::vector<std::pair<std::string, Json>> scan(const std::string& ns) const {
    std::shared_lock lock(mutex_);
    std::vector<std::pair<std::string, Json>> out;
    auto n = data_.find(ns);
    if (n == data_.end()) return out;
    out.reserve(n->second.size());
    for (const auto& [id, rec] : n->second) out.emplace_back(id, rec);
    return out;
  }

  std::size_t count(const std::string& ns) const {
    std::shared_lock lock(mutex_);
    auto n = data_.find(ns);
    return n == data_.end() ? 0 : n->second.size();
  }

  /// Positions of one device with server_time in [from_ms, to_ms], ordered by
  /// (server_time, id). `after` is an exclusive (server_time, id) cursor.
  std::vector<Json> scan_positions(const std::string& device_id, std::int64_t from_ms, std::int64_t to_ms,
                                   std::optional<std::pair<std::int64_t, std::string>> after = std::nullopt,
                                   std::size_t limit = 0) const {
    std::shared_lock lock(mutex_);
    std::vector<Json> out;
    auto it = after ? position_index_.upper_bound({device_id, after->first, after->second})
                    : position_index_.lower_bound({device_id, from_ms, std::string()});
    const auto& positions = data_.at(ns::kPositions);
    for (; it != position_index_.end(); ++it) {
      const auto& [dev, t, id] = *it;
      if (dev != device_id || t > to_ms) break;
      if (t < from_ms) continue;
      out.push_back(positions.at(id));
      if (limit && out.size() >= limit) break;
    }
    return out;
  }

  /// Latest position of a device, if any.
  std::optional<Json> last_position(const std::string& device_id) const {
    std::shared_lock lock(mutex_);
    auto it = position_index_.lower_bound({device_id, INT64_MAX, std::string()});
    if (it == position_index_.begin()) return std::nullopt;
    --it;
    if (std::get<0>(*it) != device_id) return std::nullopt;
    return data_.at(ns::kPositions).at(std::get<2>(*it));
  }

  /// Rewrites data.jsonl from memory and empties the journal.
  void compact() {
    std::unique_lock lock(mutex_);
    if (journal_fd_ >= 0) compact_locked();
  }

  /// Portable archive: manifest.json plus one <namespace>.jsonl per namespace.
  std::string snapshot_archive() const {
    std::shared_lock lock(mutex_);
    std::vector<tar::Entry> entries;
    Json manifest{{"format", kFormatName}, {"version", kFormatVersion}, {"namespaces", Json::array()}};
    std::vector<tar::Entry> files;
    for (const auto& [name, records] : data_) {
      if (records.empty()) continue;
      manifest["namespaces"].push_back(name);
      std::string body;
      for (const auto& [id, rec] : records) body += Json{{"id", id}, {"rec", rec}}.dump() + "\n";
      files.push_back({name + ".jsonl", std::move(body)});
    }
    entries.push_back({"manifest.json", manifest.dump() + "\n"});
    for (auto& f : files) entries.push_back(std::move(f));
    return tar::write(entries);
  }

  void snapshot_export(const std::filesystem::path& archive_path) const {
    const std::string bytes = snapshot_archive();
    std::ofstream out(archive_path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::CorruptStore, "cannot write snapshot " + archive_path.string());
  }

  /// Loads an archive into this store, which must be empty.
  void snapshot_load(std::string_view archive) {
    const auto entries = tar::read(archive);
    if (entries.empty() || entries.front().name != "manifest.json") {
      throw Error(Errc::CorruptStore, "snapshot has no manifest");
    }
    Json manifest;
    try {
      manifest = Json::parse(entries.front().data);
    } catch (const Json::exception&) {
      throw Error(Errc::CorruptStore, "snapshot manifest is not JSON");
    }
    if (manifest.value("format", "") != kFormatName) throw Error(Errc::CorruptStore, "unknown snapshot format");
    if (manifest.value("version", -1) != kFormatVersion) {
      throw Error(Errc::VersionMismatch, "snapshot version " + manifest.value("version", Json(-1)).dump() +
                                             ", expected " + std::to_string(kFormatVersion));
    }
    {
      std::shared_lock lock(mutex_);
      for (const auto& [name, records] : data_) {
        if (!records.empty()) throw Error(Errc::PreconditionViolated, "snapshot import requires an empty store");
      }
    }
    WriteBatch batch;
    for (std::size_t i = 1; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (e.name.size() < 7 || e.name.substr(e.name.size() - 6) != ".jsonl") continue;
      const std::string name = e.name.substr(0, e.name.size() - 6);
      std::istringstream lines(e.data);
      std::string line;
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        try {
          auto j = Json::parse(line);
          batch.put(name, j.at("id").get<std::string>(), j.at("rec"));
        } catch (const Json::exception&) {
          throw Error(Errc::CorruptStore, "bad record in " + e.name);
        }
      }
    }
    commit(batch);
    compact();
  }

  void snapshot_import(const std::filesystem::path& archive_path) {
    std::ifstream in(archive_path, std::ios::binary);
    if (!in) throw Error(Errc::CorruptStore, "cannot read snapshot " + archive_path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    snapshot_load(bytes);
  }

 private:
  using PositionKey = std::tuple<std::string, std::int64_t, std::string>;

  Store() { data_[ns::kPositions]; }

  static std::string crc_hex(const std::string& s) {
    const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
  }

  static std::optional<PositionKey> position_key(const std::string& id, const Json& rec) {
    if (!rec.is_object() || !rec.contains("device_id") || !rec.contains("server_time")) return std::nullopt;
    return PositionKey{rec["device_id"].get<std::string>(), rec["server_time"].get<std::int64_t>(), id};
  }

  void apply(const std::string& name, const std::string& id, const Json* rec) {
    auto& records = data_[name];
    auto existing = records.find(id);
    if (name == ns::kPositions && existing != records.end()) {
      if (auto k = position_key(id, existing->second)) position_index_.erase(*k);
    }
    if (rec == nullptr) {
      if (existing != records.end()) records.erase(existing);
      return;
    }
    records[id] = *rec;
    if (name == ns::kPositions) {
      if (auto k = position_key(id, *rec)) position_index_.insert(*k);
    }
  }

  void append_journal(const std::string& payload) {
    const std::string line = crc_hex(payload) + " " + payload + "\n";
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::write(journal_fd_, line.data() + off, line.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(Errc::CorruptStore, "journal write failed");
      }
      off += static_cast<std::size_t>(n);
    }
    if (options_.sync_writes) ::fdatasync(journal_fd_);
    journal_bytes_ += line.size();
  }

  void recover() {
    namespace fs = std::filesystem;
    fs::create_directories(*dir_);
    const auto manifest_path = *dir_ / "MANIFEST";
    if (fs::exists(manifest_path)) {
      std::ifstream in(manifest_path);
      Json m;
      try {
        in >> m;
      } catch (const Json::exception&) {
        throw Error(Errc::CorruptStore, "unreadable MANIFEST");
      }
      if (m.value("format", "") != kFormatName) throw Error(Errc::CorruptStore, "not a store directory");
      if (m.value("version", -1) != kFormatVersion) {
        throw Error(Errc::VersionMismatch, "store version " + m.value("version", Json(-1)).dump() + ", expected " +
                                               std::to_string(kFormatVersion));
      }
    } else {
      if (!fs::is_empty(*dir_)) throw Error(Errc::CorruptStore, "directory has data but no MANIFEST");
      std::ofstream out(manifest_path);
      out << Json{{"format", kFormatName}, {"version", kFormatVersion}}.dump() << "\n";
    }

    const auto data_path = *dir_ / "data.jsonl";
    if (fs::exists(data_path)) {
      std::ifstream in(data_path);
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
          const auto j = Json::parse(line);
          const Json rec = j.at("rec");
          apply(j.at("ns").get<std::string>(), j.at("id").get<std::string>(), &rec);
        } catch (const Json::exception&) {
          throw Error(Errc::CorruptStore, "data.jsonl line " + std::to_string(lineno) + " is malformed");
        }
      }
    }

    const auto journal_path = *dir_ / "journal.log";
    std::uintmax_t good_bytes = 0;
    if (fs::exists(journal_path)) {
      std::ifstream in(journal_path, std::ios::binary);
      std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      std::size_t pos = 0;
      std::size_t lineno = 0;
      while (pos < contents.size()) {
        const auto nl = contents.find('\n', pos);
        if (nl == std::string::npos) break;  // torn tail
        ++lineno;
        const std::string line = contents.substr(pos, nl - pos);
        const auto sp = line.find(' ');
        if (sp != 8 || crc_hex(line.substr(9)) != line.substr(0, 8)) {
          throw Error(Errc::CorruptStore, "journal line " + std::to_string(lineno) + " fails its checksum");
        }
        try {
          const auto j = Json::parse(line.substr(9));
          for (const auto& op : j.at("ops")) {
            const bool is_erase = op.value("erase", false);
            apply(op.at("ns").get<std::string>(), op.at("id").get<std::string>(), is_erase ? nullptr : &op.at("rec"));
          }
        } catch (const Json::exception&) {
          throw Error(Errc::CorruptStore, "journal line " + std::to_string(lineno) + " is malformed");
        }
        pos = nl + 1;
      }
      good_bytes = pos;
      if (good_bytes != contents.size()) fs::resize_file(journal_path, good_bytes);
    }
    journal_fd_ = ::open(journal_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (journal_fd_ < 0) throw Error(Errc::CorruptStore, "cannot open journal " + journal_path.string());
    journal_bytes_ = good_bytes;
  }

  void compact_locked() {
    namespace fs = std::filesystem;
    const auto tmp = *dir_ / "data.jsonl.tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      for (const auto& [name, records] : data_) {
        for (const auto& [id, rec] : records) out << Json{{"ns", name}, {"id", id}, {"rec", rec}}.dump() << '\n';
      }
      out.flush();
      if (!out) throw Error(Errc::CorruptStore, "compaction write failed");
    }
    if (options_.sync_writes) {
      const int fd = ::open(tmp.c_str(), O_RDONLY | O_CLOEXEC);
      if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
      }
    }
    fs::rename(tmp, *dir_ / "data.jsonl");
    // Replaying the old journal over the new data file is harmless (puts carry
    // whole records), so a crash between rename and truncate is safe.
    if (::ftruncate(journal_fd_, 0) != 0) throw Error(Errc::CorruptStore, "journal truncate failed");
    journal_bytes_ = 0;
  }

  std::optional<std::filesystem::path> dir_;
  StoreOptions options_;
  int journal_fd_ = -1;
  std::uintmax_t journal_bytes_ = 0;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::map<std::string, Json>> data_;
  std::set<PositionKey> position_index_;
};

}  // namespace smstrack
