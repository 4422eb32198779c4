#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "smstrack/error.hpp"
#include "smstrack/ids.hpp"
#include "smstrack/sms_codec.hpp"
#include "smstrack/store.hpp"

namespace smstrack {

inline constexpr double kDefaultBatteryCapacityMah = 850.0;

struct Device {
  std::string device_id;
  std::string imei;
  std::string phone_number;
  std::string password = "123456";
  double battery_capacity_mah = kDefaultBatteryCapacityMah;
  std::string label;
  std::set<std::string> group_ids;

  friend bool operator==(const Device&, const Device&) = default;
};

struct Group {
  std::string group_id;
  std::string name;
  std::set<std::string> member_device_ids;

  friend bool operator==(const Group&, const Group&) = default;
};

inline Json to_json(const Device& d) {
  return Json{{"device_id", d.device_id},
              {"imei", d.imei},
              {"phone_number", d.phone_number},
              {"password", d.password},
              {"battery_capacity_mah", d.battery_capacity_mah},
              {"label", d.label},
              {"group_ids", d.group_ids}};
}

inline Json to_json(const Group& g) {
  return Json{{"group_id", g.group_id}, {"name", g.name}, {"member_device_ids", g.member_device_ids}};
}

/// "+" followed by 6 to 15 digits.
inline bool is_valid_phone_number(std::string_view p) {
  return p.size() >= 7 && p.size() <= 16 && p.front() == '+' && codec::all_digits(p.substr(1));
}

struct DeviceUpdate {
  std::optional<std::string> phone_number;
  std::optional<std::string> password;
  std::optional<double> battery_capacity_mah;
  std::optional<std::string> label;
};

/// Devices, groups, and the phone-number routing map. Group membership is
/// stored on the group record; Device::group_ids is derived on read.
class DeviceRegistry {
 public:
  explicit DeviceRegistry(Store& store) : store_(store), ids_(store) { load(); }

  Device register_device(const std::string& imei, const std::string& phone_number, const std::string& password,
                         double battery_capacity_mah = kDefaultBatteryCapacityMah, const std::string& label = {}) {
    Device d;
    d.imei = imei;
    d.phone_number = phone_number;
    d.password = password;
    d.battery_capacity_mah = battery_capacity_mah;
    d.label = label;
    validate(d, nullptr);
    WriteBatch batch;
    d.device_id = ids_.next("dev", batch);
    batch.put(ns::kDevices, d.device_id, stored(d));
    store_.commit(batch);
    index(d);
    return d;
  }

  Device update_device(const std::string& device_id, const DeviceUpdate& update) {
    Device d = get_device(device_id);
    const Device before = d;
    if (update.phone_number) d.phone_number = *update.phone_number;
    if (update.password) d.password = *update.password;
    if (update.battery_capacity_mah) d.battery_capacity_mah = *update.battery_capacity_mah;
    if (update.label) d.label = *update.label;
    validate(d, &before);
    store_.put(ns::kDevices, d.device_id, stored(d));
    by_phone_.erase(before.phone_number);
    devices_[d.device_id] = d;
    by_phone_[d.phone_number] = d.device_id;
    return with_groups(d);
  }

  /// Removes the device and its membership in every group, atomically.
  void delete_device(const std::string& device_id) {
    const Device d = get_device(device_id);
    WriteBatch batch;
    batch.erase(ns::kDevices, device_id);
    std::vector<std::string> touched;
    for (auto& [gid, g] : groups_) {
      if (g.member_device_ids.count(device_id)) {
        Group copy = g;
        copy.member_device_ids.erase(device_id);
        batch.put(ns::kGroups, gid, to_json(copy));
        touched.push_back(gid);
      }
    }
    store_.commit(batch);
    for (const auto& gid : touched) groups_[gid].member_device_ids.erase(device_id);
    by_phone_.erase(d.phone_number);
    by_imei_.erase(d.imei);
    devices_.erase(device_id);
  }

  Device get_device(const std::string& device_id) const {
    auto it = devices_.find(device_id);
    if (it == devices_.end()) throw Error(Errc::UnknownDevice, "no device '" + device_id + "'", "device_id");
    return with_groups(it->second);
  }

  std::optional<Device> find_device(const std::string& device_id) const {
    auto it = devices_.find(device_id);
    if (it == devices_.end()) return std::nullopt;
    return with_groups(it->second);
  }

  bool has_device(const std::string& device_id) const { return devices_.count(device_id) > 0; }

  std::optional<Device> resolve_by_phone(const std::string& phone_number) const {
    auto it = by_phone_.find(phone_number);
    if (it == by_phone_.end()) return std::nullopt;
    return with_groups(devices_.at(it->second));
  }

  std::optional<Device> find_by_label(const std::string& label) const {
    for (const auto& [id, d] : devices_) {
      if (d.label == label) return with_groups(d);
    }
    return std::nullopt;
  }

  std::vector<Device> list_devices() const {
    std::vector<Device> out;
    for (const auto& [id, d] : devices_) out.push_back(with_groups(d));
    return out;
  }

  Group create_group(const std::string& name, const std::set<std::string>& members = {}) {
    for (const auto& m : members) require_device(m);
    Group g;
    g.name = name;
    g.member_device_ids = members;
    WriteBatch batch;
    g.group_id = ids_.next("grp", batch);
    batch.put(ns::kGroups, g.group_id, to_json(g));
    store_.commit(batch);
    groups_[g.group_id] = g;
    return g;
  }

  Group update_group(const std::string& group_id, const std::optional<std::string>& name,
                     const std::optional<std::set<std::string>>& members) {
    Group g = get_group(group_id);
    if (members) {
      for (const auto& m : *members) require_device(m);
      g.member_device_ids = *members;
    }
    if (name) g.name = *name;
    store_.put(ns::kGroups, group_id, to_json(g));
    groups_[group_id] = g;
    return g;
  }

  Group add_member(const std::string& group_id, const std::string& device_id) {
    require_device(device_id);
    auto members = get_group(group_id).member_device_ids;
    members.insert(device_id);
    return update_group(group_id, std::nullopt, members);
  }

  Group remove_member(const std::string& group_id, const std::string& device_id) {
    auto members = get_group(group_id).member_device_ids;
    members.erase(device_id);
    return update_group(group_id, std::nullopt, members);
  }

  void delete_group(const std::string& group_id) {
    get_group(group_id);
    store_.erase(ns::kGroups, group_id);
    groups_.erase(group_id);
  }

  Group get_group(const std::string& group_id) const {
    auto it = groups_.find(group_id);
    if (it == groups_.end()) throw Error(Errc::UnknownGroup, "no group '" + group_id + "'", "group_id");
    return it->second;
  }

  bool has_group(const std::string& group_id) const { return groups_.count(group_id) > 0; }

  std::optional<Group> find_group_by_name(const std::string& name) const {
    for (const auto& [id, g] : groups_) {
      if (g.name == name) return g;
    }
    return std::nullopt;
  }

  std::vector<Group> list_groups() const {
    std::vector<Group> out;
    for (const auto& [id, g] : groups_) out.push_back(g);
    return out;
  }

  /// Members in device-id order.
  std::vector<Device> group_members(const std::string& group_id) const {
    const Group g = get_group(group_id);
    std::vector<Device> out;
    for (const auto& id : g.member_device_ids) {
      if (auto it = devices_.find(id); it != devices_.end()) out.push_back(with_groups(it->second));
    }
    return out;
  }

  /// Backup format: one JSON object per line, {"type":"device"|"group", ...}.
  std::string export_records() const {
    std::string out;
    for (const auto& [id, d] : devices_) {
      Json j = stored(d);
      j["type"] = "device";
      out += j.dump() + "\n";
    }
    for (const auto& [id, g] : groups_) {
      Json j = to_json(g);
      j["type"] = "group";
      out += j.dump() + "\n";
    }
    return out;
  }

  /// Loads a backup into this registry, keeping the original ids. All records
  /// are validated before anything is written.
  void import_records(const std::string& text) {
    std::vector<Device> devices;
    std::vector<Group> groups;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = Json::parse(line);
        const auto type = j.at("type").get<std::string>();
        if (type == "device") devices.push_back(device_from_json(j));
        else if (type == "group") groups.push_back(group_from_json(j));
        else throw Error(Errc::Validation, "unknown record type '" + type + "'", "type");
      } catch (const Json::exception& e) {
        throw Error(Errc::Validation, "line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    DeviceRegistry staging(*this);
    WriteBatch batch;
    for (const auto& d : devices) {
      if (staging.devices_.count(d.device_id)) throw Error(Errc::Validation, "duplicate device id " + d.device_id);
      staging.validate(d, nullptr);
      staging.index(d);
      batch.put(ns::kDevices, d.device_id, stored(d));
      ids_.observe("dev", d.device_id, batch);
    }
    for (const auto& g : groups) {
      for (const auto& m : g.member_device_ids) staging.require_device(m);
      batch.put(ns::kGroups, g.group_id, to_json(g));
      staging.groups_[g.group_id] = g;
      ids_.observe("grp", g.group_id, batch);
    }
    store_.commit(batch);
    devices_ = std::move(staging.devices_);
    by_phone_ = std::move(staging.by_phone_);
    by_imei_ = std::move(staging.by_imei_);
    groups_ = std::move(staging.groups_);
  }

 private:
  DeviceRegistry(const DeviceRegistry& other)
      : store_(other.store_),
        ids_(other.store_),
        devices_(other.devices_),
        by_phone_(other.by_phone_),
        by_imei_(other.by_imei_),
        groups_(other.groups_) {}

  static Json stored(const Device& d) {
    Json j = to_json(d);
    j.erase("group_ids");
    return j;
  }

  static Device device_from_json(const Json& j) {
    Device d;
    d.device_id = j.at("device_id").get<std::string>();
    d.imei = j.at("imei").get<std::string>();
    d.phone_number = j.at("phone_number").get<std::string>();
    d.password = j.value("password", std::string("123456"));
    d.battery_capacity_mah = j.value("battery_capacity_mah", kDefaultBatteryCapacityMah);
    d.label = j.value("label", std::string());
    return d;
  }

  static Group group_from_json(const Json& j) {
    Group g;
    g.group_id = j.at("group_id").get<std::string>();
    g.name = j.value("name", std::string());
    g.member_device_ids = j.value("member_device_ids", std::set<std::string>{});
    return g;
  }

  void load() {
    for (const auto& [id, rec] : store_.scan(ns::kDevices)) index(device_from_json(rec));
    for (const auto& [id, rec] : store_.scan(ns::kGroups)) groups_[id] = group_from_json(rec);
  }

  void index(const Device& d) {
    devices_[d.device_id] = d;
    by_phone_[d.phone_number] = d.device_id;
    by_imei_[d.imei] = d.device_id;
  }

  void require_device(const std::string& id) const {
    if (!devices_.count(id)) throw Error(Errc::UnknownDevice, "no device '" + id + "'", "member_device_ids");
  }

  void validate(const Device& d, const Device* before) const {
    if (!codec::is_valid_imei(d.imei)) throw Error(Errc::InvalidImei, "IMEI must be 15 decimal digits", "imei");
    if (!is_valid_phone_number(d.phone_number)) {
      throw Error(Errc::InvalidPhoneNumber, "phone number must be E.164 (+ and 6-15 digits)", "phone_number");
    }
    if (!codec::is_valid_password(d.password)) {
      throw Error(Errc::InvalidPassword, "password must be exactly six decimal digits", "password");
    }
    if (!(d.battery_capacity_mah > 0)) {
      throw Error(Errc::Validation, "battery capacity must be positive", "battery_capacity_mah");
    }
    const std::string self = before ? before->device_id : std::string();
    if (auto it = by_imei_.find(d.imei); it != by_imei_.end() && it->second != self) {
      throw Error(Errc::DuplicateImei, "IMEI " + d.imei + " already registered", "imei");
    }
    if (auto it = by_phone_.find(d.phone_number); it != by_phone_.end() && it->second != self) {
      throw Error(Errc::DuplicatePhoneNumber, "phone number " + d.phone_number + " already registered",
                  "phone_number");
    }
  }

  Device with_groups(Device d) const {
    d.group_ids.clear();
    for (const auto& [gid, g] : groups_) {
      if (g.member_device_ids.count(d.device_id)) d.group_ids.insert(gid);
    }
    return d;
  }

  Store& store_;
  IdAllocator ids_;
  std::map<std::string, Device> devices_;
  std::map<std::string, std::string> by_phone_;
  std::map<std::string, std::string> by_imei_;
  std::map<std::string, Group> groups_;
};

}  // namespace smstrack
