#pragma once

// Hardware-facing TransportPort adapters: a serial GSM modem driven with
// text-mode AT commands, and a modem gateway reachable over HTTP.

#include <fcntl.h>
#include <poll.h>
#include <termios.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "smstrack/error.hpp"
#include "smstrack/gateway.hpp"
#include "smstrack/sms_codec.hpp"
#include "smstrack/time.hpp"

namespace smstrack {

/// Byte stream to a modem.
class SerialPort {
 public:
  virtual ~SerialPort() = default;
  virtual void write(std::string_view bytes) = 0;
  /// Returns whatever arrives within `timeout`; empty on timeout.
  virtual std::string read(std::chrono::milliseconds timeout) = 0;
};

/// termios serial device in raw 8N1 mode.
class PosixSerialPort final : public SerialPort {
 public:
  PosixSerialPort(const std::string& device, int baud = 115200) {
    fd_ = ::open(device.c_str(), O_RDWR | O_NOCTTY | O_CLOEXEC);
    if (fd_ < 0) throw Error(Errc::TransportUnavailable, "cannot open " + device + ": " + std::strerror(errno));
    termios tio{};
    if (::tcgetattr(fd_, &tio) != 0) {
      ::close(fd_);
      throw Error(Errc::TransportUnavailable, device + " is not a terminal");
    }
    ::cfmakeraw(&tio);
    tio.c_cflag |= CLOCAL | CREAD;
    tio.c_cflag &= ~CRTSCTS;
    tio.c_cc[VMIN] = 0;
    tio.c_cc[VTIME] = 0;
    const speed_t speed = baud_constant(baud);
    ::cfsetispeed(&tio, speed);
    ::cfsetospeed(&tio, speed);
    ::tcsetattr(fd_, TCSANOW, &tio);
    ::tcflush(fd_, TCIOFLUSH);
  }

  ~PosixSerialPort() override {
    if (fd_ >= 0) ::close(fd_);
  }
  PosixSerialPort(const PosixSerialPort&) = delete;
  PosixSerialPort& operator=(const PosixSerialPort&) = delete;

  void write(std::string_view bytes) override {
    while (!bytes.empty()) {
      const auto n = ::write(fd_, bytes.data(), bytes.size());
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw Error(Errc::TransportUnavailable, std::string("serial write failed: ") + std::strerror(errno));
      }
      bytes.remove_prefix(static_cast<std::size_t>(n));
    }
  }

  std::string read(std::chrono::milliseconds timeout) override {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r <= 0) return {};
    char buf[512];
    const auto n = ::read(fd_, buf, sizeof buf);
    if (n <= 0) return {};
    return std::string(buf, static_cast<std::size_t>(n));
  }

 private:
  static speed_t baud_constant(int baud) {
    switch (baud) {
      case 9600: return B9600;
      case 19200: return B19200;
      case 38400: return B38400;
      case 57600: return B57600;
      case 115200: return B115200;
      default: throw Error(Errc::ConfigError, "unsupported baud rate " + std::to_string(baud), "serial_baud");
    }
  }

  int fd_ = -1;
};

/// One stored message as listed by AT+CMGL.
struct ModemListing {
  int index = 0;
  std::string status;
  std::string from;
  std::string scts;
  std::string body;
};

/// Parses the lines between AT+CMGL="ALL" and its final OK.
///   +CMGL: <index>,"<stat>","<oa>",[<alpha>],"<scts>"
///   <text line>...
inline std::vector<ModemListing> parse_cmgl(const std::vector<std::string>& lines) {
  std::vector<ModemListing> out;
  for (const auto& line : lines) {
    if (line.rfind("+CMGL:", 0) == 0) {
      ModemListing m;
      std::vector<std::string> fields;
      std::string cur;
      bool quoted = false;
      for (char c : line.substr(6)) {
        if (c == '"') quoted = !quoted;
        else if (c == ',' && !quoted) {
          fields.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      fields.push_back(cur);
      for (auto& f : fields) {
        const auto b = f.find_first_not_of(' ');
        f = b == std::string::npos ? std::string() : f.substr(b);
      }
      if (fields.size() < 3 || !codec::all_digits(fields[0])) {
        throw Error(Errc::TransportUnavailable, "malformed +CMGL header: " + line);
      }
      m.index = std::stoi(fields[0]);
      m.status = fields[1];
      m.from = fields[2];
      // scts may itself contain a comma ("24/06/01,10:00:00+32").
      if (fields.size() >= 6) m.scts = fields[4] + "," + fields[5];
      else if (fields.size() == 5) m.scts = fields[4];
      out.push_back(std::move(m));
    } else if (!out.empty()) {
      if (!out.back().body.empty()) out.back().body += '\n';
      out.back().body += line;
    }
  }
  return out;
}

struct AtModemOptions {
  std::chrono::milliseconds command_timeout{5000};
  // Network submission of AT+CMGS can take tens of seconds.
  std::chrono::milliseconds send_timeout{60000};
};

/// GSM modem in text mode. One command in flight at a time.
///
///   init:  AT, ATE0, AT+CMGF=1
///   send:  AT+CMGS="<to>"\r  ->  "> "  ->  <body>\x1A  ->  +CMGS: <mr> ... OK
///   poll:  AT+CMGL="ALL"\r  ->  listing ... OK, then AT+CMGD=<index>\r per message
///
/// Inbound messages are stamped with the server clock when read, the same
/// clock that stamps submissions, so latencies never mix clock domains.
class AtModemTransport final : public TransportPort {
 public:
  AtModemTransport(SerialPort& port, const Clock& clock, AtModemOptions options = {})
      : port_(port), clock_(clock), options_(options) {}

  void init() {
    std::lock_guard lock(mutex_);
    initialized_ = false;
    ensure_init();
  }

  void send(const OutboundSms& sms) override {
    if (sms.body.size() > codec::kMaxSmsLength) {
      throw Error(Errc::Validation, "SMS body longer than 160 characters", "body");
    }
    std::lock_guard lock(mutex_);
    ensure_init();
    port_.write("AT+CMGS=\"" + sms.to + "\"\r");
    wait_for_prompt();
    port_.write(sms.body + "\x1A");
    read_until_final(options_.send_timeout, "AT+CMGS");
  }

  std::vector<InboundSms> poll() override {
    std::lock_guard lock(mutex_);
    ensure_init();
    const auto listing = parse_cmgl(command("AT+CMGL=\"ALL\"", options_.command_timeout));
    const auto now = clock_.now();
    std::vector<InboundSms> out;
    std::map<int, std::string> listed;
    for (const auto& m : listing) {
      const auto key = signature(m);
      listed[m.index] = key;
      // Already delivered on an earlier poll whose delete failed.
      if (auto it = undeleted_.find(m.index); it != undeleted_.end() && it->second == key) continue;
      if (m.status.find("REC") == std::string::npos) continue;
      out.push_back(InboundSms{m.from, m.body, now});
    }
    undeleted_.clear();
    // Delete everything listed, sent-folder entries included, so the SIM never
    // fills up. A failed delete is remembered so the message is not delivered
    // twice; the delete is retried on the next poll.
    for (const auto& [index, key] : listed) {
      try {
        command("AT+CMGD=" + std::to_string(index), options_.command_timeout);
      } catch (const Error&) {
        undeleted_[index] = key;
      }
    }
    return out;
  }

 private:
  void ensure_init() {
    if (initialized_) return;
    command("AT", options_.command_timeout);
    command("ATE0", options_.command_timeout);
    command("AT+CMGF=1", options_.command_timeout);
    initialized_ = true;
  }

  std::vector<std::string> command(const std::string& cmd, std::chrono::milliseconds timeout) {
    port_.write(cmd + "\r");
    return read_until_final(timeout, cmd);
  }

  /// Information lines up to the final result code; throws on ERROR or timeout.
  std::vector<std::string> read_until_final(std::chrono::milliseconds timeout, const std::string& what) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::vector<std::string> lines;
    while (true) {
      while (true) {
        const auto nl = buffer_.find_first_of("\r\n");
        if (nl == std::string::npos) break;
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (line.empty()) continue;
        if (line == "OK") return lines;
        if (line == "ERROR" || line.rfind("+CMS ERROR", 0) == 0 || line.rfind("+CME ERROR", 0) == 0) {
          throw Error(Errc::TransportUnavailable, what + " failed: " + line);
        }
        // Echo of the command itself when the modem still has echo on.
        if (line == what) continue;
        lines.push_back(std::move(line));
      }
      fill(deadline, what);
    }
  }

  void wait_for_prompt() {
    const auto deadline = std::chrono::steady_clock::now() + options_.command_timeout;
    while (true) {
      if (const auto p = buffer_.find('>'); p != std::string::npos) {
        buffer_.erase(0, p + 1);
        if (!buffer_.empty() && buffer_.front() == ' ') buffer_.erase(0, 1);
        return;
      }
      if (buffer_.find("ERROR") != std::string::npos) {
        buffer_.clear();
        throw Error(Errc::TransportUnavailable, "AT+CMGS rejected");
      }
      fill(deadline, "AT+CMGS prompt");
    }
  }

  void fill(std::chrono::steady_clock::time_point deadline, const std::string& what) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      buffer_.clear();
      // Abandon any half-entered message text.
      port_.write("\x1B");
      throw Error(Errc::TransportUnavailable, what + " timed out");
    }
    buffer_ += port_.read(std::min(left, std::chrono::milliseconds(200)));
  }

  static std::string signature(const ModemListing& m) { return m.from + '\x1F' + m.scts + '\x1F' + m.body; }

  SerialPort& port_;
  const Clock& clock_;
  AtModemOptions options_;
  std::map<int, std::string> undeleted_;
  std::mutex mutex_;
  std::string buffer_;
  bool initialized_ = false;
};

/// Modem gateway over HTTP.
///
///   POST /sms                {"to": "...", "body": "..."}         -> 2xx
///   GET  /sms/inbox?since=T  -> [{"id","from","body","received_at"}, ...]
///
/// `since` is inclusive and compares received_at; ids already seen at the
/// cursor's timestamp are skipped, so equal timestamps are neither lost nor
/// delivered twice.
class HttpModemTransport final : public TransportPort {
 public:
  HttpModemTransport(const std::string& base_url, const Clock& clock,
                     std::chrono::milliseconds timeout = std::chrono::milliseconds(10000))
      : client_(base_url), clock_(clock) {
    client_.set_connection_timeout(timeout);
    client_.set_read_timeout(timeout);
    client_.set_write_timeout(timeout);
  }

  void send(const OutboundSms& sms) override {
    if (sms.body.size() > codec::kMaxSmsLength) {
      throw Error(Errc::Validation, "SMS body longer than 160 characters", "body");
    }
    std::lock_guard lock(mutex_);
    const auto body = nlohmann::json{{"to", sms.to}, {"body", sms.body}}.dump();
    const auto res = client_.Post("/sms", body, "application/json");
    if (!res) throw Error(Errc::TransportUnavailable, "modem gateway unreachable: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) {
      throw Error(Errc::TransportUnavailable, "modem gateway answered " + std::to_string(res->status));
    }
  }

  std::vector<InboundSms> poll() override {
    std::lock_guard lock(mutex_);
    std::string path = "/sms/inbox";
    if (cursor_) path += "?since=" + httplib::detail::encode_query_param(format_time(*cursor_));
    const auto res = client_.Get(path);
    if (!res) throw Error(Errc::TransportUnavailable, "modem gateway unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw Error(Errc::TransportUnavailable, "modem gateway answered " + std::to_string(res->status));
    }
    nlohmann::json items;
    try {
      items = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw Error(Errc::TransportUnavailable, "modem gateway sent malformed JSON");
    }
    if (!items.is_array()) throw Error(Errc::TransportUnavailable, "modem gateway inbox is not a list");
    struct Item {
      Timestamp at;
      std::string id;
      std::string from;
      std::string body;
    };
    std::vector<Item> parsed;
    for (const auto& item : items) {
      try {
        parsed.push_back(Item{parse_time(item.at("received_at").get<std::string>()),
                              item.at("id").is_string() ? item["id"].get<std::string>() : item["id"].dump(),
                              item.at("from").get<std::string>(), item.at("body").get<std::string>()});
      } catch (const nlohmann::json::exception&) {
        throw Error(Errc::TransportUnavailable, "modem gateway sent a malformed message: " + item.dump());
      }
    }
    std::stable_sort(parsed.begin(), parsed.end(), [](const Item& a, const Item& b) { return a.at < b.at; });
    const auto now = clock_.now();
    std::vector<InboundSms> out;
    for (auto& item : parsed) {
      if (cursor_ && item.at < *cursor_) continue;
      if (cursor_ && item.at == *cursor_ && seen_at_cursor_.count(item.id)) continue;
      if (!cursor_ || item.at > *cursor_) {
        cursor_ = item.at;
        seen_at_cursor_.clear();
      }
      seen_at_cursor_.insert(item.id);
      out.push_back(InboundSms{std::move(item.from), std::move(item.body), now});
    }
    return out;
  }

 private:
  httplib::Client client_;
  const Clock& clock_;
  std::mutex mutex_;
  std::optional<Timestamp> cursor_;
  std::set<std::string> seen_at_cursor_;
};

}  // namespace smstrack
