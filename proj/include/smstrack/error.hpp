#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smstrack {

enum class Errc {
  InvalidPassword,
  InvalidImei,
  InvalidPhoneNumber,
  DuplicateImei,
  DuplicatePhoneNumber,
  UnknownDevice,
  UnknownGroup,
  UnknownSchedule,
  UnknownJob,
  CronSyntaxError,
  NoFutureOccurrence,
  InvalidSchedule,
  InvalidWindow,
  DegenerateFit,
  PreconditionViolated,
  InvalidMessage,
  TransportUnavailable,
  DuplicateOutstanding,
  CorruptStore,
  VersionMismatch,
  ConfigError,
  Validation,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::InvalidPassword: return "InvalidPassword";
    case Errc::InvalidImei: return "InvalidImei";
    case Errc::InvalidPhoneNumber: return "InvalidPhoneNumber";
    case Errc::DuplicateImei: return "DuplicateImei";
    case Errc::DuplicatePhoneNumber: return "DuplicatePhoneNumber";
    case Errc::UnknownDevice: return "UnknownDevice";
    case Errc::UnknownGroup: return "UnknownGroup";
    case Errc::UnknownSchedule: return "UnknownSchedule";
    case Errc::UnknownJob: return "UnknownJob";
    case Errc::CronSyntaxError: return "CronSyntaxError";
    case Errc::NoFutureOccurrence: return "NoFutureOccurrence";
    case Errc::InvalidSchedule: return "InvalidSchedule";
    case Errc::InvalidWindow: return "InvalidWindow";
    case Errc::DegenerateFit: return "DegenerateFit";
    case Errc::PreconditionViolated: return "PreconditionViolated";
    case Errc::InvalidMessage: return "InvalidMessage";
    case Errc::TransportUnavailable: return "TransportUnavailable";
    case Errc::DuplicateOutstanding: return "DuplicateOutstanding";
    case Errc::CorruptStore: return "CorruptStore";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::ConfigError: return "ConfigError";
    case Errc::Validation: return "Validation";
  }
  return "Unknown";
}

/// Every module reports failures through this one exception type. `field`
/// names the offending input (a JSON key, a cron field index, a config key)
/// when there is one.
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string message, std::string field = {})
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code),
        message_(std::move(message)),
        field_(std::move(field)) {}

  Errc code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }
  /// what() without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
  std::string field_;
};

}  // namespace smstrack
