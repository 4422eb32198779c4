#pragma once

// Operator command line. Exit codes: 0 success, 1 runtime error (module error
// text verbatim on stderr), 2 usage error.

#include <CLI11.hpp>
#include <signal.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "smstrack/api.hpp"
#include "smstrack/config.hpp"
#include "smstrack/energy.hpp"
#include "smstrack/positions.hpp"
#include "smstrack/registry.hpp"
#include "smstrack/service.hpp"
#include "smstrack/simulator.hpp"
#include "smstrack/store.hpp"
#include "smstrack/transports.hpp"

namespace smstrack::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// "1:715,20:3637" -> points. Malformed input is a usage error.
inline std::vector<energy::LifetimePoint> parse_points(const std::string& text) {
  std::vector<energy::LifetimePoint> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      std::size_t a = 0, b = 0;
      const std::string left = item.substr(0, colon), right = item.substr(colon + 1);
      const double interval = std::stod(left, &a);
      const double lifetime = std::stod(right, &b);
      if (a != left.size() || b != right.size()) throw std::invalid_argument(item);
      out.push_back({interval, lifetime});
    } catch (const std::exception&) {
      throw CLI::ValidationError("--points", "expected <interval>:<lifetime>[,...], got '" + item + "'");
    }
  }
  if (out.empty()) throw CLI::ValidationError("--points", "no points given");
  return out;
}

inline std::string read_text(const std::string& path, Errc code) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(code, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(Errc::ConfigError, "cannot write " + path);
}

inline std::string format_minutes(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline int fit_battery(const std::string& points_text, double capacity, const std::string& out_path, std::ostream& out) {
  const auto model = energy::fit_battery_model(parse_points(points_text), capacity);
  if (!out_path.empty()) write_text(out_path, energy::format_model(model));
  Json lifetimes = Json::array();
  for (const auto& p : parse_points(points_text)) {
    lifetimes.push_back(
        Json{{"interval_min", p.interval_minutes}, {"lifetime_min", energy::predict_lifetime(model, p.interval_minutes)}});
  }
  Json j = energy::to_json(model);
  j["idle_mah_per_min"] = model.idle_mah_per_minute();
  j["idle_only_lifetime_min"] = model.idle_only_lifetime_minutes();
  j["lifetimes"] = lifetimes;
  out << j.dump() << "\n";
  return kExitOk;
}

inline int predict_lifetime(const std::string& model_path, double interval, const std::string& schedule_path,
                            const std::string& start_text, std::ostream& out) {
  const auto model = model_path.empty() ? energy::reference_model()
                                        : energy::parse_model(read_text(model_path, Errc::ConfigError));
  if (schedule_path.empty()) {
    out << format_minutes(energy::predict_lifetime(model, interval)) << "\n";
    return kExitOk;
  }
  Json body;
  try {
    body = Json::parse(read_text(schedule_path, Errc::ConfigError));
  } catch (const Json::parse_error& e) {
    throw Error(Errc::ConfigError, schedule_path + ": invalid JSON (" + e.what() + ")");
  }
  if (body.is_object() && !body.contains("target")) body["target"] = "dev-00000000";
  const Timestamp start = start_text.empty() ? SystemClock().now() : parse_time(start_text);
  const auto schedule = schedule_from_json(body, body.value("timezone", std::string("UTC")), start);
  out << format_minutes(energy::predict_lifetime_for_schedule(model, schedule, schedule.anchor.value_or(start))) << "\n";
  return kExitOk;
}

inline int simulate(const std::string& scenario_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
                    std::ostream& out) {
  auto config = sim::load_scenario(scenario_path);
  if (seed) config.seed = *seed;
  auto store = Store::in_memory();
  const auto result = sim::run_scenario(config, *store);
  sim::write_outputs(out_dir, result, *store);
  out << result.summary.dump() << "\n";
  return kExitOk;
}

inline int export_track(const std::string& store_path, const std::string& device, const std::string& from,
                        const std::string& to, const std::string& format, std::ostream& out) {
  if (!std::filesystem::exists(std::filesystem::path(store_path) / "MANIFEST")) {
    throw Error(Errc::ConfigError, "no store at " + store_path, "store");
  }
  auto store = Store::open(store_path, StoreOptions{false, 0});
  DeviceRegistry registry(*store);
  PositionPipeline pipeline(*store, registry);
  const Timestamp t_from = from.empty() ? from_unix_seconds(0) : parse_time(from);
  const Timestamp t_to = to.empty() ? utc(9999, 12, 31) : parse_time(to);
  out << pipeline.export_track(device, t_from, t_to, export_format_from_name(format));
  return kExitOk;
}

/// Runs until SIGINT or SIGTERM.
inline int serve(const std::string& config_path, std::ostream& out) {
  const auto config = load_config(config_path);
  if (config.token_file.empty()) throw Error(Errc::ConfigError, config_path + ": token_file is required", "token_file");
  const auto tokens = TokenSet::load(config.token_file);

  // Block the stop signals before any thread starts so only sigwait sees them.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  SystemClock clock;
  auto store = Store::open(config.store_path, StoreOptions{config.sync_writes});
  std::unique_ptr<SerialPort> port;
  std::unique_ptr<TransportPort> transport;
  if (config.transport == "at") {
    port = std::make_unique<PosixSerialPort>(config.serial_device, config.serial_baud);
    auto modem = std::make_unique<AtModemTransport>(*port, clock);
    modem->init();
    transport = std::move(modem);
  } else if (config.transport == "http") {
    transport = std::make_unique<HttpModemTransport>(config.modem_url, clock);
  } else {
    transport = std::make_unique<LoopbackTransport>();
  }
  TrackerService service(*store, *transport, clock,
                         ServiceOptions{config.timezone, std::chrono::seconds(config.response_timeout_s)});
  ApiServer api(service, tokens);
  const int bound = api.bind(config.listen_host, config.listen_port);
  TickLoop ticks(service, std::chrono::milliseconds(config.tick_ms));
  api.start();
  ticks.start();
  out << Json{{"listening", config.listen_host + ":" + std::to_string(bound)}}.dump() << std::endl;

  int sig = 0;
  sigwait(&stop_signals, &sig);
  ticks.stop();
  service.events().close();
  api.stop();
  return kExitOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"smstrack: SMS vehicle tracking server and fleet simulator", "smstrack"};
  app.require_subcommand(1);

  std::string config_path;
  auto* serve_cmd = app.add_subcommand("serve", "Run the tracking server until SIGINT/SIGTERM");
  serve_cmd->add_option("--config", config_path, "Server config file (key = value)")->required()->check(CLI::ExistingFile);

  std::string scenario_path, out_dir;
  std::optional<std::uint64_t> seed;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a fleet scenario; writes events.jsonl, summary.json, snapshot.tar");
  sim_cmd->add_option("--scenario", scenario_path, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--seed", seed, "Overrides the scenario seed");
  sim_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::string points, model_out;
  double capacity = kDefaultBatteryCapacityMah;
  auto* fit_cmd = app.add_subcommand("fit-battery", "Fit the battery model to measured lifetimes");
  fit_cmd->add_option("--points", points, "Measured <interval_min>:<lifetime_min> pairs, comma separated")->required();
  fit_cmd->add_option("--capacity", capacity, "Battery capacity in mAh")->capture_default_str();
  fit_cmd->add_option("--out", model_out, "Write the model file here");

  std::string model_path, schedule_path, start_text;
  double interval = 0;
  auto* predict_cmd = app.add_subcommand("predict-lifetime", "Predict battery lifetime in minutes");
  predict_cmd->add_option("--model", model_path, "Model file from fit-battery (default: reference model)")
      ->check(CLI::ExistingFile);
  auto* interval_opt = predict_cmd->add_option("--interval", interval, "Request interval in minutes")
                           ->check(CLI::Range(1.0, 1e9));
  auto* schedule_opt = predict_cmd->add_option("--schedule", schedule_path, "Schedule file (JSON, as for the API)")
                           ->check(CLI::ExistingFile);
  predict_cmd->add_option("--start", start_text, "Start instant for --schedule (default: its anchor, else now)");
  interval_opt->excludes(schedule_opt);

  std::string store_path = "smstrack-data", device, from, to, format = "csv", export_config;
  auto* export_cmd = app.add_subcommand("export", "Export one device's track from a store");
  export_cmd->add_option("--device", device, "Device id")->required();
  export_cmd->add_option("--from", from, "Start (inclusive), RFC 3339");
  export_cmd->add_option("--to", to, "End (exclusive), RFC 3339");
  export_cmd->add_option("--format", format, "csv or geojson")
      ->check(CLI::IsMember({"csv", "geojson"}))
      ->capture_default_str();
  auto* store_opt = export_cmd->add_option("--store", store_path, "Store directory")->capture_default_str();
  export_cmd->add_option("--config", export_config, "Take the store directory from this server config")
      ->excludes(store_opt)
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
    if (predict_cmd->parsed() && !interval_opt->count() && !schedule_opt->count()) {
      throw CLI::RequiredError("--interval or --schedule");
    }
    if (fit_cmd->parsed()) parse_points(points);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (serve_cmd->parsed()) return serve(config_path, out);
    if (sim_cmd->parsed()) return simulate(scenario_path, seed, out_dir, out);
    if (fit_cmd->parsed()) return fit_battery(points, capacity, model_out, out);
    if (predict_cmd->parsed()) return predict_lifetime(model_path, interval, schedule_path, start_text, out);
    if (export_cmd->parsed()) {
      if (!export_config.empty()) store_path = load_config(export_config).store_path;
      return export_track(store_path, device, from, to, format, out);
    }
  } catch (const Error& e) {
    err << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace smstrack::cli
