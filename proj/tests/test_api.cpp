#include <gtest/gtest.h>

#include <thread>

#include "smstrack/api.hpp"

using namespace smstrack;

namespace {

const Timestamp kT0 = utc(2024, 6, 1, 10);  // a Saturday

struct Api {
  std::unique_ptr<Store> store = Store::in_memory();
  LoopbackTransport transport;
  ManualClock clock{kT0};
  TrackerService service{*store, transport, clock};
  ApiServer server{service, TokenSet::parse("admintoken admin\nviewtoken viewer\n")};
  std::unique_ptr<httplib::Client> admin;
  std::unique_ptr<httplib::Client> viewer;
  std::unique_ptr<httplib::Client> anon;

  Api() {
    const int port = server.bind("127.0.0.1", 0);
    server.start();
    const std::string url = "http://127.0.0.1:" + std::to_string(port);
    admin = std::make_unique<httplib::Client>(url);
    admin->set_bearer_token_auth("admintoken");
    viewer = std::make_unique<httplib::Client>(url);
    viewer->set_bearer_token_auth("viewtoken");
    anon = std::make_unique<httplib::Client>(url);
  }

  Json post(const std::string& path, const Json& body, int expect) {
    auto res = admin->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res);
    if (!res) return nullptr;
    EXPECT_EQ(res->status, expect) << path << " " << res->body;
    return res->body.empty() ? Json(nullptr) : Json::parse(res->body);
  }

  Json get(const std::string& path, int expect = 200) {
    auto res = viewer->Get(path);
    EXPECT_TRUE(res);
    if (!res) return nullptr;
    EXPECT_EQ(res->status, expect) << path << " " << res->body;
    return Json::parse(res->body);
  }

  std::string device(const std::string& imei = "359710049887766", const std::string& phone = "+60123456789") {
    return post("/devices", Json{{"imei", imei}, {"phone_number", phone}, {"password", "123456"}, {"label", "car"}}, 201)
        ["device_id"];
  }

  void reply(const std::string& from, double lat, double lon, Duration after) {
    clock.advance(after);
    transport.inject(InboundSms{from,
                                codec::format_tracker_response(codec::make_fix(lat, lon, 0, 77, "359710049887766")),
                                clock.now()});
    service.tick();
  }
};

}  // namespace

TEST(Api, HealthNeedsNoToken) {
  Api api;
  auto res = api.anon->Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
}

TEST(Api, AuthAndRoles) {
  Api api;
  auto res = api.anon->Get("/devices");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 401);
  httplib::Client wrong("http://127.0.0.1:" + std::to_string(api.server.port()));
  wrong.set_bearer_token_auth("guess");
  EXPECT_EQ(wrong.Get("/devices")->status, 401);
  res = api.viewer->Post("/devices", R"({"imei":"359710049887766","phone_number":"+60123456789"})", "application/json");
  EXPECT_EQ(res->status, 403);
  EXPECT_TRUE(api.service.list_devices().empty());
  EXPECT_EQ(api.get("/devices"), Json::array());
}

TEST(Api, DeviceCrud) {
  Api api;
  const auto id = api.device();
  auto d = api.get("/devices/" + id);
  EXPECT_EQ(d["phone_number"], "+60123456789");
  EXPECT_EQ(d["battery_capacity_mah"], 850.0);
  EXPECT_FALSE(d.contains("password"));

  auto res = api.admin->Patch("/devices/" + id, R"({"label":"truck","battery_capacity_mah":1000})", "application/json");
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(Json::parse(res->body)["label"], "truck");
  res = api.admin->Patch("/devices/" + id, R"({"imei":"359710049887767"})", "application/json");
  EXPECT_EQ(res->status, 422);

  const auto dup = api.post("/devices", Json{{"imei", "359710049887767"}, {"phone_number", "+60123456789"}}, 409);
  EXPECT_EQ(dup["error"]["code"], "DuplicatePhoneNumber");
  const auto bad = api.post("/devices", Json{{"imei", "12"}, {"phone_number", "+60123456780"}}, 422);
  EXPECT_EQ(bad["error"]["code"], "InvalidImei");
  api.post("/devices", Json{{"phone_number", "+60123456780"}}, 422);
  auto raw = api.admin->Post("/devices", "{not json", "application/json");
  EXPECT_EQ(raw->status, 422);

  EXPECT_EQ(api.admin->Delete("/devices/" + id)->status, 204);
  api.get("/devices/" + id, 404);
  EXPECT_EQ(api.admin->Delete("/devices/" + id)->status, 404);
}

TEST(Api, LocateNowAndConflict) {
  Api api;
  const auto id = api.device();
  const auto job = api.post("/devices/" + id + "/locate", Json::object(), 202);
  EXPECT_EQ(job["state"], "sent");
  const auto second = api.post("/devices/" + id + "/locate", Json::object(), 409);
  EXPECT_EQ(second["error"]["code"], "DuplicateOutstanding");
  api.post("/devices/dev-99999999/locate", Json::object(), 404);
  api.transport.set_available(false);
  api.reply("+60123456789", 5.41, 118.037, seconds(30));
  api.post("/devices/" + id + "/locate", Json::object(), 503);
  EXPECT_EQ(api.get("/jobs/" + job["job_id"].get<std::string>())["state"], "completed");
}

TEST(Api, TrackFleetAndExports) {
  Api api;
  const auto id = api.device();
  api.post("/devices/" + id + "/locate", Json::object(), 202);
  api.reply("+60123456789", 5.41, 118.037, seconds(31));
  api.post("/devices/" + id + "/locate", Json::object(), 202);
  api.reply("+60123456789", 5.42, 118.040, seconds(40));

  const auto track = api.get("/devices/" + id + "/track?from=" + format_time(kT0) + "&to=" + format_time(kT0 + minutes(5)));
  ASSERT_EQ(track["positions"].size(), 2u);
  EXPECT_EQ(track["positions"][0]["latitude"], 5.41);
  EXPECT_TRUE(track["next_cursor"].is_null());

  const auto page = api.get("/devices/" + id + "/track?limit=1");
  ASSERT_EQ(page["positions"].size(), 1u);
  const auto next = api.get("/devices/" + id + "/track?limit=1&cursor=" + page["next_cursor"].get<std::string>());
  EXPECT_EQ(next["positions"][0]["latitude"], 5.42);

  auto res = api.viewer->Get("/devices/" + id + "/track?format=geojson");
  ASSERT_EQ(res->status, 200);
  const auto geo = Json::parse(res->body);
  EXPECT_EQ(geo["features"][0]["geometry"]["type"], "LineString");
  res = api.viewer->Get("/devices/" + id + "/track?format=csv");
  EXPECT_EQ(res->body.rfind("server_time,latitude", 0), 0u);
  api.get("/devices/" + id + "/track?format=kml", 422);
  api.get("/devices/" + id + "/track?from=yesterday", 422);
  api.get("/devices/dev-nope/track", 404);

  const auto fleet = api.get("/fleet/status");
  ASSERT_EQ(fleet["devices"].size(), 1u);
  EXPECT_EQ(fleet["devices"][0]["last_position"]["latitude"], 5.42);
  EXPECT_EQ(fleet["devices"][0]["battery_percent"], 77);
  EXPECT_EQ(fleet["devices"][0]["last_latency_s"], 40.0);
  EXPECT_TRUE(fleet["devices"][0]["outstanding_job"].is_null());
}

TEST(Api, GroupsAndSchedules) {
  Api api;
  const auto a = api.device("359710049887761", "+60100000001");
  const auto b = api.device("359710049887762", "+60100000002");
  const auto g = api.post("/groups", Json{{"name", "pair"}, {"member_device_ids", {a, b}}}, 201);
  const std::string gid = g["group_id"];
  EXPECT_EQ(api.get("/groups/" + gid)["member_device_ids"].size(), 2u);
  auto res = api.admin->Patch("/groups/" + gid, Json{{"member_device_ids", {a}}}.dump(), "application/json");
  EXPECT_EQ(Json::parse(res->body)["member_device_ids"], Json::array({a}));
  api.post("/groups", Json{{"name", "bad"}, {"member_device_ids", {"dev-nope"}}}, 404);

  const auto s = api.post("/schedules",
                          Json{{"kind", "cron"},
                               {"target", {{"type", "group"}, {"id", gid}}},
                               {"expr", "0 14-18 * * 6,0"},
                               {"window", {{"start", "14:00"}, {"end", "19:00"}, {"days", {"sat", "sun"}}}}},
                          201);
  EXPECT_EQ(s["next_due"], "2024-06-01T14:00:00.000Z");
  EXPECT_EQ(api.get("/schedules").size(), 1u);
  const auto bad = api.post("/schedules", Json{{"kind", "cron"}, {"target", gid}, {"cron", "61 * * * *"}}, 422);
  EXPECT_EQ(bad["error"]["code"], "CronSyntaxError");
  EXPECT_EQ(bad["error"]["field"], "0");
  api.post("/schedules", Json{{"kind", "interval"}, {"target", a}, {"every_s", 30}}, 422);
  EXPECT_EQ(api.get("/schedules").size(), 1u);

  const std::string sid = s["schedule_id"];
  res = api.admin->Patch("/schedules/" + sid, R"({"enabled": false})", "application/json");
  EXPECT_TRUE(Json::parse(res->body)["next_due"].is_null());
  EXPECT_EQ(api.admin->Delete("/schedules/" + sid)->status, 204);
  api.get("/schedules/" + sid, 404);
}

TEST(Api, WindowedScheduleFiresOnlyInsideWindow) {
  Api api;
  const auto a = api.device();
  api.post("/schedules",
           Json{{"kind", "cron"},
                {"target", a},
                {"expr", "*/30 * * * *"},
                {"window", {{"start", "14:00"}, {"end", "19:00"}, {"days", {"sat", "sun"}}}}},
           201);
  std::vector<Timestamp> sends;
  for (int m = 0; m < 3 * 24 * 60; ++m) {
    api.clock.advance(minutes(1));
    api.service.tick();
    for (const auto& sms : api.transport.take_outbox()) {
      sends.push_back(sms.submitted_at);
      api.reply("+60123456789", 1, 1, seconds(0));
    }
  }
  // Saturday and Sunday 14:00..18:30 every 30 min: 10 per day.
  ASSERT_EQ(sends.size(), 20u);
  for (auto t : sends) {
    ActivationWindow w;
    w.start_minute = 14 * 60;
    w.end_minute = 19 * 60;
    w.days.set(0).set(6);
    EXPECT_TRUE(window_contains(w, t)) << format_time(t);
  }
}

TEST(Api, BatteryModel) {
  Api api;
  auto m = api.get("/models/battery");
  EXPECT_NEAR(m["idle_mah_per_min"].get<double>(), 0.18344056996503347, 1e-12);
  const auto predicted = api.post("/models/battery/predict", Json{{"interval_min", 20}}, 200);
  EXPECT_NEAR(predicted["lifetime_min"].get<double>(), 3637, 1);
  const auto draft = api.post("/models/battery/predict",
                              Json{{"schedule", {{"kind", "interval"}, {"target", "dev-1"}, {"every_s", 60}}}}, 200);
  EXPECT_NEAR(draft["lifetime_min"].get<double>(), 715, 1);

  const auto fitted = api.post("/models/battery/fit", Json{{"points", {{1, 600}, {20, 3000}}}, {"capacity_mah", 850}}, 200);
  EXPECT_NEAR(api.post("/models/battery/predict", Json{{"interval_min", 1}}, 200)["lifetime_min"].get<double>(), 600, 1e-6);
  EXPECT_EQ(api.get("/models/battery"), fitted);
  api.post("/models/battery/fit", Json{{"points", {{1, 600}}}}, 422);
  auto res = api.viewer->Post("/models/battery/fit", R"({"points":[[1,600],[20,3000]]})", "application/json");
  EXPECT_EQ(res->status, 403);
}

TEST(Api, EventStreamResumesWithoutGapsOrDuplicates) {
  Api api;
  const auto id = api.device();
  api.post("/devices/" + id + "/locate", Json::object(), 202);
  api.reply("+60123456789", 5.41, 118.037, seconds(31));

  auto read_sse = [&](const std::string& path, std::size_t want, const httplib::Headers& headers = {}) {
    std::vector<std::uint64_t> seqs;
    std::vector<std::string> types;
    std::string buffer;
    api.viewer->set_read_timeout(std::chrono::seconds(5));
    api.viewer->Get(path, headers, [&](const char* data, std::size_t len) {
      buffer.append(data, len);
      std::size_t end;
      while (seqs.size() < want && (end = buffer.find("\n\n")) != std::string::npos) {
        const std::string block = buffer.substr(0, end);
        buffer.erase(0, end + 2);
        if (block.rfind("id: ", 0) != 0) continue;
        seqs.push_back(std::stoull(block.substr(4, block.find('\n') - 4)));
        const auto ev = block.find("event: ") + 7;
        types.push_back(block.substr(ev, block.find('\n', ev) - ev));
      }
      return seqs.size() < want;
    });
    return std::pair{seqs, types};
  };

  const auto total = api.service.events().last_seq();
  ASSERT_GE(total, 4u);
  const auto [first, types] = read_sse("/events", 2);
  EXPECT_EQ(first, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(types[0], "job_state_changed");
  // Resume after the last one seen, while new events keep arriving.
  std::thread producer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    api.service.locate_now(id);
  });
  const auto [rest, rest_types] = read_sse("/events", total - 2 + 1, {{"Last-Event-ID", "2"}});
  producer.join();
  std::vector<std::uint64_t> expected;
  for (std::uint64_t s = 3; s <= total + 1; ++s) expected.push_back(s);
  EXPECT_EQ(rest, expected);

  const auto json = api.get("/events?format=json&since=" + std::to_string(total));
  ASSERT_EQ(json.size(), 1u);
  EXPECT_EQ(json[0]["type"], "job_state_changed");
  EXPECT_EQ(json[0]["seq"], total + 1);
}
