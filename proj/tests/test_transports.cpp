#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "fake_modem.hpp"
#include "smstrack/service.hpp"
#include "smstrack/transports.hpp"

using namespace smstrack;
using smstrack::testsupport::FakeModem;

namespace {

const Timestamp kT0 = utc(2024, 6, 1, 10);

AtModemOptions quick() { return AtModemOptions{std::chrono::milliseconds(300), std::chrono::milliseconds(300)}; }

}  // namespace

TEST(AtModem, InitSequence) {
  FakeModem modem;
  ManualClock clock{kT0};
  AtModemTransport transport(modem, clock, quick());
  transport.init();
  EXPECT_EQ(modem.commands, (std::vector<std::string>{"AT", "ATE0", "AT+CMGF=1"}));
}

TEST(AtModem, SendUsesPromptAndCtrlZ) {
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    FakeModem modem(seed);
    ManualClock clock{kT0};
    AtModemTransport transport(modem, clock, quick());
    transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-1"});
    ASSERT_EQ(modem.sent.size(), 1u);
    EXPECT_EQ(modem.sent[0].to, "+60123456789");
    EXPECT_EQ(modem.sent[0].body, "smslink123456");
    EXPECT_EQ(modem.commands.back(), "AT+CMGS=\"+60123456789\"");
  }
}

TEST(AtModem, PollListsReceivedAndDeletesAll) {
  FakeModem modem(7);
  ManualClock clock{kT0};
  AtModemTransport transport(modem, clock, quick());
  transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-1"});
  modem.receive("+60123456789", "lat:5.410000 lon:118.037000 speed:0.0 bat:85% id:359710049887766");
  modem.receive("+60100000002", "first line\nsecond line");
  clock.advance(seconds(30));
  const auto in = transport.poll();
  ASSERT_EQ(in.size(), 2u);
  EXPECT_EQ(in[0].from, "+60123456789");
  EXPECT_EQ(in[0].body, "lat:5.410000 lon:118.037000 speed:0.0 bat:85% id:359710049887766");
  EXPECT_EQ(in[0].received_at, kT0 + seconds(30));
  EXPECT_EQ(in[1].body, "first line\nsecond line");
  EXPECT_TRUE(modem.storage_.empty());
  EXPECT_TRUE(transport.poll().empty());
}

TEST(AtModem, FailedDeleteDoesNotRedeliver) {
  FakeModem modem;
  ManualClock clock{kT0};
  AtModemTransport transport(modem, clock, quick());
  modem.receive("+60123456789", "hello");
  modem.failing_deletes = 1;
  EXPECT_EQ(transport.poll().size(), 1u);
  EXPECT_EQ(modem.storage_.size(), 1u);
  modem.receive("+60123456789", "again");
  const auto second = transport.poll();
  ASSERT_EQ(second.size(), 1u);
  EXPECT_EQ(second[0].body, "again");
  EXPECT_TRUE(modem.storage_.empty());
}

TEST(AtModem, ErrorsBecomeTransportUnavailable) {
  FakeModem modem;
  ManualClock clock{kT0};
  AtModemTransport transport(modem, clock, quick());
  modem.reject_sends = true;
  try {
    transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-1"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TransportUnavailable);
  }
  modem.reject_sends = false;
  transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-2"});
  EXPECT_EQ(modem.sent.size(), 1u);

  modem.silent = true;
  EXPECT_THROW(transport.poll(), Error);
  EXPECT_THROW(transport.send(OutboundSms{"+60123456789", std::string(161, 'x'), kT0, "job-3"}), Error);
}

TEST(AtModem, ParseCmglHeaders) {
  const auto out = parse_cmgl({"+CMGL: 3,\"REC UNREAD\",\"+60123\",,\"24/06/01,10:00:00+32\"", "body, with comma",
                               "+CMGL: 4,\"REC READ\",\"+60124\",\"Alice\",\"24/06/01,10:01:00+32\"", "x"});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].index, 3);
  EXPECT_EQ(out[0].from, "+60123");
  EXPECT_EQ(out[0].scts, "24/06/01,10:00:00+32");
  EXPECT_EQ(out[0].body, "body, with comma");
  EXPECT_EQ(out[1].status, "REC READ");
  EXPECT_THROW(parse_cmgl({"+CMGL: x,\"REC READ\""}), Error);
}

TEST(AtModem, DrivesServiceEndToEnd) {
  FakeModem modem(9);
  ManualClock clock{kT0};
  AtModemTransport transport(modem, clock, quick());
  auto store = Store::in_memory();
  TrackerService service(*store, transport, clock);
  const auto dev = service.register_device("359710049887766", "+60123456789", "123456");
  service.locate_now(dev.device_id);
  ASSERT_EQ(modem.sent.size(), 1u);
  EXPECT_EQ(modem.sent[0].body, "smslink123456");
  clock.advance(seconds(35));
  modem.receive("+60123456789",
                "lat:5.410000 lon:118.037000 speed:0.0 bat:85% id:359710049887766 "
                "http://maps.google.com/maps?q=5.410000,118.037000");
  service.tick();
  EXPECT_FALSE(service.outstanding_job(dev.device_id));
  const auto track = service.query_track(dev.device_id, kT0, kT0 + minutes(1)).positions;
  ASSERT_EQ(track.size(), 1u);
  EXPECT_EQ(track[0].latitude, 5.41);
}

namespace {

/// HTTP modem gateway double on an ephemeral port.
class FakeHttpModem {
 public:
  FakeHttpModem() {
    server_.Post("/sms", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      if (fail) {
        res.status = 503;
        return;
      }
      sent.push_back(Json::parse(req.body));
      res.status = 202;
    });
    server_.Get("/sms/inbox", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      sinces.push_back(req.has_param("since") ? req.get_param_value("since") : "");
      Json out = Json::array();
      for (const auto& m : inbox) {
        if (!req.has_param("since") || parse_time(m["received_at"].get<std::string>()) >= parse_time(req.get_param_value("since"))) {
          out.push_back(m);
        }
      }
      res.set_content(out.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeHttpModem() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  void add(const std::string& id, const std::string& from, const std::string& body, Timestamp at) {
    std::lock_guard lock(mutex_);
    inbox.push_back(Json{{"id", id}, {"from", from}, {"body", body}, {"received_at", format_time(at)}});
  }

  std::mutex mutex_;
  std::vector<Json> sent;
  std::vector<Json> inbox;
  std::vector<std::string> sinces;
  bool fail = false;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(HttpModem, SendPostsJson) {
  FakeHttpModem modem;
  ManualClock clock{kT0};
  HttpModemTransport transport(modem.url(), clock);
  transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-1"});
  ASSERT_EQ(modem.sent.size(), 1u);
  EXPECT_EQ(modem.sent[0], Json::parse(R"({"to":"+60123456789","body":"smslink123456"})"));
  modem.fail = true;
  try {
    transport.send(OutboundSms{"+60123456789", "smslink123456", kT0, "job-2"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TransportUnavailable);
  }
}

TEST(HttpModem, InboxCursorWithEqualTimestamps) {
  FakeHttpModem modem;
  ManualClock clock{kT0};
  HttpModemTransport transport(modem.url(), clock);
  modem.add("a", "+601", "one", kT0);
  modem.add("b", "+602", "two", kT0 + seconds(5));
  auto in = transport.poll();
  ASSERT_EQ(in.size(), 2u);
  EXPECT_EQ(in[0].body, "one");
  EXPECT_EQ(in[1].body, "two");
  EXPECT_EQ(modem.sinces.back(), "");
  // A message with the cursor's timestamp arriving later is still delivered, once.
  modem.add("c", "+603", "three", kT0 + seconds(5));
  in = transport.poll();
  ASSERT_EQ(in.size(), 1u);
  EXPECT_EQ(in[0].body, "three");
  EXPECT_EQ(modem.sinces.back(), format_time(kT0 + seconds(5)));
  EXPECT_TRUE(transport.poll().empty());
}

TEST(HttpModem, UnreachableGateway) {
  ManualClock clock{kT0};
  HttpModemTransport transport("http://127.0.0.1:1", clock, std::chrono::milliseconds(200));
  EXPECT_THROW(transport.poll(), Error);
  EXPECT_THROW(transport.send(OutboundSms{"+601", "smslink123456", kT0, "j"}), Error);
}
