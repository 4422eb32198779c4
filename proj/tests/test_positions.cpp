#include <gtest/gtest.h>

#include <set>

#include "smstrack/positions.hpp"

using namespace smstrack;

namespace {

struct Fixture {
  std::unique_ptr<Store> store = Store::in_memory();
  DeviceRegistry registry{*store};
  PositionPipeline pipeline{*store, registry};
  Device dev = registry.register_device("359710049887766", "+60123456789", "123456");
  int next_msg = 0;

  std::optional<Position> ingest(const codec::TrackerMessage& m, Timestamp t) {
    return pipeline.ingest(dev.device_id, m, t, "msg-" + std::to_string(++next_msg));
  }
};

const Timestamp kT0 = utc(2024, 6, 1, 10);

}  // namespace

TEST(Pipeline, FreshFix) {
  Fixture f;
  const auto p = f.ingest(codec::make_fix(5.41, 118.037, 0, 85, "359710049887766"), kT0);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->fix_quality, FixQuality::Fresh);
  EXPECT_EQ(p->battery_percent, 85);
  EXPECT_EQ(p->latitude, 5.41);
  EXPECT_EQ(p->server_time, kT0);
  EXPECT_FALSE(p->repeat);
}

TEST(Pipeline, StaleRepeatsAreStoredAndFlagged) {
  Fixture f;
  const auto m = codec::make_fix(5.41, 118.037, 0, 80, "359710049887766", true);
  const auto first = f.ingest(m, kT0);
  const auto second = f.ingest(m, kT0 + seconds(60));
  ASSERT_TRUE(first && second);
  EXPECT_EQ(first->fix_quality, FixQuality::Stale);
  EXPECT_FALSE(first->repeat);
  EXPECT_TRUE(second->repeat);
  EXPECT_EQ(f.pipeline.query_track(f.dev.device_id, kT0, kT0 + seconds(60)).positions.size(), 2u);
  // A fresh fix at the same place is not a repeat.
  const auto fresh = f.ingest(codec::make_fix(5.41, 118.037, 0, 80, "359710049887766"), kT0 + seconds(120));
  EXPECT_FALSE(fresh->repeat);
}

TEST(Pipeline, IncompleteAndUnrecognized) {
  Fixture f;
  const auto salvaged = f.ingest(codec::parse_tracker_response("http://maps.google.com/maps?q=5.410000,118.037000"), kT0);
  ASSERT_TRUE(salvaged);
  EXPECT_EQ(salvaged->fix_quality, FixQuality::Salvaged);
  EXPECT_FALSE(salvaged->battery_percent);
  EXPECT_FALSE(f.ingest(codec::parse_tracker_response("http://maps.google.com/maps?q=5.41"), kT0 + seconds(1)));
  EXPECT_FALSE(f.ingest(codec::parse_tracker_response("GPS signal lost"), kT0 + seconds(2)));
  EXPECT_EQ(f.store->count(ns::kPositions), 1u);
}

TEST(Pipeline, IngestIsIdempotentOnSourceMessage) {
  Fixture f;
  const auto m = codec::make_fix(1, 2, 3, 4, "359710049887766");
  const auto a = f.pipeline.ingest(f.dev.device_id, m, kT0, "msg-x");
  const auto b = f.pipeline.ingest(f.dev.device_id, m, kT0 + seconds(5), "msg-x");
  EXPECT_EQ(a, b);
  EXPECT_EQ(f.store->count(ns::kPositions), 1u);
  // Also across a restart of the pipeline.
  PositionPipeline again(*f.store, f.registry);
  EXPECT_EQ(again.ingest(f.dev.device_id, m, kT0 + seconds(9), "msg-x"), a);
  EXPECT_EQ(f.store->count(ns::kPositions), 1u);
}

TEST(Pipeline, ServerTimeStrictlyIncreases) {
  Fixture f;
  const auto m = codec::make_fix(1, 2, 3, 4, "359710049887766");
  const auto a = f.ingest(m, kT0);
  const auto b = f.ingest(m, kT0);
  const auto c = f.ingest(m, kT0 - seconds(10));
  EXPECT_LT(a->server_time, b->server_time);
  EXPECT_LT(b->server_time, c->server_time);
}

TEST(Pipeline, UnknownDevice) {
  Fixture f;
  try {
    f.pipeline.ingest("dev-nope", codec::make_fix(1, 2, 3, 4, "359710049887766"), kT0, "m");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownDevice);
  }
  EXPECT_THROW(f.pipeline.query_track("dev-nope", kT0, kT0), Error);
}

TEST(Track, RangeSelection) {
  Fixture f;
  for (int i = 0; i < 3; ++i) f.ingest(codec::make_fix(i, i, 0, 50, "359710049887766"), kT0 + minutes(i));
  EXPECT_TRUE(f.pipeline.query_track(f.dev.device_id, kT0 - minutes(10), kT0 - minutes(5)).positions.empty());
  const auto two = f.pipeline.query_track(f.dev.device_id, kT0 + minutes(1), kT0 + minutes(2)).positions;
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0].latitude, 1);
  EXPECT_EQ(two[1].latitude, 2);
  EXPECT_THROW(f.pipeline.query_track(f.dev.device_id, kT0 + minutes(1), kT0), Error);
}

TEST(Track, PaginationHasNoGapsOrDuplicates) {
  for (int n = 0; n <= 7; ++n) {
    for (std::size_t page_size = 1; page_size <= 8; ++page_size) {
      Fixture f;
      for (int i = 0; i < n; ++i) f.ingest(codec::make_fix(i, i, 0, 50, "359710049887766"), kT0 + seconds(i / 2));
      const auto all = f.pipeline.query_track(f.dev.device_id, kT0, kT0 + minutes(1)).positions;
      ASSERT_EQ(all.size(), static_cast<std::size_t>(n));
      std::vector<Position> paged;
      std::optional<TrackCursor> cursor;
      int pages = 0;
      do {
        auto page = f.pipeline.query_track(f.dev.device_id, kT0, kT0 + minutes(1), cursor, page_size);
        ASSERT_LE(page.positions.size(), page_size);
        paged.insert(paged.end(), page.positions.begin(), page.positions.end());
        cursor = page.next;
        if (cursor) cursor = TrackCursor::decode(cursor->encode());
        ASSERT_LT(++pages, 20);
      } while (cursor);
      EXPECT_EQ(paged, all) << n << " positions, page size " << page_size;
    }
  }
}

TEST(Track, CursorDecodeRejectsGarbage) {
  EXPECT_THROW(TrackCursor::decode("nocolon"), Error);
  EXPECT_THROW(TrackCursor::decode("abc:pos-1"), Error);
}

TEST(Export, Csv) {
  Fixture f;
  f.ingest(codec::make_fix(5.41, 118.037, 12.5, 85, "359710049887766"), kT0);
  f.ingest(codec::parse_tracker_response("http://maps.google.com/maps?q=5.420000,118.040000"), kT0 + minutes(1));
  const auto csv = f.pipeline.export_track(f.dev.device_id, kT0, kT0 + minutes(5), ExportFormat::Csv);
  EXPECT_EQ(csv,
            "server_time,latitude,longitude,speed,battery_percent,fix_quality\n"
            "2024-06-01T10:00:00.000Z,5.410000,118.037000,12.5,85,fresh\n"
            "2024-06-01T10:01:00.000Z,5.420000,118.040000,,,salvaged\n");
}

TEST(Export, GeoJsonLineStringUsesFreshFixesOnly) {
  Fixture f;
  f.ingest(codec::make_fix(1, 10, 0, 50, "359710049887766"), kT0);
  f.ingest(codec::make_fix(2, 20, 0, 50, "359710049887766", true), kT0 + minutes(1));
  f.ingest(codec::make_fix(3, 30, 0, 50, "359710049887766"), kT0 + minutes(2));
  const auto doc = Json::parse(f.pipeline.export_track(f.dev.device_id, kT0, kT0 + minutes(5), ExportFormat::GeoJson));
  EXPECT_EQ(doc["type"], "FeatureCollection");
  ASSERT_EQ(doc["features"].size(), 4u);
  const auto& line = doc["features"][0]["geometry"];
  EXPECT_EQ(line["type"], "LineString");
  EXPECT_EQ(line["coordinates"], Json::parse("[[10.0,1.0],[30.0,3.0]]"));
  std::set<std::string> qualities;
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_EQ(doc["features"][i]["geometry"]["type"], "Point");
    qualities.insert(doc["features"][i]["properties"]["fix_quality"].get<std::string>());
  }
  EXPECT_EQ(qualities, (std::set<std::string>{"fresh", "stale"}));
}

TEST(Export, GeoJsonEdgeCases) {
  Fixture f;
  auto doc = Json::parse(f.pipeline.export_track(f.dev.device_id, kT0, kT0, ExportFormat::GeoJson));
  EXPECT_EQ(doc, Json::parse(R"({"type":"FeatureCollection","features":[]})"));
  f.ingest(codec::make_fix(1, 10, 0, 50, "359710049887766"), kT0);
  f.ingest(codec::make_fix(2, 20, 0, 50, "359710049887766"), kT0 + minutes(1));
  doc = Json::parse(f.pipeline.export_track(f.dev.device_id, kT0, kT0 + minutes(1), ExportFormat::GeoJson));
  EXPECT_EQ(doc["features"][0]["geometry"]["coordinates"].size(), 2u);
  EXPECT_THROW(export_format_from_name("kml"), Error);
}
