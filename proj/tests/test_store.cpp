#include <gtest/gtest.h>

#include <fstream>

#include "smstrack/store.hpp"
#include "smstrack/tar.hpp"
#include "temp_dir.hpp"

using namespace smstrack;
using smstrack::testsupport::TempDir;

namespace {

StoreOptions fast() { return StoreOptions{false, 0}; }

Json position(const std::string& device, std::int64_t t, const std::string& id) {
  return Json{{"position_id", id}, {"device_id", device}, {"server_time", t}, {"latitude", 1.0}};
}

std::string pos_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pos-%08d", i);
  return buf;
}

}  // namespace

TEST(Store, OpenOnEmptyDirectoryIsEmpty) {
  TempDir dir;
  auto store = Store::open(dir / "db", fast());
  EXPECT_EQ(store->count(ns::kDevices), 0u);
  EXPECT_TRUE(store->scan(ns::kPositions).empty());
  EXPECT_TRUE(std::filesystem::exists(dir / "db" / "MANIFEST"));
}

TEST(Store, CrashAndRecoverKeepsAllCommittedPositions) {
  TempDir dir;
  {
    auto store = Store::open(dir / "db", fast());
    for (int i = 0; i < 100; ++i) store->put(ns::kPositions, pos_id(i), position("dev-1", 1000 + i, pos_id(i)));
    // Process dies here: no compaction, no clean shutdown.
  }
  // A torn half-written line at the tail, as a crash mid-write would leave.
  {
    std::ofstream j(dir / "db" / "journal.log", std::ios::app | std::ios::binary);
    j << "deadbeef {\"ops\":[{\"ns\":\"positions\",\"id\":\"pos-99";
  }
  auto store = Store::open(dir / "db", fast());
  const auto track = store->scan_positions("dev-1", 0, 1'000'000);
  ASSERT_EQ(track.size(), 100u);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(track[i]["position_id"], pos_id(i));
  // The torn tail was discarded and the journal remains appendable.
  store->put(ns::kDevices, "dev-1", Json{{"x", 1}});
  auto again = Store::open(dir / "db", fast());
  EXPECT_TRUE(again->get(ns::kDevices, "dev-1"));
}

TEST(Store, CorruptCommittedLineIsRefused) {
  TempDir dir;
  {
    auto store = Store::open(dir / "db", fast());
    store->put(ns::kDevices, "a", Json{{"v", 1}});
    store->put(ns::kDevices, "b", Json{{"v", 2}});
  }
  {
    std::fstream f(dir / "db" / "journal.log", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);
    f.put('X');
  }
  try {
    Store::open(dir / "db", fast());
    FAIL() << "opened a corrupt store";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CorruptStore);
  }
}

TEST(Store, VersionMismatch) {
  TempDir dir;
  { Store::open(dir / "db", fast()); }
  {
    std::ofstream m(dir / "db" / "MANIFEST", std::ios::trunc);
    m << R"({"format":"smstrack-store","version":99})";
  }
  try {
    Store::open(dir / "db", fast());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::VersionMismatch);
  }
}

TEST(Store, ForeignDirectoryIsRefused) {
  TempDir dir;
  std::filesystem::create_directories(dir / "db");
  { std::ofstream(dir / "db" / "something") << "x"; }
  EXPECT_THROW(Store::open(dir / "db", fast()), Error);
}

TEST(Store, BatchIsAtomicAcrossRestart) {
  TempDir dir;
  {
    auto store = Store::open(dir / "db", fast());
    WriteBatch b;
    b.put(ns::kDevices, "d", Json{{"v", 1}}).put(ns::kGroups, "g", Json{{"m", "d"}});
    store->commit(b);
    store->erase(ns::kGroups, "g");
  }
  auto store = Store::open(dir / "db", fast());
  EXPECT_TRUE(store->get(ns::kDevices, "d"));
  EXPECT_FALSE(store->get(ns::kGroups, "g"));
}

TEST(Store, CompactionPreservesStateAndEmptiesJournal) {
  TempDir dir;
  {
    auto store = Store::open(dir / "db", StoreOptions{false, 2048});
    for (int i = 0; i < 200; ++i) store->put(ns::kPositions, pos_id(i), position("dev-1", i, pos_id(i)));
    store->put(ns::kDevices, "dev-1", Json{{"label", "car"}});
    store->erase(ns::kPositions, pos_id(5));
  }
  EXPECT_LT(std::filesystem::file_size(dir / "db" / "journal.log"), 2048u + 512u);
  auto store = Store::open(dir / "db", fast());
  EXPECT_EQ(store->count(ns::kPositions), 199u);
  EXPECT_EQ((*store->get(ns::kDevices, "dev-1"))["label"], "car");
  EXPECT_FALSE(store->get(ns::kPositions, pos_id(5)));
}

TEST(Store, PositionScanOrderingAndCursor) {
  auto store = Store::in_memory();
  store->put(ns::kPositions, "p3", position("a", 30, "p3"));
  store->put(ns::kPositions, "p1", position("a", 10, "p1"));
  store->put(ns::kPositions, "p2", position("a", 20, "p2"));
  store->put(ns::kPositions, "q1", position("b", 15, "q1"));
  auto all = store->scan_positions("a", 0, 100);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0]["position_id"], "p1");
  EXPECT_EQ(all[2]["position_id"], "p3");
  auto window = store->scan_positions("a", 15, 30);
  ASSERT_EQ(window.size(), 2u);
  auto after = store->scan_positions("a", 0, 100, std::pair<std::int64_t, std::string>{10, "p1"}, 1);
  ASSERT_EQ(after.size(), 1u);
  EXPECT_EQ(after[0]["position_id"], "p2");
  EXPECT_EQ((*store->last_position("a"))["position_id"], "p3");
  EXPECT_EQ((*store->last_position("b"))["position_id"], "q1");
  EXPECT_FALSE(store->last_position("c"));
  // Rewriting a position's time moves it in the index.
  store->put(ns::kPositions, "p1", position("a", 40, "p1"));
  EXPECT_EQ((*store->last_position("a"))["position_id"], "p1");
}

TEST(Store, SnapshotRoundTripIntoFreshStore) {
  TempDir dir;
  auto src = Store::open(dir / "a", fast());
  for (int i = 0; i < 20; ++i) src->put(ns::kPositions, pos_id(i), position(i % 2 ? "x" : "y", i, pos_id(i)));
  src->put(ns::kDevices, "x", Json{{"imei", "359710049887766"}});
  src->snapshot_export(dir / "snap.tar");

  auto dst = Store::open(dir / "b", fast());
  dst->snapshot_import(dir / "snap.tar");
  EXPECT_EQ(dst->scan_positions("x", 0, 100), src->scan_positions("x", 0, 100));
  EXPECT_EQ(dst->scan_positions("y", 0, 100), src->scan_positions("y", 0, 100));
  EXPECT_EQ(dst->scan(ns::kDevices), src->scan(ns::kDevices));
  // Archives are reproducible byte for byte.
  EXPECT_EQ(dst->snapshot_archive(), src->snapshot_archive());
  // And the imported data survives a restart.
  dst.reset();
  auto reopened = Store::open(dir / "b", fast());
  EXPECT_EQ(reopened->scan_positions("x", 0, 100), src->scan_positions("x", 0, 100));
}

TEST(Store, SnapshotImportRequiresEmptyStore) {
  auto src = Store::in_memory();
  src->put(ns::kDevices, "x", Json{{"v", 1}});
  auto dst = Store::in_memory();
  dst->put(ns::kDevices, "y", Json{{"v", 2}});
  EXPECT_THROW(dst->snapshot_load(src->snapshot_archive()), Error);
}

TEST(Store, SnapshotVersionMismatch) {
  const auto archive = tar::write({{"manifest.json", R"({"format":"smstrack-store","version":7})"}});
  auto dst = Store::in_memory();
  try {
    dst->snapshot_load(archive);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::VersionMismatch);
  }
}

TEST(Tar, RoundTripAndChecksum) {
  std::vector<tar::Entry> entries{{"a.txt", "hello"}, {"empty", ""}, {"big.jsonl", std::string(1500, 'x')}};
  auto bytes = tar::write(entries);
  EXPECT_EQ(bytes.size() % 512, 0u);
  const auto back = tar::read(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, entries[i].name);
    EXPECT_EQ(back[i].data, entries[i].data);
  }
  bytes[0] = 'b';
  EXPECT_THROW(tar::read(bytes), Error);
}
