#include <gtest/gtest.h>

#include <random>

#include "cron_oracle.hpp"
#include "smstrack/cron.hpp"

using namespace smstrack;
using namespace smstrack::cron;

TEST(ParseCron, EveryFifthMinute) {
  const auto spec = parse_cron("*/5 * * * *");
  for (int m = 0; m < 60; ++m) EXPECT_EQ(spec.minutes[m], m % 5 == 0) << m;
  EXPECT_TRUE(spec.hours.all());
  EXPECT_FALSE(spec.dom_restricted);
}

TEST(ParseCron, WeekendAfternoons) {
  const auto spec = parse_cron("0 14-18 * * 6,0");
  EXPECT_EQ(spec.minutes.count(), 1u);
  EXPECT_TRUE(spec.minutes[0]);
  for (int h = 0; h < 24; ++h) EXPECT_EQ(spec.hours[h], h >= 14 && h <= 18) << h;
  EXPECT_TRUE(spec.days_of_week[6]);
  EXPECT_TRUE(spec.days_of_week[0]);
  EXPECT_EQ(spec.days_of_week.count(), 2u);
  // Saturday 2024-06-01 15:00 matches; Wednesday does not; 19:00 does not.
  EXPECT_TRUE(spec.matches(absl::CivilMinute(2024, 6, 1, 15, 0)));
  EXPECT_FALSE(spec.matches(absl::CivilMinute(2024, 6, 5, 15, 0)));
  EXPECT_FALSE(spec.matches(absl::CivilMinute(2024, 6, 1, 19, 0)));
  EXPECT_TRUE(spec.matches(absl::CivilMinute(2024, 6, 2, 18, 0)));
}

TEST(ParseCron, SevenIsSunday) {
  const auto spec = parse_cron("0 0 * * 7");
  EXPECT_TRUE(spec.days_of_week[0]);
  EXPECT_EQ(spec.days_of_week.count(), 1u);
}

TEST(ParseCron, ErrorsCarryFieldIndex) {
  auto field_of = [](const char* expr) -> std::string {
    try {
      parse_cron(expr);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::CronSyntaxError);
      return e.field();
    }
    return "accepted";
  };
  EXPECT_EQ(field_of("61 * * * *"), "0");
  EXPECT_EQ(field_of("* 24 * * *"), "1");
  EXPECT_EQ(field_of("* * 0 * *"), "2");
  EXPECT_EQ(field_of("* * * 13 *"), "3");
  EXPECT_EQ(field_of("* * * * 8"), "4");
  EXPECT_EQ(field_of("*/0 * * * *"), "0");
  EXPECT_EQ(field_of("5-1 * * * *"), "0");
  EXPECT_EQ(field_of("a * * * *"), "0");
  EXPECT_EQ(field_of("1,,2 * * * *"), "0");
  EXPECT_EQ(field_of("* * * *"), "expression");
  EXPECT_EQ(field_of("* * * * * *"), "expression");
}

TEST(NextFire, FifthMinuteAfterNoonTwo) {
  const auto utc_zone = absl::UTCTimeZone();
  const auto spec = parse_cron("*/5 * * * *");
  const auto after = utc(2024, 6, 1, 12, 2);
  const auto expected = testsupport::NaiveCron("*/5 * * * *").scan(after, after + minutes(10), utc_zone).front();
  EXPECT_EQ(expected, utc(2024, 6, 1, 12, 5));
  EXPECT_EQ(*next_fire(spec, after, utc_zone), expected);
}

TEST(NextFire, NewYear) {
  const auto spec = parse_cron("0 0 1 1 *");
  const auto after = utc(2024, 6, 1);
  const auto oracle = testsupport::NaiveCron("0 0 1 1 *").scan(after, after + std::chrono::hours(24 * 366), absl::UTCTimeZone());
  ASSERT_FALSE(oracle.empty());
  EXPECT_EQ(oracle.front(), utc(2025, 1, 1));
  EXPECT_EQ(*next_fire(spec, after, absl::UTCTimeZone()), oracle.front());
}

TEST(NextFire, StrictlyAfter) {
  const auto spec = parse_cron("*/5 * * * *");
  EXPECT_EQ(*next_fire(spec, utc(2024, 6, 1, 12, 5), absl::UTCTimeZone()), utc(2024, 6, 1, 12, 10));
  EXPECT_EQ(*next_fire(spec, utc(2024, 6, 1, 12, 5) - Duration{1}, absl::UTCTimeZone()), utc(2024, 6, 1, 12, 5));
}

TEST(NextFire, LocalZone) {
  // 14:00 in Kuching (UTC+8) is 06:00 UTC.
  const auto zone = load_zone("Asia/Kuching");
  EXPECT_EQ(*next_fire(parse_cron("0 14 * * *"), utc(2024, 6, 1), zone), utc(2024, 6, 1, 6, 0));
}

TEST(NextFire, ImpossibleDateHasNoOccurrence) {
  EXPECT_FALSE(next_fire(parse_cron("0 0 30 2 *"), utc(2024, 1, 1), absl::UTCTimeZone()));
}

TEST(NextFire, LeapDay) {
  EXPECT_EQ(*next_fire(parse_cron("0 0 29 2 *"), utc(2024, 3, 1), absl::UTCTimeZone()), utc(2028, 2, 29));
}

TEST(NextFire, DomOrDowWhenBothRestricted) {
  // 1st of the month OR any Monday. 2024-06-03 is a Monday.
  EXPECT_EQ(*next_fire(parse_cron("0 0 1 * 1"), utc(2024, 6, 1, 1), absl::UTCTimeZone()), utc(2024, 6, 3));
}

TEST(NextFire, DstGapAndOverlapAgreeWithScan) {
  const auto zone = load_zone("Europe/London");
  for (const char* expr : {"30 1 * * *", "*/15 0-3 * * *", "0 2 * * 0"}) {
    const testsupport::NaiveCron oracle(expr);
    const auto spec = parse_cron(expr);
    // Around the 2024 spring-forward (31 Mar) and fall-back (27 Oct).
    for (auto start : {utc(2024, 3, 29), utc(2024, 10, 25)}) {
      const auto expected = oracle.scan(start, start + std::chrono::hours(24 * 5), zone);
      Timestamp t = start;
      for (const auto e : expected) {
        const auto got = next_fire(spec, t, zone);
        ASSERT_TRUE(got);
        ASSERT_EQ(format_time(*got), format_time(e)) << expr << " after " << format_time(t);
        t = *got;
      }
    }
  }
}

TEST(NextFireProperty, RandomExpressionsAgreeWithMinuteScan) {
  std::mt19937_64 rng(42);
  const auto zone = load_zone("Asia/Kuching");
  const auto from = utc(2025, 1, 1);
  const auto horizon = from + std::chrono::hours(24 * 365);
  for (int i = 0; i < 20; ++i) {
    const auto expr = testsupport::random_cron(rng);
    const auto expected = testsupport::NaiveCron(expr).scan(from, horizon, zone);
    const auto spec = parse_cron(expr);
    std::uniform_int_distribution<std::int64_t> pick(unix_millis(from), unix_millis(horizon));
    for (int k = 0; k < 20; ++k) {
      const auto after = from_unix_millis(pick(rng));
      const auto it = std::upper_bound(expected.begin(), expected.end(), after);
      const auto got = next_fire(spec, after, zone);
      if (it == expected.end()) {
        EXPECT_TRUE(!got || *got > horizon) << expr;
      } else {
        ASSERT_TRUE(got) << expr;
        EXPECT_EQ(*got, *it) << expr << " after " << format_time(after);
      }
    }
  }
}
