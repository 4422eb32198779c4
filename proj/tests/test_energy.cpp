#include <gtest/gtest.h>

#include "smstrack/energy.hpp"

using namespace smstrack;
using namespace smstrack::energy;

namespace {

// Frozen from an independent solve of the 2x2 system on (1, 715), (20, 3637), 850 mAh.
constexpr double kIdleMahPerMinute = 0.18344056996503347;
constexpr double kPerRequestMah = 1.0053706188461553;
constexpr double kIdleOnlyMinutes = 4633.653287067429;

Schedule interval_minutes(int m, Timestamp anchor) {
  Schedule s;
  s.kind = ScheduleKind::Interval;
  s.every = minutes(m);
  s.anchor = anchor;
  s.target.id = "dev-00000001";
  return s;
}

}  // namespace

TEST(Energy, FitOnMeasuredEndpoints) {
  const auto m = fit_battery_model({{1, 715}, {20, 3637}}, 850);
  EXPECT_NEAR(m.idle_mah_per_minute(), kIdleMahPerMinute, 1e-12);
  EXPECT_NEAR(m.idle_draw_ma, kIdleMahPerMinute * 60, 1e-10);
  EXPECT_NEAR(m.per_request_mah, kPerRequestMah, 1e-12);
  EXPECT_NEAR(predict_lifetime(m, 1), 715, 715e-3);
  EXPECT_NEAR(predict_lifetime(m, 20), 3637, 3637e-3);
  EXPECT_NEAR(m.idle_only_lifetime_minutes(), kIdleOnlyMinutes, 1e-6);
  EXPECT_LT(predict_lifetime(m, 1e7), kIdleOnlyMinutes);
  EXPECT_NEAR(predict_lifetime(m, 1e7), kIdleOnlyMinutes, 0.1);
  EXPECT_EQ(reference_model(), m);
}

TEST(Energy, MonotoneNonDecreasing) {
  const auto m = reference_model();
  double prev = 0;
  for (double i = 1; i <= 60; i += 0.25) {
    const double l = predict_lifetime(m, i);
    EXPECT_GE(l, prev) << i;
    prev = l;
  }
}

TEST(Energy, FitRecoversGeneratingModel) {
  const BatteryModel truth{850, 9.0, 0.7};
  std::vector<LifetimePoint> points;
  for (double i : {1.0, 2.0, 5.0, 30.0}) points.push_back({i, predict_lifetime(truth, i)});
  const auto fit = fit_battery_model(points, 850);
  EXPECT_NEAR(fit.idle_draw_ma, truth.idle_draw_ma, 1e-9);
  EXPECT_NEAR(fit.per_request_mah, truth.per_request_mah, 1e-9);
  for (double held_out : {3.0, 10.0, 45.0, 120.0}) {
    EXPECT_NEAR(predict_lifetime(fit, held_out) / predict_lifetime(truth, held_out), 1.0, 0.005);
  }
}

TEST(Energy, FitPreconditions) {
  auto code = [](const std::vector<LifetimePoint>& pts, double cap) {
    try {
      fit_battery_model(pts, cap);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Validation;
  };
  EXPECT_EQ(code({{1, 715}}, 850), Errc::PreconditionViolated);
  EXPECT_EQ(code({{1, 715}, {1, 700}}, 850), Errc::PreconditionViolated);
  EXPECT_EQ(code({{1, 715}, {20, 3637}}, 0), Errc::PreconditionViolated);
  // A longer interval with a shorter life forces a negative charge.
  EXPECT_EQ(code({{1, 715}, {20, 500}}, 850), Errc::DegenerateFit);
  EXPECT_THROW(predict_lifetime(reference_model(), 0.5), Error);
}

TEST(Energy, ScheduleLifetimeMatchesClosedForm) {
  const auto m = reference_model();
  const auto start = utc(2024, 6, 3);
  EXPECT_NEAR(predict_lifetime_for_schedule(m, interval_minutes(20, start), start), 3637, 20);
  EXPECT_NEAR(predict_lifetime_for_schedule(m, interval_minutes(1, start), start), 715, 1);
  for (int i : {2, 5, 15, 45}) {
    EXPECT_NEAR(predict_lifetime_for_schedule(m, interval_minutes(i, start), start), predict_lifetime(m, i), i) << i;
  }
}

TEST(Energy, WindowExtendsLifetime) {
  const auto m = reference_model();
  const auto start = utc(2024, 6, 3);
  auto windowed = interval_minutes(5, start);
  ActivationWindow w;
  w.start_minute = 14 * 60;
  w.end_minute = 19 * 60;
  w.days.set(0).set(6);
  windowed.window = w;
  EXPECT_GT(predict_lifetime_for_schedule(m, windowed, start),
            predict_lifetime_for_schedule(m, interval_minutes(5, start), start));
}

TEST(Energy, NoFiresMeansIdleOnly) {
  const auto m = reference_model();
  const auto start = utc(2024, 6, 3);
  Schedule past;
  past.kind = ScheduleKind::Date;
  past.at = start - minutes(1);
  past.target.id = "dev-00000001";
  EXPECT_NEAR(predict_lifetime_for_schedule(m, past, start), kIdleOnlyMinutes, 1e-6);
}

TEST(Energy, ModelFileRoundTrip) {
  const auto m = reference_model();
  EXPECT_EQ(parse_model(format_model(m)), m);
  EXPECT_THROW(parse_model("capacity_mah=850\nidle_draw_ma=11\n"), Error);
  EXPECT_THROW(parse_model("capacity_mah=850\nidle_draw_ma=11\nper_request_mah=-1\n"), Error);
  EXPECT_THROW(parse_model("capacity_mah=850\nidle_draw_ma=x\nper_request_mah=1\n"), Error);
  EXPECT_EQ(model_from_json(to_json(m)), m);
}
