#include "evasim/reward.hpp"

#include <cmath>

#include "evasim/error.hpp"

namespace evasim {

void SpeedStats::validate() const {
  for (const auto* a : {&vehicle, &pedestrian}) {
    for (const auto* s : {&a->longitudinal, &a->lateral}) {
      if (!(s->stddev > 0.0) || !std::isfinite(s->stddev) || !std::isfinite(s->mean)) {
        throw ConfigError("speed statistics need a finite, positive standard deviation on every axis");
      }
    }
  }
}

std::array<double, 8> SpeedStats::to_array() const {
  return {vehicle.longitudinal.mean,    vehicle.longitudinal.stddev,    vehicle.lateral.mean,
          vehicle.lateral.stddev,       pedestrian.longitudinal.mean, pedestrian.longitudinal.stddev,
          pedestrian.lateral.mean,      pedestrian.lateral.stddev};
}

SpeedStats SpeedStats::from_array(const std::array<double, 8>& a) {
  SpeedStats s;
  s.vehicle = {{a[0], a[1]}, {a[2], a[3]}};
  s.pedestrian = {{a[4], a[5]}, {a[6], a[7]}};
  return s;
}

void RewardWeights::validate() const {
  if (w1 < 0 || w2 < 0 || w3 < 0) throw ConfigError("reward weights must be non-negative");
  if (std::abs(w1 + w2 + w3 - 1.0) > 1e-12) throw ConfigError("reward weights must sum to 1");
  if (!(lambda_temp >= 0)) throw ConfigError("lambda_temp must be non-negative");
}

double speed_reward(const Vec2& predicted, const Vec2& observed, const SpeedStats& stats, AgentKind agent) {
  const auto& s = stats.of(agent);
  if (!(s.longitudinal.stddev > 0) || !(s.lateral.stddev > 0)) {
    throw ConfigError("speed reward requires positive standard deviations");
  }
  const auto z = [](double v, const AxisStats& a) { return (v - a.mean) / a.stddev; };
  const double d_long = z(predicted.x(), s.longitudinal) - z(observed.x(), s.longitudinal);
  const double d_lat = z(predicted.y(), s.lateral) - z(observed.y(), s.lateral);
  return -(d_long * d_long + d_lat * d_lat);
}

std::pair<double, double> event_rewards(bool collided, bool goal_reached) {
  return {collided ? kCollisionPenalty : 0.0, goal_reached ? kGoalReward : 0.0};
}

double total_reward(const RewardBreakdown& b, const RewardWeights& w) {
  return w.w1 * b.r_collision + w.w2 * b.r_goal + w.w3 * b.r_speed;
}

RewardWeights update_weights(const RewardWeights& w, const std::array<double, 3>& means) {
  const std::array<double, 3> cur = w.as_array();
  // Shift exponents by their maximum so large component means cannot overflow.
  std::array<double, 3> expo{};
  double top = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    expo[k] = w.lambda_temp * std::abs(means[k]);
    top = std::max(top, expo[k]);
  }
  std::array<double, 3> raw{};
  double total = 0.0;
  for (int k = 0; k < 3; ++k) {
    raw[k] = cur[k] * std::exp(expo[k] - top);
    total += raw[k];
  }
  RewardWeights out = w;
  if (!(total > 0.0) || !std::isfinite(total)) return out;
  out.w1 = raw[0] / total;
  out.w2 = raw[1] / total;
  out.w3 = 1.0 - out.w1 - out.w2;
  if (out.w3 < 0.0) out.w3 = 0.0;
  return out;
}

}  // namespace evasim
