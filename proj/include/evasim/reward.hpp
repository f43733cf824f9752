#pragma once

#include <array>
#include <string>

#include "evasim/conflict.hpp"
#include "evasim/kv.hpp"
#include "evasim/world.hpp"

namespace evasim {

inline constexpr double kCollisionPenalty = -200.0;
inline constexpr double kGoalReward = 100.0;

// Per-agent, per-axis speed statistics of the pre-training corpus.
struct AxisStats {
  double mean = 0.0;
  double stddev = 1.0;
};

struct AgentSpeedStats {
  AxisStats longitudinal;
  AxisStats lateral;
};

struct SpeedStats {
  AgentSpeedStats vehicle;
  AgentSpeedStats pedestrian;

  const AgentSpeedStats& of(AgentKind agent) const {
    return agent == AgentKind::Vehicle ? vehicle : pedestrian;
  }
  void validate() const;  // stddev > 0 on every axis
  std::array<double, 8> to_array() const;
  static SpeedStats from_array(const std::array<double, 8>& a);
};

struct RewardWeights {
  double w1 = 1.0 / 3.0;  // collision
  double w2 = 1.0 / 3.0;  // goal
  double w3 = 1.0 / 3.0;  // speed
  double lambda_temp = 0.1;

  void validate() const;
  std::array<double, 3> as_array() const { return {w1, w2, w3}; }
};

struct RewardBreakdown {
  double r_speed = 0.0;
  double r_collision = 0.0;
  double r_goal = 0.0;
};

// Normalised speed-deviation penalty between predicted and observed body-frame
// velocities (longitudinal, lateral). Returns a value <= 0, unscaled.
double speed_reward(const Vec2& predicted, const Vec2& observed, const SpeedStats& stats, AgentKind agent);

// {collision component, goal component}.
std::pair<double, double> event_rewards(bool collided, bool goal_reached);

double total_reward(const RewardBreakdown& b, const RewardWeights& w);

// Multiplicative re-weighting by exp(lambda |mean component|), renormalised.
RewardWeights update_weights(const RewardWeights& w, const std::array<double, 3>& episode_means);

}  // namespace evasim
