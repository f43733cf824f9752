#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "evasim/world.hpp"

namespace evasim {

enum class Termination { Collision, Goal, Timeout };

std::string to_string(Termination t);
Termination termination_from_string(const std::string& s);

// One dataset row. Missing velocity components are NaN; an infinite
// curv_ttc means no projected contact within the horizon.
struct Frame {
  int frame = 0;
  Vec2 veh_pos = Vec2::Zero();
  Vec2 veh_vel = Vec2::Zero();
  Vec2 ped_pos = Vec2::Zero();
  Vec2 ped_vel = Vec2::Zero();
  double distance = 0.0;
  double curv_ttc = std::numeric_limits<double>::infinity();
};

struct EpisodeRecord {
  int count = 0;
  int veh_id = 0;
  int ped_id = 0;
  std::vector<Frame> frames;
  Termination termination = Termination::Timeout;
  ScenarioTag tag;
  std::uint64_t seed = 0;
  double dt_s = 0.05;
};

}  // namespace evasim
