#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evasim/kv.hpp"

namespace evasim {

using Vec2 = Eigen::Vector2d;
using Rng = std::mt19937_64;

struct VehicleSpec {
  double wheelbase_m = 2.875;
  double max_steer_rad = 0.52;
  double max_accel_mps2 = 9.25;
  double max_decel_mps2 = 8.88;
  double steer_epsilon = 1e-6;
  double body_radius_m = 1.0;

  void validate() const;
};

struct PedestrianSpec {
  double max_accel_mps2 = 4.0;
  double max_decel_mps2 = 4.0;
  double body_radius_m = 0.3;

  void validate() const;
};

// World-frame kinematic state. `accel` is the last applied world-frame
// acceleration; CurvTTC derives the vehicle's path curvature from it.
struct AgentState {
  Vec2 pos = Vec2::Zero();
  Vec2 vel = Vec2::Zero();
  Vec2 accel = Vec2::Zero();
  double heading = 0.0;
};

// Body-frame feature vector: own speeds, distances to the other agent
// (other - own) and relative speeds (own - other).
struct Observation {
  double own_long_speed = 0.0;
  double own_lat_speed = 0.0;
  double rel_long_dist = 0.0;
  double rel_lat_dist = 0.0;
  double rel_long_speed = 0.0;
  double rel_lat_speed = 0.0;

  static constexpr int kSize = 6;
  std::array<double, kSize> to_array() const {
    return {own_long_speed, own_lat_speed, rel_long_dist, rel_lat_dist, rel_long_speed, rel_lat_speed};
  }
  static Observation from_array(const std::array<double, kSize>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }
};

// Body-frame acceleration command.
struct Action {
  double long_accel = 0.0;
  double lat_accel = 0.0;
};

struct AccelLimits {
  double max_accel = 0.0;
  double max_decel = 0.0;
};

Action clamp_action(const Action& action, const AccelLimits& limits);

struct Control {
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

// Unit vectors of the body frame: longitudinal = heading, lateral = +90 deg.
Vec2 long_axis(double heading);
Vec2 lat_axis(double heading);
Vec2 to_body(const Vec2& world, double heading);
Vec2 to_world(const Vec2& body, double heading);

// Returns {vehicle observation, pedestrian observation}.
std::pair<Observation, Observation> observe(const AgentState& veh, const AgentState& ped);

// Explicit Euler on the body-frame acceleration rotated by the current
// heading. Heading follows the new velocity unless the agent is (nearly)
// stationary.
AgentState step_vehicle(const AgentState& state, const Action& action, double dt,
                        double steer_epsilon = 1e-6);

// Semi-implicit update: v' = v + a dt / 2, x' = x + (v + a dt / 2) dt.
// The heading is the fixed crossing direction and is left untouched.
AgentState step_pedestrian(const AgentState& state, const Action& action, double dt);

Control control_from_accel(const Action& action, const AgentState& state, const VehicleSpec& spec);

// ---------------------------------------------------------------------------
// Scenarios

enum class Location { A, B };
enum class Crossing { SouthNorth, NorthSouth, EastWest, WestEast };

struct ScenarioTag {
  Location location = Location::A;
  Crossing crossing = Crossing::SouthNorth;

  int number() const;  // 1..8
  std::string direction_code() const;  // "S-N", ...
  std::string file_name() const;       // "LocationA_PedCross_S-N.csv"
  static ScenarioTag from_number(int n);
  // Accepts "1".."8", "A:S-N" or the file stem "LocationA_PedCross_S-N".
  static ScenarioTag parse(const std::string& text);
  static std::vector<ScenarioTag> all();

  friend bool operator==(const ScenarioTag&, const ScenarioTag&) = default;
};

struct IntersectionGeometry {
  double lane_offset_m = 1.75;        // right-lane centre from road centreline
  double road_half_width_m = 3.5;
  double turn_radius_m = 8.0;
  double entry_crosswalk_offset_m = 3.0;  // upstream of the arc start
  double exit_crosswalk_offset_m = 4.0;   // downstream of the arc end
  double exit_length_m = 20.0;            // arc end to vehicle goal

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
  static IntersectionGeometry preset(Location location);
};

struct AutopilotParams {
  double cruise_speed_per_throttle = 5.0;  // target speed = throttle * this
  double speed_gain = 1.0;                 // 1/s
  double cross_track_gain = 0.8;           // 1/s^2
  double heading_gain = 1.5;               // 1/s
  double brake_trigger_m = 7.0;
  double brake_corridor_half_width_m = 1.6;
  double brake_fraction = 0.6;  // of max_decel
  double ped_speed_gain = 2.0;
};

struct ScenarioConfig {
  ScenarioTag tag;
  IntersectionGeometry geometry;
  VehicleSpec vehicle;
  PedestrianSpec pedestrian;
  AutopilotParams autopilot;
  std::array<double, 2> throttle_range{0.6, 0.9};
  std::array<double, 2> ped_speed_range{1.0, 4.0};
  std::array<double, 2> veh_initial_speed_fraction{0.5, 1.0};
  std::array<double, 2> vehicle_arrival_s{5.0, 7.0};  // spawn region, as time-to-crosswalk
  double ped_timing_offset_s = 1.5;  // |ped arrival - vehicle arrival| bound
  double dt_s = 0.05;
  double max_duration_s = 10.0;
  double veh_goal_radius_m = 2.0;
  double ped_goal_radius_m = 0.5;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix, bool with_geometry = true);
  static ScenarioConfig for_tag(ScenarioTag tag);
};

// Loads a scenario preset from a key-value file. Keys are those of
// ScenarioConfig::bind without prefix, plus `tag`.
ScenarioConfig load_scenario_config(const std::filesystem::path& path);

// Entry straight -> clockwise quarter arc -> exit straight.
class TurnPath {
 public:
  TurnPath(const IntersectionGeometry& geometry, double entry_length_m);

  struct Projection {
    double s = 0.0;           // arclength from path start
    double lateral = 0.0;     // signed offset, positive to the left
    double heading = 0.0;
    double curvature = 0.0;   // signed, negative for the right turn
  };

  Projection project(const Vec2& p) const;
  Vec2 point_at(double s) const;
  double heading_at(double s) const;
  double length() const { return entry_length_ + arc_length() + exit_length_; }
  double arc_length() const;
  double entry_length() const { return entry_length_; }
  Vec2 start() const { return point_at(0.0); }
  Vec2 goal() const { return point_at(length()); }

 private:
  double lane_offset_;
  double radius_;
  double entry_length_;
  double exit_length_;
};

// Fully resolved randomization for one episode.
struct EpisodeSetup {
  ScenarioConfig config;
  double entry_length_m = 0.0;
  double throttle = 0.0;
  double veh_target_speed = 0.0;
  double ped_target_speed = 0.0;
  Vec2 crossing_dir = Vec2::UnitX();
  Vec2 ped_goal = Vec2::Zero();
  Vec2 conflict_point = Vec2::Zero();
  AgentState veh0;
  AgentState ped0;

  TurnPath path() const { return TurnPath(config.geometry, entry_length_m); }
};

EpisodeSetup sample_setup(const ScenarioConfig& config, Rng& rng);

// Rule-based controllers: the vehicle follows its turn path at the target
// speed with fixed proximity braking; the pedestrian walks the crossing line
// at its target speed. Returns {vehicle action, pedestrian action}.
std::pair<Action, Action> autopilot_step(const AgentState& veh, const AgentState& ped,
                                         const EpisodeSetup& setup);

bool collided(const AgentState& veh, const AgentState& ped, const ScenarioConfig& config);
bool vehicle_at_goal(const AgentState& veh, const EpisodeSetup& setup);
bool pedestrian_at_goal(const AgentState& ped, const EpisodeSetup& setup);

}  // namespace evasim
