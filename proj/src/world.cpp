#include "evasim/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evasim/error.hpp"

namespace evasim {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

double uniform(Rng& rng, const std::array<double, 2>& range) {
  if (range[1] == range[0]) return range[0];
  return std::uniform_real_distribution<double>(range[0], range[1])(rng);
}

}  // namespace

void VehicleSpec::validate() const {
  require(wheelbase_m > 0 && max_accel_mps2 > 0 && max_decel_mps2 > 0 && body_radius_m > 0,
          "vehicle spec values must be positive");
  require(steer_epsilon > 0, "vehicle steer_epsilon must be positive");
  require(max_steer_rad > 0 && max_steer_rad < kPi / 2, "vehicle max_steer_rad must lie in (0, pi/2)");
}

void PedestrianSpec::validate() const {
  require(max_accel_mps2 > 0 && max_decel_mps2 > 0 && body_radius_m > 0,
          "pedestrian spec values must be positive");
}

Action clamp_action(const Action& action, const AccelLimits& limits) {
  const auto clamp = [&](double a) {
    if (!std::isfinite(a)) return 0.0;
    return std::clamp(a, -limits.max_decel, limits.max_accel);
  };
  return {clamp(action.long_accel), clamp(action.lat_accel)};
}

Vec2 long_axis(double heading) { return {std::cos(heading), std::sin(heading)}; }
Vec2 lat_axis(double heading) { return {-std::sin(heading), std::cos(heading)}; }

Vec2 to_body(const Vec2& world, double heading) {
  return {world.dot(long_axis(heading)), world.dot(lat_axis(heading))};
}

Vec2 to_world(const Vec2& body, double heading) {
  return body.x() * long_axis(heading) + body.y() * lat_axis(heading);
}

std::pair<Observation, Observation> observe(const AgentState& veh, const AgentState& ped) {
  const auto make = [](const AgentState& self, const AgentState& other) {
    const Vec2 own = to_body(self.vel, self.heading);
    const Vec2 dist = to_body(other.pos - self.pos, self.heading);
    const Vec2 rel = to_body(self.vel - other.vel, self.heading);
    return Observation{own.x(), own.y(), dist.x(), dist.y(), rel.x(), rel.y()};
  };
  return {make(veh, ped), make(ped, veh)};
}

AgentState step_vehicle(const AgentState& state, const Action& action, double dt, double steer_epsilon) {
  AgentState next = state;
  const Vec2 accel = to_world({action.long_accel, action.lat_accel}, state.heading);
  next.vel = state.vel + accel * dt;
  // Brakes stop the vehicle; they do not reverse it.
  if (state.vel.norm() > steer_epsilon && next.vel.dot(long_axis(state.heading)) < 0.0) {
    next.vel.setZero();
  }
  next.accel = (next.vel - state.vel) / dt;
  next.pos = state.pos + next.vel * dt;
  if (next.vel.norm() > steer_epsilon) next.heading = std::atan2(next.vel.y(), next.vel.x());
  return next;
}

AgentState step_pedestrian(const AgentState& state, const Action& action, double dt) {
  AgentState next = state;
  const Vec2 accel = to_world({action.long_accel, action.lat_accel}, state.heading);
  const Vec2 half_step = 0.5 * accel * dt;
  next.vel = state.vel + half_step;
  next.pos = state.pos + (state.vel + half_step) * dt;
  next.accel = accel;
  return next;
}

Control control_from_accel(const Action& action, const AgentState& state, const VehicleSpec& spec) {
  const double v_long = to_body(state.vel, state.heading).x();
  Control c;
  const double ratio = spec.wheelbase_m * action.lat_accel / (v_long * v_long + spec.steer_epsilon);
  c.steer = std::clamp(std::atan(ratio) / spec.max_steer_rad, -1.0, 1.0);
  if (action.long_accel >= 0.0) {
    c.throttle = std::min(action.long_accel / spec.max_accel_mps2, 1.0);
  } else {
    c.brake = std::min(std::abs(action.long_accel) / spec.max_decel_mps2, 1.0);
  }
  return c;
}

// ---------------------------------------------------------------------------

int ScenarioTag::number() const {
  return (location == Location::A ? 0 : 4) + static_cast<int>(crossing) + 1;
}

std::string ScenarioTag::direction_code() const {
  switch (crossing) {
    case Crossing::SouthNorth: return "S-N";
    case Crossing::NorthSouth: return "N-S";
    case Crossing::EastWest: return "E-W";
    case Crossing::WestEast: return "W-E";
  }
  return "?";
}

std::string ScenarioTag::file_name() const {
  return std::string("Location") + (location == Location::A ? "A" : "B") + "_PedCross_" + direction_code() +
         ".csv";
}

ScenarioTag ScenarioTag::from_number(int n) {
  if (n < 1 || n > 8) throw ConfigError("scenario tag must be in 1..8, got " + std::to_string(n));
  return {n <= 4 ? Location::A : Location::B, static_cast<Crossing>((n - 1) % 4)};
}

ScenarioTag ScenarioTag::parse(const std::string& text) {
  if (text.size() == 1 && text[0] >= '1' && text[0] <= '8') return from_number(text[0] - '0');
  for (const auto& tag : all()) {
    const std::string loc = tag.location == Location::A ? "A" : "B";
    if (text == loc + ":" + tag.direction_code()) return tag;
    const auto stem = tag.file_name().substr(0, tag.file_name().size() - 4);
    if (text == stem || text == tag.file_name()) return tag;
  }
  throw ConfigError("unknown scenario tag '" + text + "'");
}

std::vector<ScenarioTag> ScenarioTag::all() {
  std::vector<ScenarioTag> tags;
  for (int n = 1; n <= 8; ++n) tags.push_back(from_number(n));
  return tags;
}

void IntersectionGeometry::validate() const {
  require(lane_offset_m > 0 && road_half_width_m > lane_offset_m, "road must contain the right lane");
  require(turn_radius_m > 0 && exit_length_m > 0, "turn radius and exit length must be positive");
  require(entry_crosswalk_offset_m >= 0 && exit_crosswalk_offset_m >= 0 &&
              exit_crosswalk_offset_m < exit_length_m,
          "crosswalks must lie on the path");
}

IntersectionGeometry IntersectionGeometry::preset(Location location) {
  IntersectionGeometry g;
  if (location == Location::B) {
    g.road_half_width_m = 5.0;
    g.turn_radius_m = 12.0;
    g.entry_crosswalk_offset_m = 4.0;
    g.exit_crosswalk_offset_m = 5.0;
    g.exit_length_m = 18.0;
  }
  return g;
}

void ScenarioConfig::validate() const {
  geometry.validate();
  vehicle.validate();
  pedestrian.validate();
  require(dt_s > 0, "dt_s must be positive");
  require(max_duration_s > dt_s, "max_duration_s must exceed dt_s");
  for (const auto* r : {&throttle_range, &ped_speed_range, &veh_initial_speed_fraction, &vehicle_arrival_s}) {
    require((*r)[0] <= (*r)[1] && std::isfinite((*r)[0]) && std::isfinite((*r)[1]), "ranges must be non-empty");
  }
  require(throttle_range[0] > 0 && throttle_range[1] <= 1, "throttle range must lie in (0, 1]");
  require(ped_speed_range[0] > 0, "pedestrian speeds must be positive");
  require(veh_initial_speed_fraction[0] > 0 && veh_initial_speed_fraction[1] <= 1,
          "initial speed fraction must lie in (0, 1]");
  require(vehicle_arrival_s[0] > 0, "vehicle arrival time must be positive");
  require(ped_timing_offset_s >= 0, "ped_timing_offset_s must be >= 0");
  require(veh_goal_radius_m > 0 && ped_goal_radius_m > 0, "goal radii must be positive");
}

void IntersectionGeometry::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "lane_offset_m", lane_offset_m);
  b.bind(p + "road_half_width_m", road_half_width_m);
  b.bind(p + "turn_radius_m", turn_radius_m);
  b.bind(p + "entry_crosswalk_offset_m", entry_crosswalk_offset_m);
  b.bind(p + "exit_crosswalk_offset_m", exit_crosswalk_offset_m);
  b.bind(p + "exit_length_m", exit_length_m);
}

void ScenarioConfig::bind(kv::Binder& b, const std::string& p, bool with_geometry) {
  if (with_geometry) geometry.bind(b, p);
  b.bind(p + "vehicle.wheelbase_m", vehicle.wheelbase_m);
  b.bind(p + "vehicle.max_steer_rad", vehicle.max_steer_rad);
  b.bind(p + "vehicle.max_accel_mps2", vehicle.max_accel_mps2);
  b.bind(p + "vehicle.max_decel_mps2", vehicle.max_decel_mps2);
  b.bind(p + "vehicle.steer_epsilon", vehicle.steer_epsilon);
  b.bind(p + "vehicle.body_radius_m", vehicle.body_radius_m);
  b.bind(p + "pedestrian.max_accel_mps2", pedestrian.max_accel_mps2);
  b.bind(p + "pedestrian.max_decel_mps2", pedestrian.max_decel_mps2);
  b.bind(p + "pedestrian.body_radius_m", pedestrian.body_radius_m);
  b.bind(p + "autopilot.cruise_speed_per_throttle", autopilot.cruise_speed_per_throttle);
  b.bind(p + "autopilot.speed_gain", autopilot.speed_gain);
  b.bind(p + "autopilot.cross_track_gain", autopilot.cross_track_gain);
  b.bind(p + "autopilot.heading_gain", autopilot.heading_gain);
  b.bind(p + "autopilot.brake_trigger_m", autopilot.brake_trigger_m);
  b.bind(p + "autopilot.brake_corridor_half_width_m", autopilot.brake_corridor_half_width_m);
  b.bind(p + "autopilot.brake_fraction", autopilot.brake_fraction);
  b.bind(p + "autopilot.ped_speed_gain", autopilot.ped_speed_gain);
  b.bind(p + "throttle_min", throttle_range[0]);
  b.bind(p + "throttle_max", throttle_range[1]);
  b.bind(p + "ped_speed_min", ped_speed_range[0]);
  b.bind(p + "ped_speed_max", ped_speed_range[1]);
  b.bind(p + "veh_initial_speed_fraction_min", veh_initial_speed_fraction[0]);
  b.bind(p + "veh_initial_speed_fraction_max", veh_initial_speed_fraction[1]);
  b.bind(p + "vehicle_arrival_min_s", vehicle_arrival_s[0]);
  b.bind(p + "vehicle_arrival_max_s", vehicle_arrival_s[1]);
  b.bind(p + "ped_timing_offset_s", ped_timing_offset_s);
  b.bind(p + "dt_s", dt_s);
  b.bind(p + "max_duration_s", max_duration_s);
  b.bind(p + "veh_goal_radius_m", veh_goal_radius_m);
  b.bind(p + "ped_goal_radius_m", ped_goal_radius_m);
}

ScenarioConfig ScenarioConfig::for_tag(ScenarioTag tag) {
  ScenarioConfig c;
  c.tag = tag;
  c.geometry = IntersectionGeometry::preset(tag.location);
  return c;
}

ScenarioConfig load_scenario_config(const std::filesystem::path& path) {
  auto doc = kv::read_file(path);
  ScenarioTag tag;
  if (const auto it = doc.find("tag"); it != doc.end()) {
    tag = ScenarioTag::parse(it->second);
    doc.erase(it);
  }
  auto config = ScenarioConfig::for_tag(tag);
  kv::Binder binder;
  config.bind(binder, "");
  binder.apply(doc);
  config.validate();
  return config;
}

// ---------------------------------------------------------------------------

TurnPath::TurnPath(const IntersectionGeometry& g, double entry_length_m)
    : lane_offset_(g.lane_offset_m),
      radius_(g.turn_radius_m),
      entry_length_(entry_length_m),
      exit_length_(g.exit_length_m) {}

double TurnPath::arc_length() const { return 0.5 * kPi * radius_; }

Vec2 TurnPath::point_at(double s) const {
  if (s <= entry_length_) return {lane_offset_, s - entry_length_};
  const double u = s - entry_length_;
  if (u <= arc_length()) {
    const double phi = u / radius_;
    return {lane_offset_ + radius_ - radius_ * std::cos(phi), radius_ * std::sin(phi)};
  }
  return {lane_offset_ + radius_ + (u - arc_length()), radius_};
}

double TurnPath::heading_at(double s) const {
  if (s <= entry_length_) return 0.5 * kPi;
  const double u = s - entry_length_;
  if (u <= arc_length()) return 0.5 * kPi - u / radius_;
  return 0.0;
}

TurnPath::Projection TurnPath::project(const Vec2& p) const {
  Projection best;
  double best_dist = std::numeric_limits<double>::infinity();

  // Entry half-line (extends backwards past the spawn point).
  if (p.y() <= 0.0) {
    const double d = std::abs(p.x() - lane_offset_);
    if (d < best_dist) {
      best_dist = d;
      best = {p.y() + entry_length_, -(p.x() - lane_offset_), 0.5 * kPi, 0.0};
    }
  }
  // Arc, centre to the right of travel.
  const Vec2 centre{lane_offset_ + radius_, 0.0};
  const Vec2 r = p - centre;
  const double ang = std::atan2(r.y(), r.x());
  if (ang >= 0.5 * kPi && ang <= kPi) {
    const double phi = kPi - ang;
    const double d = std::abs(r.norm() - radius_);
    if (d < best_dist) {
      best_dist = d;
      best = {entry_length_ + phi * radius_, r.norm() - radius_, 0.5 * kPi - phi, -1.0 / radius_};
    }
  }
  // Exit half-line (extends past the goal).
  if (p.x() >= lane_offset_ + radius_) {
    const double d = std::abs(p.y() - radius_);
    if (d < best_dist) {
      best_dist = d;
      best = {entry_length_ + arc_length() + (p.x() - lane_offset_ - radius_), p.y() - radius_, 0.0, 0.0};
    }
  }
  if (std::isinf(best_dist)) {
    // Inside the corner region not covered by any piece: snap to the nearer
    // arc endpoint.
    const Vec2 a = point_at(entry_length_);
    const Vec2 b = point_at(entry_length_ + arc_length());
    const bool use_a = (p - a).norm() <= (p - b).norm();
    const double s = use_a ? entry_length_ : entry_length_ + arc_length();
    const double h = heading_at(s);
    best = {s, (p - (use_a ? a : b)).dot(lat_axis(h)), h, -1.0 / radius_};
  }
  return best;
}

// ---------------------------------------------------------------------------

EpisodeSetup sample_setup(const ScenarioConfig& config, Rng& rng) {
  config.validate();
  EpisodeSetup s;
  s.config = config;
  const auto& g = config.geometry;
  const auto& ap = config.autopilot;

  s.throttle = uniform(rng, config.throttle_range);
  s.veh_target_speed = s.throttle * ap.cruise_speed_per_throttle;
  const double v0 = s.veh_target_speed * uniform(rng, config.veh_initial_speed_fraction);
  s.ped_target_speed = uniform(rng, config.ped_speed_range);
  const double arrival = uniform(rng, config.vehicle_arrival_s);
  const double offset = std::uniform_real_distribution<double>(-config.ped_timing_offset_s,
                                                               config.ped_timing_offset_s)(rng);

  // Distance covered by the autopilot's first-order speed response.
  const double k = ap.speed_gain;
  const double travelled =
      s.veh_target_speed * arrival - (s.veh_target_speed - v0) * (1.0 - std::exp(-k * arrival)) / k;

  const double arc = 0.5 * kPi * g.turn_radius_m;
  const bool exit_crosswalk =
      config.tag.crossing == Crossing::SouthNorth || config.tag.crossing == Crossing::NorthSouth;
  // Conflict location relative to the arc start, along the path.
  const double conflict_rel = exit_crosswalk ? arc + g.exit_crosswalk_offset_m : -g.entry_crosswalk_offset_m;
  s.entry_length_m = std::max(travelled - conflict_rel, 1.0);
  const TurnPath path = s.path();
  s.conflict_point = path.point_at(s.entry_length_m + conflict_rel);

  const double exit_centre_y = g.turn_radius_m + g.lane_offset_m;
  switch (config.tag.crossing) {
    case Crossing::SouthNorth:
      s.crossing_dir = Vec2::UnitY();
      s.ped_goal = {s.conflict_point.x(), exit_centre_y + g.road_half_width_m};
      break;
    case Crossing::NorthSouth:
      s.crossing_dir = -Vec2::UnitY();
      s.ped_goal = {s.conflict_point.x(), exit_centre_y - g.road_half_width_m};
      break;
    case Crossing::EastWest:
      s.crossing_dir = -Vec2::UnitX();
      s.ped_goal = {-g.road_half_width_m, s.conflict_point.y()};
      break;
    case Crossing::WestEast:
      s.crossing_dir = Vec2::UnitX();
      s.ped_goal = {g.road_half_width_m, s.conflict_point.y()};
      break;
  }

  const double ped_arrival = std::max(arrival + offset, 0.5);
  s.ped0.pos = s.conflict_point - s.crossing_dir * s.ped_target_speed * ped_arrival;
  s.ped0.vel = s.crossing_dir * s.ped_target_speed;
  s.ped0.heading = std::atan2(s.crossing_dir.y(), s.crossing_dir.x());

  s.veh0.pos = path.start();
  s.veh0.heading = path.heading_at(0.0);
  s.veh0.vel = long_axis(s.veh0.heading) * v0;
  return s;
}

std::pair<Action, Action> autopilot_step(const AgentState& veh, const AgentState& ped, const EpisodeSetup& setup) {
  const auto& ap = setup.config.autopilot;
  const auto& spec = setup.config.vehicle;
  const double dt = setup.config.dt_s;

  const TurnPath path = setup.path();
  const auto proj = path.project(veh.pos);
  const double v = to_body(veh.vel, veh.heading).x();
  const double heading_error = wrap_angle(veh.heading - proj.heading);

  Action va;
  va.lat_accel = v * v * proj.curvature - ap.cross_track_gain * proj.lateral -
                 ap.heading_gain * v * std::sin(heading_error);
  va.long_accel = ap.speed_gain * (setup.veh_target_speed - v);
  const Vec2 rel = to_body(ped.pos - veh.pos, veh.heading);
  if (rel.x() > 0.0 && rel.x() < ap.brake_trigger_m && std::abs(rel.y()) < ap.brake_corridor_half_width_m) {
    va.long_accel = std::min(va.long_accel, -ap.brake_fraction * spec.max_decel_mps2);
  }
  va.long_accel = std::max(va.long_accel, -std::max(v, 0.0) / dt);

  Action pa;
  const Vec2 pv = to_body(ped.vel, ped.heading);
  pa.long_accel = ap.ped_speed_gain * (setup.ped_target_speed - pv.x());
  pa.lat_accel = -ap.ped_speed_gain * pv.y();
  return {va, pa};
}

bool collided(const AgentState& veh, const AgentState& ped, const ScenarioConfig& config) {
  return (veh.pos - ped.pos).norm() < config.vehicle.body_radius_m + config.pedestrian.body_radius_m;
}

bool vehicle_at_goal(const AgentState& veh, const EpisodeSetup& setup) {
  return (veh.pos - setup.path().goal()).norm() <= setup.config.veh_goal_radius_m;
}

bool pedestrian_at_goal(const AgentState& ped, const EpisodeSetup& setup) {
  return (ped.pos - setup.ped_goal).norm() <= setup.config.ped_goal_radius_m;
}

}  // namespace evasim
