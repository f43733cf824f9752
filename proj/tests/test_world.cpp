#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "evasim/error.hpp"
#include "evasim/world.hpp"

using namespace evasim;

namespace {

AgentState at(Vec2 pos, Vec2 vel, double heading) {
  AgentState s;
  s.pos = pos;
  s.vel = vel;
  s.heading = heading;
  return s;
}

}  // namespace

TEST_CASE("observe: relative distances in the vehicle frame") {
  const auto [ov, op] = observe(at({0, 0}, {0, 0}, 0.0), at({3, 4}, {0, 0}, 0.0));
  CHECK(ov.rel_long_dist == doctest::Approx(3.0));
  CHECK(ov.rel_lat_dist == doctest::Approx(4.0));
  CHECK(ov.own_long_speed == 0.0);
  CHECK(ov.rel_long_speed == 0.0);
  CHECK(op.own_long_speed == 0.0);
}

TEST_CASE("observe: coincident positions") {
  const auto [ov, op] = observe(at({2, -1}, {1, 0}, 0.0), at({2, -1}, {0, 1}, 0.5 * std::numbers::pi));
  CHECK(ov.rel_long_dist == 0.0);
  CHECK(ov.rel_lat_dist == 0.0);
  CHECK(op.rel_long_dist == 0.0);
  CHECK(op.rel_lat_dist == 0.0);
}

TEST_CASE("observe: relative speeds are own minus other") {
  const auto [ov, op] = observe(at({0, 0}, {5, 0}, 0.0), at({10, -3}, {0, 1.4}, 0.5 * std::numbers::pi));
  CHECK(ov.rel_long_speed == doctest::Approx(5.0));
  CHECK(ov.rel_lat_speed == doctest::Approx(-1.4));
  CHECK(ov.own_long_speed == doctest::Approx(5.0));
  CHECK(op.own_long_speed == doctest::Approx(1.4));
}

TEST_CASE("observe: relative velocities are antisymmetric after frame alignment") {
  Rng rng(17);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  std::uniform_real_distribution<double> h(-std::numbers::pi, std::numbers::pi);
  for (int i = 0; i < 200; ++i) {
    const AgentState v = at({u(rng), u(rng)}, {u(rng), u(rng)}, h(rng));
    const AgentState p = at({u(rng), u(rng)}, {u(rng), u(rng)}, h(rng));
    const auto [ov, op] = observe(v, p);
    const Vec2 dv_world = to_world({ov.rel_long_speed, ov.rel_lat_speed}, v.heading);
    const Vec2 dp_world = to_world({op.rel_long_speed, op.rel_lat_speed}, p.heading);
    CHECK((dv_world + dp_world).norm() < 1e-12);
    const Vec2 rv = to_world({ov.rel_long_dist, ov.rel_lat_dist}, v.heading);
    const Vec2 rp = to_world({op.rel_long_dist, op.rel_lat_dist}, p.heading);
    CHECK((rv + rp).norm() < 1e-12);
  }
}

TEST_CASE("step_vehicle: longitudinal and lateral hand cases") {
  const AgentState s = at({0, 0}, {5, 0}, 0.0);
  const AgentState a = step_vehicle(s, {1.0, 0.0}, 0.05);
  CHECK(a.vel.x() == doctest::Approx(5.05));
  CHECK(a.vel.y() == doctest::Approx(0.0));
  const AgentState b = step_vehicle(s, {0.0, 1.0}, 0.05);
  CHECK(b.vel.x() == doctest::Approx(5.0));
  CHECK(b.vel.y() == doctest::Approx(0.05));
  CHECK(b.heading == doctest::Approx(std::atan2(0.05, 5.0)));
}

TEST_CASE("step_vehicle: zero action advects and conserves speed") {
  AgentState s = at({1, 2}, {3, 4}, std::atan2(4.0, 3.0));
  const AgentState n = step_vehicle(s, {}, 0.1);
  CHECK(n.pos.x() == doctest::Approx(1.3));
  CHECK(n.pos.y() == doctest::Approx(2.4));
  for (int i = 0; i < 1000; ++i) s = step_vehicle(s, {}, 0.05);
  CHECK(std::abs(s.vel.norm() - 5.0) < 1e-12);
}

TEST_CASE("step_vehicle: braking stops without reversing") {
  AgentState s = at({0, 0}, {1, 0}, 0.0);
  s = step_vehicle(s, {-8.88, 0.0}, 0.5);
  CHECK(s.vel.norm() == 0.0);
  CHECK(s.heading == 0.0);
}

TEST_CASE("step_vehicle is deterministic") {
  const AgentState s = at({0.3, -1.2}, {2.2, 0.7}, 0.3);
  const AgentState a = step_vehicle(s, {0.4, -1.1}, 0.05);
  const AgentState b = step_vehicle(s, {0.4, -1.1}, 0.05);
  CHECK(a.pos == b.pos);
  CHECK(a.vel == b.vel);
  CHECK(a.heading == b.heading);
}

TEST_CASE("step_pedestrian: semi-implicit hand cases") {
  const AgentState s = at({0, 0}, {1.0, 0}, 0.0);
  const AgentState a = step_pedestrian(s, {0.5, 0.0}, 0.05);
  CHECK(a.vel.x() == doctest::Approx(1.0125));
  CHECK(a.pos.x() == doctest::Approx(0.050625));
  const AgentState b = step_pedestrian(at({0, 0}, {0, 0}, 0.0), {2.0, 0.0}, 0.05);
  CHECK(b.vel.x() == doctest::Approx(0.05));
  CHECK(b.pos.x() == doctest::Approx(0.0025));
  const AgentState c = step_pedestrian(at({1, 1}, {0.2, -0.4}, 0.0), {}, 0.5);
  CHECK(c.pos.x() == doctest::Approx(1.1));
  CHECK(c.pos.y() == doctest::Approx(0.8));
  CHECK(c.heading == 0.0);
}

TEST_CASE("step_pedestrian: repeated steps match a tick-by-tick oracle") {
  const double dt = 0.05;
  const double heading = 0.7;
  AgentState s = at({0, 0}, to_world({1.2, 0.0}, heading), heading);
  Vec2 x = s.pos;
  Vec2 v = s.vel;
  const Action a{0.8, -0.3};
  const Vec2 aw = to_world({a.long_accel, a.lat_accel}, heading);
  for (int i = 0; i < 40; ++i) {
    s = step_pedestrian(s, a, dt);
    x += (v + 0.5 * aw * dt) * dt;
    v += 0.5 * aw * dt;
  }
  CHECK((s.pos - x).norm() < 1e-12);
  CHECK((s.vel - v).norm() < 1e-12);
}

TEST_CASE("control mapping: tagged cases") {
  VehicleSpec spec;
  const AgentState s = at({0, 0}, {5, 0}, 0.0);
  const Control c = control_from_accel({0.0, 2.0}, s, spec);
  CHECK(c.steer == doctest::Approx(std::atan(2.875 * 2.0 / (25.0 + 1e-6)) / 0.52).epsilon(1e-9));
  CHECK(c.steer == doctest::Approx(0.4347).epsilon(1e-3));
  CHECK(control_from_accel({0.0, 0.0}, s, spec).steer == 0.0);
  const Control t = control_from_accel({9.25, 0.0}, s, spec);
  CHECK(t.throttle == doctest::Approx(1.0));
  CHECK(t.brake == 0.0);
  const Control b = control_from_accel({-8.88, 0.0}, s, spec);
  CHECK(b.brake == doctest::Approx(1.0));
  CHECK(b.throttle == 0.0);
}

TEST_CASE("control mapping: odd steer, saturation, exclusive pedals") {
  VehicleSpec spec;
  Rng rng(5);
  std::uniform_real_distribution<double> acc(-20.0, 20.0);
  std::uniform_real_distribution<double> spd(0.0, 15.0);
  for (int i = 0; i < 1000; ++i) {
    const AgentState s = at({0, 0}, {spd(rng), 0}, 0.0);
    const Action a{acc(rng), acc(rng)};
    const Control c = control_from_accel(a, s, spec);
    const Control m = control_from_accel({a.long_accel, -a.lat_accel}, s, spec);
    CHECK(c.steer == doctest::Approx(-m.steer));
    CHECK(std::abs(c.steer) <= 1.0);
    CHECK(c.throttle * c.brake == 0.0);
    CHECK(c.throttle >= 0.0);
    CHECK(c.throttle <= 1.0);
    CHECK(c.brake <= 1.0);
  }
}

TEST_CASE("clamp_action bounds both axes and zeroes non-finite values") {
  const Action a = clamp_action({12.0, -9.0}, {9.25, 8.88});
  CHECK(a.long_accel == 9.25);
  CHECK(a.lat_accel == -8.88);
  CHECK(clamp_action({std::nan(""), 1.0}, {4, 4}).long_accel == 0.0);
}

TEST_CASE("scenario tags round-trip through numbers and names") {
  for (const ScenarioTag& t : ScenarioTag::all()) {
    CHECK(ScenarioTag::from_number(t.number()) == t);
    CHECK(ScenarioTag::parse(std::to_string(t.number())) == t);
    const std::string stem = t.file_name().substr(0, t.file_name().size() - 4);
    CHECK(ScenarioTag::parse(stem) == t);
  }
  CHECK(ScenarioTag::from_number(1).file_name() == "LocationA_PedCross_S-N.csv");
  CHECK_THROWS_AS(ScenarioTag::from_number(9), ConfigError);
  CHECK_THROWS_AS(ScenarioTag::parse("nowhere"), ConfigError);
}

TEST_CASE("turn path: continuous, unit-speed parametrisation") {
  const TurnPath path(IntersectionGeometry::preset(Location::A), 15.0);
  const double ds = 1e-3;
  for (double s = 0.0; s + ds < path.length(); s += 0.37) {
    CHECK((path.point_at(s + ds) - path.point_at(s)).norm() == doctest::Approx(ds).epsilon(1e-6));
    const auto p = path.project(path.point_at(s));
    CHECK(p.s == doctest::Approx(s).epsilon(1e-6));
    CHECK(std::abs(p.lateral) < 1e-9);
  }
  CHECK(path.heading_at(path.length()) == doctest::Approx(path.heading_at(0.0) - 0.5 * std::numbers::pi));
}

TEST_CASE("autopilot: steady state on the entry straight") {
  const ScenarioConfig cfg = ScenarioConfig::for_tag(ScenarioTag::from_number(1));
  Rng rng(3);
  EpisodeSetup setup = sample_setup(cfg, rng);
  const TurnPath path = setup.path();
  const double h = path.heading_at(1.0);
  const AgentState veh = at(path.point_at(1.0), setup.veh_target_speed * long_axis(h), h);
  const AgentState ped = at(veh.pos + Vec2(-50, -50), Vec2::Zero(), 0.0);
  const auto [va, pa] = autopilot_step(veh, ped, setup);
  CHECK(std::abs(va.long_accel) < 1e-9);
  CHECK(std::abs(va.lat_accel) < 1e-9);
  (void)pa;
}

TEST_CASE("autopilot: pedestrian ahead triggers braking") {
  const ScenarioConfig cfg = ScenarioConfig::for_tag(ScenarioTag::from_number(1));
  Rng rng(3);
  EpisodeSetup setup = sample_setup(cfg, rng);
  const TurnPath path = setup.path();
  const double h = path.heading_at(1.0);
  const AgentState veh = at(path.point_at(1.0), setup.veh_target_speed * long_axis(h), h);
  const AgentState ped = at(veh.pos + 3.0 * long_axis(h), Vec2::Zero(), 0.0);
  const auto [va, pa] = autopilot_step(veh, ped, setup);
  CHECK(va.long_accel <= -cfg.vehicle.max_decel_mps2 / 2.0);
  (void)pa;
}

TEST_CASE("autopilot: pedestrian holds its crossing velocity") {
  const ScenarioConfig cfg = ScenarioConfig::for_tag(ScenarioTag::from_number(3));
  Rng rng(8);
  EpisodeSetup setup = sample_setup(cfg, rng);
  AgentState ped = setup.ped0;
  ped.vel = setup.ped_target_speed * long_axis(ped.heading);
  const AgentState veh = at(ped.pos + Vec2(60, 60), Vec2::Zero(), 0.0);
  const auto [va, pa] = autopilot_step(veh, ped, setup);
  CHECK(std::abs(pa.long_accel) < 1e-12);
  CHECK(std::abs(pa.lat_accel) < 1e-12);
  const AgentState next = step_pedestrian(ped, pa, cfg.dt_s);
  CHECK((next.vel - ped.vel).norm() < 1e-12);
  (void)va;
}

TEST_CASE("sample_setup draws inside the configured ranges") {
  const ScenarioConfig cfg = ScenarioConfig::for_tag(ScenarioTag::from_number(6));
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    const EpisodeSetup s = sample_setup(cfg, rng);
    CHECK(s.throttle >= cfg.throttle_range[0]);
    CHECK(s.throttle <= cfg.throttle_range[1]);
    CHECK(s.ped_target_speed >= cfg.ped_speed_range[0]);
    CHECK(s.ped_target_speed <= cfg.ped_speed_range[1]);
    CHECK(std::isfinite(s.veh0.pos.x()));
  }
}

TEST_CASE("scenario configuration validation") {
  ScenarioConfig cfg;
  cfg.dt_s = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScenarioConfig{};
  cfg.throttle_range = {0.9, 0.6};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
