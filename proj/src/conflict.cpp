#include "evasim/conflict.hpp"

#include <cmath>

#include "evasim/error.hpp"

namespace evasim {

void ConflictParams::validate() const {
  if (!(0 < conflict_threshold_s && conflict_threshold_s < critical_threshold_s &&
        critical_threshold_s <= horizon_s)) {
    throw ConfigError("conflict thresholds must satisfy 0 < conflict < critical <= horizon");
  }
  if (!(scan_dt_s > 0) || !(refine_tol_s > 0)) throw ConfigError("scan_dt_s and refine_tol_s must be positive");
  if (!(collision_dist_m > 0)) throw ConfigError("collision_dist_m must be positive");
  if (!(near_stop_speed >= 0) || !(yield_fraction > 0 && yield_fraction < 1)) {
    throw ConfigError("yield thresholds out of range");
  }
}

void ConflictParams::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "critical_threshold_s", critical_threshold_s);
  b.bind(p + "conflict_threshold_s", conflict_threshold_s);
  b.bind(p + "horizon_s", horizon_s);
  b.bind(p + "scan_dt_s", scan_dt_s);
  b.bind(p + "refine_tol_s", refine_tol_s);
  b.bind(p + "collision_dist_m", collision_dist_m);
  b.bind(p + "near_stop_speed", near_stop_speed);
  b.bind(p + "yield_fraction", yield_fraction);
}

namespace {

// Closed-form projected motion of both agents.
class Projection {
 public:
  Projection(const AgentState& veh, const AgentState& ped, double eps)
      : vp0_(veh.pos), pp0_(ped.pos), pv_(ped.vel) {
    speed_ = veh.vel.norm();
    if (speed_ >= eps) {
      heading_ = std::atan2(veh.vel.y(), veh.vel.x());
      const double lat = veh.accel.dot(lat_axis(heading_));
      curvature_ = lat / (speed_ * speed_);
      if (std::abs(curvature_) < 1e-9) curvature_ = 0.0;
    } else {
      speed_ = 0.0;
    }
  }

  // Squared separation minus squared contact radius, and its derivative.
  double gap(double t, double r) const { return delta(t).squaredNorm() - r * r; }
  double gap_rate(double t) const { return 2.0 * delta(t).dot(veh_vel(t) - pv_); }

 private:
  Vec2 veh_pos(double t) const {
    if (speed_ == 0.0) return vp0_;
    if (curvature_ == 0.0) return vp0_ + speed_ * t * long_axis(heading_);
    const double th = heading_ + curvature_ * speed_ * t;
    return vp0_ + Vec2(std::sin(th) - std::sin(heading_), std::cos(heading_) - std::cos(th)) / curvature_;
  }
  Vec2 veh_vel(double t) const {
    if (speed_ == 0.0) return Vec2::Zero();
    return speed_ * long_axis(heading_ + curvature_ * speed_ * t);
  }
  Vec2 delta(double t) const { return veh_pos(t) - (pp0_ + pv_ * t); }

  Vec2 vp0_, pp0_, pv_;
  double speed_ = 0.0;
  double heading_ = 0.0;
  double curvature_ = 0.0;
};

template <class F>
double bisect(F&& f, double lo, double hi, double tol) {
  // Invariant: f(lo) > 0 >= f(hi) (or the reverse sign pattern for g).
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return 0.5 * (lo + hi);
}

bool finite_vel(const Vec2& v) { return std::isfinite(v.x()) && std::isfinite(v.y()); }

double speed_at(const std::vector<Frame>& frames, std::size_t i, AgentKind agent) {
  const Vec2& v = agent == AgentKind::Vehicle ? frames[i].veh_vel : frames[i].ped_vel;
  return finite_vel(v) ? v.norm() : std::numeric_limits<double>::quiet_NaN();
}

double speed_rate(const std::vector<Frame>& frames, std::size_t i, AgentKind agent, double dt) {
  if (frames.size() < 2) return 0.0;
  const std::size_t a = i == 0 ? 0 : i - 1;
  const std::size_t b = i == 0 ? 1 : i;
  const double r = (speed_at(frames, b, agent) - speed_at(frames, a, agent)) / dt;
  return std::isfinite(r) ? r : 0.0;
}

}  // namespace

double curv_ttc(const AgentState& veh, const AgentState& ped, const ConflictParams& params) {
  const Projection proj(veh, ped, params.steer_epsilon);
  const double r = params.collision_dist_m;
  if (proj.gap(0.0, r) <= 0.0) return 0.0;

  const auto in_contact = [&](double t) { return proj.gap(t, r) <= 0.0; };
  const auto closing_done = [&](double t) { return proj.gap_rate(t) >= 0.0; };

  const double dt = params.scan_dt_s;
  const auto steps = static_cast<long>(std::ceil(params.horizon_s / dt - 1e-12));
  for (long i = 0; i < steps; ++i) {
    const double t0 = static_cast<double>(i) * dt;
    const double t1 = std::min(t0 + dt, params.horizon_s);
    if (in_contact(t1)) return bisect(in_contact, t0, t1, params.refine_tol_s);
    // A separation minimum strictly inside the interval may dip below the
    // contact radius without either endpoint doing so.
    if (proj.gap_rate(t0) < 0.0 && proj.gap_rate(t1) >= 0.0) {
      const double tm = bisect(closing_done, t0, t1, 1e-9);
      if (in_contact(tm)) return bisect(in_contact, t0, tm, params.refine_tol_s);
    }
  }
  return std::numeric_limits<double>::infinity();
}

EpisodeLabels label_episode(const EpisodeRecord& episode, const ConflictParams& params) {
  if (episode.frames.empty()) throw InputError("cannot label an empty episode");
  EpisodeLabels labels;
  const auto& frames = episode.frames;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const double ttc = frames[i].curv_ttc;
    if (std::isnan(ttc)) continue;
    if (ttc < labels.min_curvttc_s) labels.min_curvttc_s = ttc;
    if (!labels.onset_frame && ttc < params.critical_threshold_s) labels.onset_frame = static_cast<int>(i);
  }
  labels.is_conflict = labels.min_curvttc_s < params.conflict_threshold_s;
  if (labels.onset_frame) {
    const auto i = static_cast<std::size_t>(*labels.onset_frame);
    auto& k = labels.onset;
    k.veh_speed = speed_at(frames, i, AgentKind::Vehicle);
    k.ped_speed = speed_at(frames, i, AgentKind::Pedestrian);
    k.veh_accel = speed_rate(frames, i, AgentKind::Vehicle, episode.dt_s);
    k.ped_accel = speed_rate(frames, i, AgentKind::Pedestrian, episode.dt_s);
    k.distance = (frames[i].veh_pos - frames[i].ped_pos).norm();
    labels.veh_yielded = classify_yielding(episode, AgentKind::Vehicle, labels, params);
    labels.ped_yielded = classify_yielding(episode, AgentKind::Pedestrian, labels, params);
  }
  return labels;
}

bool classify_yielding(const EpisodeRecord& episode, AgentKind agent, const EpisodeLabels& labels,
                       const ConflictParams& params) {
  if (!labels.onset_frame) return false;
  const auto& frames = episode.frames;
  const auto onset = static_cast<std::size_t>(*labels.onset_frame);
  const double onset_speed = speed_at(frames, onset, agent);

  std::size_t cleared = frames.size();
  for (std::size_t i = onset + 1; i < frames.size(); ++i) {
    if (std::isinf(frames[i].curv_ttc) && frames[i].distance > frames[i - 1].distance) {
      cleared = i;
      break;
    }
  }
  for (std::size_t i = onset + 1; i < cleared; ++i) {
    const double v = speed_at(frames, i, agent);
    if (std::isnan(v)) continue;
    if (v < params.near_stop_speed) return true;
    if (std::isfinite(onset_speed) && v < params.yield_fraction * onset_speed) return true;
  }
  return false;
}

}  // namespace evasim
