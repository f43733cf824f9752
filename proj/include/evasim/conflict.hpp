#pragma once

#include <optional>
#include <string>

#include "evasim/episode.hpp"
#include "evasim/kv.hpp"
#include "evasim/world.hpp"

namespace evasim {

struct ConflictParams {
  double critical_threshold_s = 5.0;
  double conflict_threshold_s = 2.0;
  double horizon_s = 10.0;
  double scan_dt_s = 0.05;
  double refine_tol_s = 1e-3;
  double collision_dist_m = 1.3;
  double steer_epsilon = 1e-6;
  // Yielding rule thresholds.
  double near_stop_speed = 0.3;
  double yield_fraction = 0.5;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
};

// Curvilinear time-to-collision. The vehicle is projected along a
// constant-curvature arc (curvature = lateral acceleration / speed^2), the
// pedestrian along a constant-velocity line. Returns the first time in
// [0, horizon] at which the centres come within collision_dist, or +inf.
double curv_ttc(const AgentState& veh, const AgentState& ped, const ConflictParams& params);

struct OnsetKinematics {
  double veh_speed = 0.0;
  double ped_speed = 0.0;
  double veh_accel = 0.0;  // rate of change of speed
  double ped_accel = 0.0;
  double distance = 0.0;
};

struct EpisodeLabels {
  std::optional<int> onset_frame;  // index into EpisodeRecord::frames
  double min_curvttc_s = std::numeric_limits<double>::infinity();
  bool is_conflict = false;
  bool veh_yielded = false;
  bool ped_yielded = false;
  OnsetKinematics onset;
};

enum class AgentKind { Vehicle, Pedestrian };

// Throws InputError on an empty episode.
EpisodeLabels label_episode(const EpisodeRecord& episode, const ConflictParams& params);

// Yielding: after onset and before the other agent clears the conflict
// zone, the agent's speed drops below near_stop_speed or below
// yield_fraction times its onset speed. The zone counts as cleared at the
// first frame with no projected contact and a growing separation.
bool classify_yielding(const EpisodeRecord& episode, AgentKind agent, const EpisodeLabels& labels,
                       const ConflictParams& params);

}  // namespace evasim
