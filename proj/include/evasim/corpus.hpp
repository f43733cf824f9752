#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evasim/conflict.hpp"
#include "evasim/episode.hpp"
#include "evasim/reward.hpp"
#include "evasim/rl.hpp"
#include "evasim/world.hpp"

namespace evasim {

// Trajectory corpus CSV, one row per interaction time step at 0.1 s.
inline constexpr const char* kCorpusHeader = "interaction_id,frame,veh_x,veh_y,veh_vx,veh_vy,ped_x,ped_y,ped_vx,ped_vy";
inline constexpr double kCorpusDt = 0.1;

struct CorpusRow {
  int frame = 0;
  Vec2 veh_pos = Vec2::Zero();
  Vec2 veh_vel = Vec2::Zero();
  Vec2 ped_pos = Vec2::Zero();
  Vec2 ped_vel = Vec2::Zero();
};

struct CorpusInteraction {
  int id = 0;
  std::vector<CorpusRow> rows;  // 0.1 s apart
};

struct RejectedInteraction {
  int id = 0;
  std::vector<int> lines;  // 1-based line numbers of the offending rows
};

struct Corpus {
  std::vector<CorpusInteraction> interactions;
  std::vector<RejectedInteraction> rejected;
};

// Throws InputError on an empty file, missing columns, malformed rows or
// non-monotone frames. Interactions with a blank or non-finite value are
// moved to `rejected`.
Corpus read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<CorpusInteraction>& interactions);

// Linear resampling onto the simulation step; frames carry CurvTTC computed
// from finite-difference accelerations.
EpisodeRecord resample(const CorpusInteraction& interaction, double dt, const ConflictParams& params);

// Heading per frame: vehicle from its velocity direction (held through
// stops), pedestrian from its net displacement.
std::vector<AgentState> vehicle_states(const EpisodeRecord& episode);
std::vector<AgentState> pedestrian_states(const EpisodeRecord& episode);

// Per-agent, per-axis body-frame speed statistics over every frame, with a
// lower bound on the standard deviation.
SpeedStats compute_speed_stats(const std::vector<EpisodeRecord>& episodes, double sigma_floor);

// Recorded actions are the body-frame accelerations that reproduce the next
// velocity under each agent's integrator. Rewards are the scaled speed
// reward of the recorded action.
rl::Rollout to_rollout(const EpisodeRecord& episode, const SpeedStats& stats, double reward_scale);

struct PracticalData {
  std::vector<EpisodeRecord> episodes;
  SpeedStats stats;
  rl::ReplayBuffer buffer{1};
  int transitions = 0;
  std::vector<RejectedInteraction> rejected;
};

PracticalData build_practical(const Corpus& corpus, const rl::TrainingConfig& training, const ConflictParams& conflict,
                              double dt, double sigma_floor);

}  // namespace evasim
