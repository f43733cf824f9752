#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evasim/checkpoint.hpp"
#include "evasim/kv.hpp"
#include "evasim/reward.hpp"
#include "evasim/sstnet.hpp"
#include "evasim/world.hpp"

namespace evasim::rl {

struct ExplorationSchedule {
  double n0 = 0.3;
  double decay = 0.001;
  double n_min = 0.05;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
};

// N(t) = n0 exp(-decay t) + n_min.
double exploration_noise(double t, const ExplorationSchedule& schedule);

struct TrainingConfig {
  int buffer_capacity = 10000;
  int batch = 256;            // replay entries per update
  int segment_steps = 8;      // transitions per replay entry
  double lr_actor = 1e-4;
  double lr_critic = 2e-4;
  double lr_online_actor = 5e-5;
  double lr_online_critic = 1e-4;
  double gamma = 0.99;
  double tau_soft = 0.01;
  int episodes = 3000;
  double priority_exponent = 0.6;
  double real_bonus = 0.2;
  double priority_floor = 1e-3;
  double real_fraction = 0.2;  // share of each refinement batch from the practical buffer
  double td_temperature = 1.0;
  double reward_scale = 100.0;
  double grad_norm_threshold = 1e-4;
  int patience = 100;
  double grad_clip = 0.0;  // global L2 bound per network and step; 0 disables
  std::string optimizer = "sgd";  // "sgd" or "adam"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  ExplorationSchedule noise;
  nn::NetworkShape shape;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
};

enum class Provenance : std::uint8_t { Real, Simulation };

// One agent's part of a replay segment. `obs` covers seq_len - 1 steps of
// history before the first transition, one observation per transition and
// the observation after the last one.
struct AgentSegment {
  std::vector<Observation> obs;
  std::vector<Action> prev_actions;  // own action before each observation
  std::vector<Action> actions;
  std::vector<double> rewards;
  std::vector<Vec2> vel;       // own body-frame velocity at each step
  std::vector<Vec2> next_vel;  // own velocity one tick later, same frame
};

struct ReplayEntry {
  AgentSegment veh;
  AgentSegment ped;
  std::vector<std::uint8_t> terminal;
  Provenance provenance = Provenance::Simulation;
  double td_error = 1.0;

  int steps() const { return static_cast<int>(terminal.size()); }
};

// FIFO ring of replay entries.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity);

  void push(ReplayEntry entry);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int capacity() const { return capacity_; }
  ReplayEntry& operator[](std::size_t i) { return entries_[i]; }
  const ReplayEntry& operator[](std::size_t i) const { return entries_[i]; }
  std::uint64_t pushed() const { return pushed_; }
  void update_td(std::size_t i, double td);

 private:
  int capacity_;
  std::deque<ReplayEntry> entries_;
  std::uint64_t pushed_ = 0;
  double max_td_ = 1.0;
};

// P(i) proportional to |td_i|^alpha + beta * I_real(i) + floor.
std::vector<double> priorities(const ReplayBuffer& buffer, const TrainingConfig& config);
std::vector<double> sampling_probabilities(const ReplayBuffer& buffer, const TrainingConfig& config);

// M indices drawn with replacement; empty if the buffer is empty.
std::vector<std::size_t> sample_prioritized(const ReplayBuffer& buffer, int count, const TrainingConfig& config,
                                            Rng& rng);

double critic_target(double reward, double next_q, double gamma, bool terminal);

bool check_convergence(const std::vector<double>& grad_norms, const TrainingConfig& config);

// ---------------------------------------------------------------------------

struct AgentNets {
  nn::ActorParams actor;
  nn::ActorParams actor_target;
  nn::CriticParams critic;
  nn::CriticParams critic_target;
  // Optimizer moments; not part of checkpoints.
  nn::AdamState<nn::ActorParams> actor_opt;
  nn::AdamState<nn::CriticParams> critic_opt;
};

struct MultiAgent {
  nn::NetworkShape shape;
  AgentNets vehicle;
  AgentNets pedestrian;

  AgentNets& of(AgentKind k) { return k == AgentKind::Vehicle ? vehicle : pedestrian; }
  const AgentNets& of(AgentKind k) const { return k == AgentKind::Vehicle ? vehicle : pedestrian; }
};

// Targets start as exact copies of their mains.
MultiAgent make_agents(const nn::NetworkShape& shape, Rng& rng);

// How a batch's own actions and rewards are formed.
enum class BatchMode {
  // Own action = current actor + exploration noise; reward recomputed as the
  // scaled speed reward of that action against the recorded next velocity.
  Offline,
  // Actions and rewards as stored in the entries.
  Stored,
};

struct StepContext {
  BatchMode mode = BatchMode::Stored;
  double lr_actor = 0.0;
  double lr_critic = 0.0;
  double noise_scale = 0.0;  // Offline mode only
  const SpeedStats* stats = nullptr;  // Offline mode only
  double dt_s = 0.05;
  AccelLimits veh_limits{9.25, 8.88};
  AccelLimits ped_limits{4.0, 4.0};
};

struct StepResult {
  std::array<double, 2> critic_loss{};      // mean (y - Q)^2; vehicle, pedestrian
  std::array<double, 2> weighted_loss{};    // importance-weighted objective that is minimised
  std::array<double, 2> actor_grad_norm{};
  std::array<double, 2> critic_grad_norm{};
  std::array<double, 2> mean_reward{};
  std::vector<double> entry_td;             // mean |td| per batch entry
};

// One Algorithm-1 update on both agents: critic regression to targets from
// the target networks, deterministic policy gradient through the
// pre-update critic with the other agent's action held at its recorded
// value, then soft target updates. Throws NumericalError on a non-finite
// loss (parameters are left untouched in that case).
StepResult train_step(MultiAgent& agents, const std::vector<const ReplayEntry*>& batch,
                      const TrainingConfig& config, const StepContext& ctx, Rng& rng);

// Predicted next own velocity under the agent's integrator, in the current body frame.
Vec2 predict_velocity(const Vec2& vel_body, const Action& action, double dt, AgentKind agent);

// ---------------------------------------------------------------------------

// Per-tick record of one agent over a rollout. obs has one more element
// than the per-transition vectors.
struct AgentStream {
  std::vector<Observation> obs;
  std::vector<Action> actions;
  std::vector<double> rewards;
  std::vector<Vec2> vel;
  std::vector<Vec2> next_vel;
};

struct Rollout {
  AgentStream veh;
  AgentStream ped;
  std::vector<std::uint8_t> terminal;
};

// Cuts transitions [begin, end) into entries of at most segment_steps,
// each carrying seq_len - 1 observations of (zero-padded) history.
std::vector<ReplayEntry> segment_rollout(const Rollout& rollout, int begin, int end, int seq_len,
                                         int segment_steps, Provenance provenance);

// Checkpoint: networks, frozen speed statistics and reward weights.
struct Checkpoint {
  MultiAgent agents;
  SpeedStats stats;
  RewardWeights weights;
  kv::Document info;  // free-form provenance of the run (stage, seed, ...)
};

nn::TensorFile to_tensor_file(const Checkpoint& c);
Checkpoint from_tensor_file(const nn::TensorFile& f);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evasim::rl
