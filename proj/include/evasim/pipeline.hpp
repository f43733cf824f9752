#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "evasim/conflict.hpp"
#include "evasim/corpus.hpp"
#include "evasim/dataset.hpp"
#include "evasim/metrics.hpp"
#include "evasim/reward.hpp"
#include "evasim/rl.hpp"
#include "evasim/world.hpp"

namespace evasim {

// --- seeding -----------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x);
// Independent stream per (purpose, index) under one master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index);

namespace streams {
inline constexpr std::uint64_t kCorpus = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kPretrain = 3;
inline constexpr std::uint64_t kRefineEpisode = 4;
inline constexpr std::uint64_t kRefineTrain = 5;
inline constexpr std::uint64_t kEvaluate = 6;
inline constexpr std::uint64_t kGenerate = 16;  // + scenario number
}  // namespace streams

// --- configuration -----------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 1;
  rl::TrainingConfig training;
  ScenarioConfig scenario;  // shared by every tag; geometry comes from `geometry`
  std::array<IntersectionGeometry, 2> geometry{IntersectionGeometry::preset(Location::A),
                                               IntersectionGeometry::preset(Location::B)};
  ConflictParams conflict;
  RewardWeights weights;
  bool fixed_weights = false;
  metrics::StatsConfig stats;
  FilterParams filter;

  // Corpus and Stage 1.
  int corpus_interactions = 200;
  std::vector<int> corpus_tags{1, 2, 3, 4, 5, 6, 7, 8};
  double sigma_floor = 0.5;
  int pretrain_iterations = 1000;
  rl::ExplorationSchedule pretrain_noise;  // behaviour noise on offline batches, per iteration

  // Stage 2 (episode count is training.episodes).
  std::vector<int> refine_tags{1, 3};
  int updates_per_episode = 4;
  int eval_episodes = 200;

  // Stage 3.
  std::vector<int> generate_tags{1, 3};
  int generate_target = 100;
  int probe_window = 500;
  int max_episodes_per_scenario = 20000;
  double generate_noise = 0.0;

  RunConfig();
  void validate() const;
  void bind(kv::Binder& binder);
  kv::Document to_document();
  ScenarioConfig scenario_for(ScenarioTag tag) const;
};

// Defaults overlaid with the file's keys; unknown keys are rejected.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_document(const kv::Document& doc);

// --- episodes ----------------------------------------------------------------

struct EpisodeOptions {
  const rl::MultiAgent* policy = nullptr;  // null: autopilot throughout
  double noise_scale = 0.0;
  const SpeedStats* stats = nullptr;       // required for rewards
  RewardWeights weights;
  double reward_scale = 100.0;
};

struct EpisodeOutcome {
  EpisodeRecord record;               // frames before every step plus the final one
  rl::Rollout rollout;                // every transition
  std::vector<std::uint8_t> policy_active;  // per transition
  bool collided = false;
  int active_ticks = 0;
  std::array<double, 3> component_means{};  // collision, goal, scaled speed; over active ticks and agents
};

// At every tick the learned policy (plus noise) drives both agents while
// CurvTTC is below the critical threshold; otherwise the autopilot does.
// The speed reward compares the chosen action's predicted velocity with the
// autopilot's counterfactual one.
EpisodeOutcome run_episode(const EpisodeSetup& setup, const ConflictParams& conflict, const EpisodeOptions& options,
                           Rng& rng);

// Replay entries covering each maximal run of policy-active transitions.
std::vector<rl::ReplayEntry> intervention_entries(const EpisodeOutcome& outcome, int seq_len, int segment_steps);

// --- corpus ------------------------------------------------------------------

struct SynthOptions {
  int interactions = 200;
  std::vector<ScenarioTag> tags;
  int max_attempts = 200;  // per interaction
  double margin_s = 1.0;
};

// Autopilot episodes with timed spawns, kept only when the resampled
// interaction still has a safety-critical frame. Each interaction covers
// one margin before onset to one margin after the last safety-critical
// frame, at the corpus step.
std::vector<CorpusInteraction> synth_expert_corpus(const RunConfig& config, const SynthOptions& options,
                                                   std::uint64_t seed);

PracticalData ingest_corpus(const std::filesystem::path& path, const RunConfig& config);

// --- training ----------------------------------------------------------------

struct TelemetryRow {
  int index = 0;
  double noise = 0.0;
  std::array<double, 2> critic_loss{};
  std::array<double, 2> weighted_loss{};
  std::array<double, 2> actor_grad_norm{};
  std::array<double, 2> critic_grad_norm{};
  std::array<double, 2> mean_reward{};
  RewardWeights weights;
  int active_ticks = 0;
  bool collided = false;
  int sim_entries = 0;
};

void write_telemetry(const std::filesystem::path& path, const std::vector<TelemetryRow>& rows);

struct StageResult {
  rl::Checkpoint checkpoint;  // last good parameters
  std::vector<TelemetryRow> telemetry;
  bool diverged = false;
  std::string diagnostic;
};

// Mean critic loss over the first and last windows of the telemetry.
std::pair<double, double> loss_endpoints(const std::vector<TelemetryRow>& telemetry, double window_fraction = 0.05);

StageResult stage1_pretrain(PracticalData& practical, const RunConfig& config);

StageResult stage2_online(const rl::Checkpoint& start, PracticalData& practical, const RunConfig& config);

struct EvaluationResult {
  int episodes = 0;
  int collisions = 0;
  int interventions = 0;  // episodes where the policy took over
  double collision_rate() const { return episodes ? static_cast<double>(collisions) / episodes : 0.0; }
};

// Noise-free episodes over the refinement tags, seeded from a stream
// disjoint from training.
EvaluationResult evaluate_collisions(const rl::Checkpoint& checkpoint, const RunConfig& config);

// --- generation --------------------------------------------------------------

struct ScenarioOutput {
  ScenarioTag tag;
  std::vector<EpisodeRecord> episodes;
  std::vector<EpisodeLabels> labels;
  FilterReport report;
  std::map<Termination, int> raw_terminations;
};

struct GenerationResult {
  std::vector<ScenarioOutput> scenarios;
  FilterReport total;
  bool aborted = false;
  std::string diagnostic;
};

// Episodes run in blocks on `workers` threads and are consumed in index
// order, so the result does not depend on the worker count.
GenerationResult stage3_generate(const rl::Checkpoint& checkpoint, const RunConfig& config, int workers);

// Dataset files, per-scenario and total filter reports and the manifest.
void write_generation(const std::filesystem::path& dir, const GenerationResult& result, RunConfig config,
                      const std::string& checkpoint_ref);

// FNV-1a over a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

// Conflict-rate grid over onset speeds and the Spearman correlation of each
// marginal rate with its bin index.
struct TrendReport {
  metrics::Grid grid;
  double rho_vehicle = 0.0;
  double rho_pedestrian = 0.0;
  int bins_vehicle = 0;  // occupied bins used for each correlation
  int bins_pedestrian = 0;
};

TrendReport onset_speed_trend(const std::vector<EpisodeLabels>& labels);

}  // namespace evasim
