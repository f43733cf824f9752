#include "evasim/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "evasim/error.hpp"

namespace evasim {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index);
}

// ---------------------------------------------------------------------------

RunConfig::RunConfig() {
  // Desk-scale network and batch; the full sizes are in configs/full.cfg.
  training.shape.hidden = 32;
  training.shape.heads = 4;
  training.shape.key_dim = 8;
  training.batch = 16;
  training.episodes = 500;
  training.optimizer = "adam";
  // TD errors are in units of the scaled reward.
  training.td_temperature = training.reward_scale;
}

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void validate_tags(const std::vector<int>& tags, const std::string& name) {
  require(!tags.empty(), name + " must list at least one scenario");
  for (int t : tags) require(t >= 1 && t <= 8, name + " entries must lie in 1..8");
}

std::vector<ScenarioTag> to_tags(const std::vector<int>& numbers) {
  std::vector<ScenarioTag> out;
  for (int n : numbers) out.push_back(ScenarioTag::from_number(n));
  return out;
}

}  // namespace

void RunConfig::validate() const {
  training.validate();
  scenario.validate();
  for (const auto& g : geometry) g.validate();
  conflict.validate();
  weights.validate();
  stats.validate();
  filter.validate();
  require(corpus_interactions >= 0, "corpus.interactions must be non-negative");
  validate_tags(corpus_tags, "corpus.tags");
  require(sigma_floor > 0.0, "corpus.sigma_floor must be positive");
  require(pretrain_iterations >= 0, "pretrain.iterations must be non-negative");
  pretrain_noise.validate();
  validate_tags(refine_tags, "refine.tags");
  require(updates_per_episode >= 0, "refine.updates_per_episode must be non-negative");
  require(eval_episodes >= 0, "evaluate.episodes must be non-negative");
  validate_tags(generate_tags, "generate.tags");
  require(generate_target >= 0, "generate.target must be non-negative");
  require(probe_window >= 1, "generate.probe_window must be positive");
  require(max_episodes_per_scenario >= 1, "generate.max_episodes must be positive");
  require(generate_noise >= 0.0, "generate.noise must be non-negative");
}

void RunConfig::bind(kv::Binder& b) {
  b.bind("seed", seed);
  training.bind(b, "training.");
  scenario.bind(b, "scenario.", false);
  geometry[0].bind(b, "geometry.A.");
  geometry[1].bind(b, "geometry.B.");
  conflict.bind(b, "conflict.");
  b.bind("reward.w1", weights.w1);
  b.bind("reward.w2", weights.w2);
  b.bind("reward.w3", weights.w3);
  b.bind("reward.lambda", weights.lambda_temp);
  b.bind("reward.fixed_weights", fixed_weights);
  stats.bind(b, "stats.");
  filter.bind(b, "filter.");
  b.bind("corpus.interactions", corpus_interactions);
  b.bind("corpus.tags", corpus_tags);
  b.bind("corpus.sigma_floor", sigma_floor);
  b.bind("pretrain.iterations", pretrain_iterations);
  pretrain_noise.bind(b, "pretrain.noise.");
  b.bind("refine.tags", refine_tags);
  b.bind("refine.updates_per_episode", updates_per_episode);
  b.bind("evaluate.episodes", eval_episodes);
  b.bind("generate.tags", generate_tags);
  b.bind("generate.target", generate_target);
  b.bind("generate.probe_window", probe_window);
  b.bind("generate.max_episodes", max_episodes_per_scenario);
  b.bind("generate.noise", generate_noise);
}

kv::Document RunConfig::to_document() {
  kv::Binder b;
  bind(b);
  return b.dump();
}

ScenarioConfig RunConfig::scenario_for(ScenarioTag tag) const {
  ScenarioConfig c = scenario;
  c.tag = tag;
  c.geometry = geometry[tag.location == Location::A ? 0 : 1];
  return c;
}

RunConfig run_config_from_document(const kv::Document& doc) {
  RunConfig c;
  kv::Binder b;
  c.bind(b);
  b.apply(doc);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_document(kv::read_file(path)); }

// ---------------------------------------------------------------------------

namespace {

Action add_noise(const Action& a, double scale, Rng& rng) {
  if (scale <= 0.0) return a;
  std::normal_distribution<double> n(0.0, scale);
  const double dl = n(rng);
  const double dy = n(rng);
  return {a.long_accel + dl, a.lat_accel + dy};
}

rl::AgentStream& stream_of(rl::Rollout& r, int g) { return g == 0 ? r.veh : r.ped; }

}  // namespace

EpisodeOutcome run_episode(const EpisodeSetup& setup, const ConflictParams& conflict, const EpisodeOptions& opt,
                           Rng& rng) {
  const ScenarioConfig& cfg = setup.config;
  const double dt = cfg.dt_s;
  const int max_steps = static_cast<int>(std::lround(cfg.max_duration_s / dt));
  const AccelLimits veh_limits{cfg.vehicle.max_accel_mps2, cfg.vehicle.max_decel_mps2};
  const AccelLimits ped_limits{cfg.pedestrian.max_accel_mps2, cfg.pedestrian.max_decel_mps2};
  const int L = opt.policy ? opt.policy->shape.seq_len : 1;

  EpisodeOutcome out;
  out.record.dt_s = dt;
  out.record.tag = cfg.tag;
  nn::HistoryWindow win_v(L);
  nn::HistoryWindow win_p(L);
  AgentState veh = setup.veh0;
  AgentState ped = setup.ped0;
  std::array<double, 3> sums{};
  Action prev_v;
  Action prev_p;

  for (int t = 0;; ++t) {
    Frame f;
    f.frame = t;
    f.veh_pos = veh.pos;
    f.veh_vel = veh.vel;
    f.ped_pos = ped.pos;
    f.ped_vel = ped.vel;
    f.distance = (veh.pos - ped.pos).norm();
    f.curv_ttc = curv_ttc(veh, ped, conflict);
    out.record.frames.push_back(f);
    const auto [ov, op] = observe(veh, ped);
    out.rollout.veh.obs.push_back(ov);
    out.rollout.ped.obs.push_back(op);

    if (collided(veh, ped, cfg)) {
      out.record.termination = Termination::Collision;
      out.collided = true;
      break;
    }
    if (vehicle_at_goal(veh, setup) || pedestrian_at_goal(ped, setup)) {
      out.record.termination = Termination::Goal;
      break;
    }
    if (t >= max_steps) {
      out.record.termination = Termination::Timeout;
      break;
    }

    win_v.push(ov, prev_v);
    win_p.push(op, prev_p);
    const auto [auto_v, auto_p] = autopilot_step(veh, ped, setup);
    const Action ref_v = clamp_action(auto_v, veh_limits);
    const Action ref_p = clamp_action(auto_p, ped_limits);
    const bool active = opt.policy && f.curv_ttc < conflict.critical_threshold_s;
    Action av = ref_v;
    Action ap = ref_p;
    if (active) {
      av = clamp_action(add_noise(nn::act(opt.policy->vehicle.actor, win_v), opt.noise_scale, rng), veh_limits);
      ap = clamp_action(add_noise(nn::act(opt.policy->pedestrian.actor, win_p), opt.noise_scale, rng), ped_limits);
      ++out.active_ticks;
    }
    const AgentState nveh = step_vehicle(veh, av, dt, cfg.vehicle.steer_epsilon);
    const AgentState nped = step_pedestrian(ped, ap, dt);
    const bool hit = collided(nveh, nped, cfg);
    const std::array<bool, 2> goal{vehicle_at_goal(nveh, setup), pedestrian_at_goal(nped, setup)};
    const bool terminal = hit || goal[0] || goal[1] || t + 1 >= max_steps;

    for (int g = 0; g < 2; ++g) {
      const AgentState& s = g == 0 ? veh : ped;
      const AgentState& n = g == 0 ? nveh : nped;
      const Action& a = g == 0 ? av : ap;
      const Action& ref = g == 0 ? ref_v : ref_p;
      const AgentKind kind = g == 0 ? AgentKind::Vehicle : AgentKind::Pedestrian;
      const Vec2 v = to_body(s.vel, s.heading);
      RewardBreakdown r;
      if (opt.stats) {
        r.r_speed = opt.reward_scale * speed_reward(rl::predict_velocity(v, a, dt, kind),
                                                    rl::predict_velocity(v, ref, dt, kind), *opt.stats, kind);
      }
      std::tie(r.r_collision, r.r_goal) = event_rewards(hit, goal[g]);
      if (active) {
        sums[0] += r.r_collision;
        sums[1] += r.r_goal;
        sums[2] += r.r_speed;
      }
      rl::AgentStream& st = stream_of(out.rollout, g);
      st.actions.push_back(a);
      st.rewards.push_back(total_reward(r, opt.weights));
      st.vel.push_back(v);
      st.next_vel.push_back(to_body(n.vel, s.heading));
    }
    out.rollout.terminal.push_back(terminal ? 1 : 0);
    out.policy_active.push_back(active ? 1 : 0);
    prev_v = av;
    prev_p = ap;
    veh = nveh;
    ped = nped;
  }
  if (out.active_ticks > 0) {
    for (int k = 0; k < 3; ++k) out.component_means[k] = sums[k] / (2.0 * out.active_ticks);
  }
  return out;
}

std::vector<rl::ReplayEntry> intervention_entries(const EpisodeOutcome& o, int seq_len, int segment_steps) {
  std::vector<rl::ReplayEntry> out;
  const int T = static_cast<int>(o.policy_active.size());
  for (int b = 0; b < T;) {
    if (!o.policy_active[b]) {
      ++b;
      continue;
    }
    int e = b;
    while (e < T && o.policy_active[e]) ++e;
    for (auto& entry : rl::segment_rollout(o.rollout, b, e, seq_len, segment_steps, rl::Provenance::Simulation)) {
      out.push_back(std::move(entry));
    }
    b = e;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CorpusInteraction> synth_expert_corpus(const RunConfig& config, const SynthOptions& options,
                                                   std::uint64_t seed) {
  if (options.interactions < 0) throw ConfigError("interaction count must be non-negative");
  if (options.interactions > 0 && options.tags.empty()) throw ConfigError("synthetic corpus needs scenario tags");
  const double dt = config.scenario.dt_s;
  const int stride = static_cast<int>(std::lround(kCorpusDt / dt));
  if (stride < 1 || std::abs(stride * dt - kCorpusDt) > 1e-9) {
    throw ConfigError("simulation step must divide the corpus step");
  }
  const int margin = static_cast<int>(std::lround(options.margin_s / kCorpusDt));

  std::vector<CorpusInteraction> out;
  for (int k = 0; k < options.interactions; ++k) {
    const ScenarioTag tag = options.tags[static_cast<std::size_t>(k) % options.tags.size()];
    const ScenarioConfig sc = config.scenario_for(tag);
    Rng rng(derive_seed(seed, streams::kCorpus, static_cast<std::uint64_t>(k)));
    bool done = false;
    for (int attempt = 0; attempt < options.max_attempts && !done; ++attempt) {
      const EpisodeSetup setup = sample_setup(sc, rng);
      const EpisodeOutcome o = run_episode(setup, config.conflict, {}, rng);
      const auto& frames = o.record.frames;
      int onset = -1;
      int last = -1;
      for (int i = 0; i < static_cast<int>(frames.size()); ++i) {
        if (frames[i].curv_ttc < config.conflict.critical_threshold_s) {
          if (onset < 0) onset = i;
          last = i;
        }
      }
      if (onset < 0) continue;
      const int first = onset - stride * std::min(margin, onset / stride);
      const int end = std::min(last + stride * margin, static_cast<int>(frames.size()) - 1);
      CorpusInteraction inter;
      inter.id = k;
      for (int i = first, j = 0; i <= end; i += stride, ++j) {
        const Frame& f = frames[i];
        inter.rows.push_back({j, f.veh_pos, f.veh_vel, f.ped_pos, f.ped_vel});
      }
      if (inter.rows.size() < 2) continue;
      const EpisodeRecord check = resample(inter, dt, config.conflict);
      if (!label_episode(check, config.conflict).onset_frame) continue;
      out.push_back(std::move(inter));
      done = true;
    }
    if (!done) {
      throw ConfigError("scenario " + tag.file_name() + " produced no safety-critical interaction in " +
                        std::to_string(options.max_attempts) + " attempts");
    }
  }
  return out;
}

PracticalData ingest_corpus(const std::filesystem::path& path, const RunConfig& config) {
  return build_practical(read_corpus(path), config.training, config.conflict, config.scenario.dt_s,
                         config.sigma_floor);
}

// ---------------------------------------------------------------------------

void write_telemetry(const std::filesystem::path& path, const std::vector<TelemetryRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << "index,noise,critic_loss_veh,critic_loss_ped,actor_grad_veh,actor_grad_ped,critic_grad_veh,"
         "critic_grad_ped,reward_veh,reward_ped,w1,w2,w3,active_ticks,collided,sim_entries,weighted_loss_veh,"
         "weighted_loss_ped\n";
  const auto d = [](double x) { return kv::format_double(x); };
  for (const auto& r : rows) {
    out << r.index << ',' << d(r.noise) << ',' << d(r.critic_loss[0]) << ',' << d(r.critic_loss[1]) << ','
        << d(r.actor_grad_norm[0]) << ',' << d(r.actor_grad_norm[1]) << ',' << d(r.critic_grad_norm[0]) << ','
        << d(r.critic_grad_norm[1]) << ',' << d(r.mean_reward[0]) << ',' << d(r.mean_reward[1]) << ','
        << d(r.weights.w1) << ',' << d(r.weights.w2) << ',' << d(r.weights.w3) << ',' << r.active_ticks << ','
        << int(r.collided) << ',' << r.sim_entries << ',' << d(r.weighted_loss[0]) << ',' << d(r.weighted_loss[1])
        << '\n';
  }
  if (!out) throw InputError("write failed for " + path.string());
}

std::pair<double, double> loss_endpoints(const std::vector<TelemetryRow>& rows, double fraction) {
  if (rows.empty()) return {0.0, 0.0};
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * rows.size()));
  const auto mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + w; ++i) s += rows[i].critic_loss[0] + rows[i].critic_loss[1];
    return s / (2.0 * w);
  };
  return {mean(0), mean(rows.size() - w)};
}

namespace {

rl::StepContext step_context(const RunConfig& c, rl::BatchMode mode, double lr_actor, double lr_critic,
                             const SpeedStats* stats) {
  rl::StepContext ctx;
  ctx.mode = mode;
  ctx.lr_actor = lr_actor;
  ctx.lr_critic = lr_critic;
  ctx.stats = stats;
  ctx.dt_s = c.scenario.dt_s;
  ctx.veh_limits = {c.scenario.vehicle.max_accel_mps2, c.scenario.vehicle.max_decel_mps2};
  ctx.ped_limits = {c.scenario.pedestrian.max_accel_mps2, c.scenario.pedestrian.max_decel_mps2};
  return ctx;
}

void fill_row(TelemetryRow& row, const rl::StepResult& r) {
  row.critic_loss = r.critic_loss;
  row.weighted_loss = r.weighted_loss;
  row.actor_grad_norm = r.actor_grad_norm;
  row.critic_grad_norm = r.critic_grad_norm;
  row.mean_reward = r.mean_reward;
}

}  // namespace

StageResult stage1_pretrain(PracticalData& practical, const RunConfig& config) {
  config.validate();
  if (practical.buffer.empty()) throw InputError("pre-training needs a non-empty practical buffer");
  StageResult res;
  Rng init(derive_seed(config.seed, streams::kInit, 0));
  rl::MultiAgent agents = rl::make_agents(config.training.shape, init);
  Rng rng(derive_seed(config.seed, streams::kPretrain, 0));
  rl::StepContext ctx = step_context(config, rl::BatchMode::Offline, config.training.lr_actor,
                                     config.training.lr_critic, &practical.stats);

  for (int i = 0; i < config.pretrain_iterations; ++i) {
    const auto idx = rl::sample_prioritized(practical.buffer, config.training.batch, config.training, rng);
    std::vector<const rl::ReplayEntry*> batch;
    for (auto j : idx) batch.push_back(&practical.buffer[j]);
    ctx.noise_scale = rl::exploration_noise(i, config.pretrain_noise);
    const rl::MultiAgent last_good = agents;
    rl::StepResult r;
    try {
      r = rl::train_step(agents, batch, config.training, ctx, rng);
    } catch (const NumericalError& e) {
      agents = last_good;
      res.diverged = true;
      res.diagnostic = "iteration " + std::to_string(i) + ": " + e.what();
      break;
    }
    for (std::size_t j = 0; j < idx.size(); ++j) practical.buffer.update_td(idx[j], r.entry_td[j]);
    TelemetryRow row;
    row.index = i;
    row.noise = ctx.noise_scale;
    row.weights = config.weights;
    fill_row(row, r);
    res.telemetry.push_back(row);
  }
  res.checkpoint.agents = std::move(agents);
  res.checkpoint.stats = practical.stats;
  res.checkpoint.weights = config.weights;
  res.checkpoint.info["stage"] = "1";
  res.checkpoint.info["seed"] = std::to_string(config.seed);
  res.checkpoint.info["iterations"] = std::to_string(res.telemetry.size());
  return res;
}

StageResult stage2_online(const rl::Checkpoint& start, PracticalData& practical, const RunConfig& config) {
  config.validate();
  if (!(start.agents.shape == config.training.shape)) {
    throw ConfigError("checkpoint network shape differs from the configured one");
  }
  StageResult res;
  rl::MultiAgent agents = start.agents;
  const SpeedStats stats = start.stats;
  RewardWeights weights = start.weights;
  weights.lambda_temp = config.weights.lambda_temp;
  if (config.fixed_weights) weights = config.weights;
  rl::ReplayBuffer sim(config.training.buffer_capacity);
  Rng train_rng(derive_seed(config.seed, streams::kRefineTrain, 0));
  const auto tags = to_tags(config.refine_tags);
  const auto& tc = config.training;
  const rl::StepContext ctx = step_context(config, rl::BatchMode::Stored, tc.lr_online_actor, tc.lr_online_critic,
                                           &stats);
  const int n_real_default = static_cast<int>(std::lround(tc.batch * tc.real_fraction));

  for (int e = 0; e < tc.episodes && !res.diverged; ++e) {
    Rng erng(derive_seed(config.seed, streams::kRefineEpisode, static_cast<std::uint64_t>(e)));
    const EpisodeSetup setup = sample_setup(config.scenario_for(tags[static_cast<std::size_t>(e) % tags.size()]), erng);
    EpisodeOptions opt;
    opt.policy = &agents;
    opt.noise_scale = rl::exploration_noise(e, tc.noise);
    opt.stats = &stats;
    opt.weights = weights;
    opt.reward_scale = tc.reward_scale;
    const EpisodeOutcome o = run_episode(setup, config.conflict, opt, erng);
    for (auto& entry : intervention_entries(o, tc.shape.seq_len, tc.segment_steps)) sim.push(std::move(entry));

    TelemetryRow row;
    row.index = e;
    row.noise = opt.noise_scale;
    row.active_ticks = o.active_ticks;
    row.collided = o.collided;

    if (!sim.empty()) {
      for (int u = 0; u < config.updates_per_episode; ++u) {
        const int n_real = practical.buffer.empty() ? 0 : n_real_default;
        const auto idx_r = rl::sample_prioritized(practical.buffer, n_real, tc, train_rng);
        const auto idx_s = rl::sample_prioritized(sim, tc.batch - n_real, tc, train_rng);
        std::vector<const rl::ReplayEntry*> batch;
        for (auto j : idx_r) batch.push_back(&practical.buffer[j]);
        for (auto j : idx_s) batch.push_back(&sim[j]);
        if (batch.empty()) break;
        const rl::MultiAgent last_good = agents;
        rl::StepResult r;
        try {
          r = rl::train_step(agents, batch, tc, ctx, train_rng);
        } catch (const NumericalError& err) {
          agents = last_good;
          res.diverged = true;
          res.diagnostic = "episode " + std::to_string(e) + ": " + err.what();
          break;
        }
        for (std::size_t j = 0; j < idx_r.size(); ++j) practical.buffer.update_td(idx_r[j], r.entry_td[j]);
        for (std::size_t j = 0; j < idx_s.size(); ++j) sim.update_td(idx_s[j], r.entry_td[idx_r.size() + j]);
        fill_row(row, r);
      }
    }
    if (!config.fixed_weights && o.active_ticks > 0) weights = update_weights(weights, o.component_means);
    row.weights = weights;
    row.sim_entries = static_cast<int>(sim.size());
    res.telemetry.push_back(row);
  }
  res.checkpoint.agents = std::move(agents);
  res.checkpoint.stats = stats;
  res.checkpoint.weights = weights;
  res.checkpoint.info = start.info;
  res.checkpoint.info["stage"] = "2";
  res.checkpoint.info["refine_seed"] = std::to_string(config.seed);
  res.checkpoint.info["episodes"] = std::to_string(res.telemetry.size());
  return res;
}

EvaluationResult evaluate_collisions(const rl::Checkpoint& checkpoint, const RunConfig& config) {
  EvaluationResult res;
  const auto tags = to_tags(config.refine_tags);
  for (int k = 0; k < config.eval_episodes; ++k) {
    Rng rng(derive_seed(config.seed, streams::kEvaluate, static_cast<std::uint64_t>(k)));
    const EpisodeSetup setup = sample_setup(config.scenario_for(tags[static_cast<std::size_t>(k) % tags.size()]), rng);
    EpisodeOptions opt;
    opt.policy = &checkpoint.agents;
    opt.stats = &checkpoint.stats;
    opt.weights = checkpoint.weights;
    opt.reward_scale = config.training.reward_scale;
    const EpisodeOutcome o = run_episode(setup, config.conflict, opt, rng);
    ++res.episodes;
    if (o.collided) ++res.collisions;
    if (o.active_ticks > 0) ++res.interventions;
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

struct Generated {
  EpisodeRecord record;
  EpisodeLabels labels;
  FilterReason reason = FilterReason::Kept;
};

Generated generate_one(const rl::Checkpoint& ck, const RunConfig& config, const ScenarioConfig& sc,
                       std::uint64_t seed) {
  Rng rng(seed);
  const EpisodeSetup setup = sample_setup(sc, rng);
  EpisodeOptions opt;
  opt.policy = &ck.agents;
  opt.noise_scale = config.generate_noise;
  opt.stats = &ck.stats;
  opt.weights = ck.weights;
  opt.reward_scale = config.training.reward_scale;
  Generated g;
  g.record = run_episode(setup, config.conflict, opt, rng).record;
  g.record.seed = seed;
  g.labels = label_episode(g.record, config.conflict);
  g.reason = filter_episode(g.record, g.labels, config.filter);
  return g;
}

}  // namespace

GenerationResult stage3_generate(const rl::Checkpoint& ck, const RunConfig& config, int workers) {
  config.validate();
  if (workers < 1) throw ConfigError("worker count must be positive");
  GenerationResult res;
  const int block = workers * 4;
  for (const ScenarioTag& tag : to_tags(config.generate_tags)) {
    ScenarioOutput so;
    so.tag = tag;
    const ScenarioConfig sc = config.scenario_for(tag);
    const std::uint64_t stream = streams::kGenerate + static_cast<std::uint64_t>(tag.number());
    int next = 0;
    while (static_cast<int>(so.episodes.size()) < config.generate_target) {
      if (next >= config.max_episodes_per_scenario) {
        res.aborted = true;
        res.diagnostic = tag.file_name() + ": target not met within " +
                         std::to_string(config.max_episodes_per_scenario) + " episodes";
        break;
      }
      const int n = std::min(block, config.max_episodes_per_scenario - next);
      std::vector<Generated> results(static_cast<std::size_t>(n));
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (int i = w; i < n; i += workers) {
            results[static_cast<std::size_t>(i)] =
                generate_one(ck, config, sc, derive_seed(config.seed, stream, static_cast<std::uint64_t>(next + i)));
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& g : results) {
        ++next;
        so.report.add(g.reason);
        ++so.raw_terminations[g.record.termination];
        if (g.reason == FilterReason::Kept) {
          const int count = static_cast<int>(so.episodes.size());
          g.record.count = count;
          g.record.veh_id = 2 * count + 1;
          g.record.ped_id = 2 * count + 2;
          g.record.tag = tag;
          so.episodes.push_back(std::move(g.record));
          so.labels.push_back(g.labels);
          if (static_cast<int>(so.episodes.size()) == config.generate_target) break;
        }
        if (next >= config.probe_window && so.report.kept == 0) break;
      }
      if (next >= config.probe_window && so.report.kept == 0) {
        res.aborted = true;
        res.diagnostic = tag.file_name() + ": no qualifying episode in the first " +
                         std::to_string(config.probe_window) + " episodes";
        break;
      }
    }
    res.total.merge(so.report);
    res.scenarios.push_back(std::move(so));
    if (res.aborted) break;
  }
  return res;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void write_generation(const std::filesystem::path& dir, const GenerationResult& res, RunConfig config,
                      const std::string& checkpoint_ref) {
  std::filesystem::create_directories(dir);
  kv::Document report = res.total.to_document("total.");
  for (const auto& so : res.scenarios) {
    write_scenario_file(dir, so.tag, so.episodes, so.labels);
    const std::string stem = std::filesystem::path(so.tag.file_name()).stem().string();
    for (const auto& [k, v] : so.report.to_document(stem + ".")) report[k] = v;
    for (const auto& [t, n] : so.raw_terminations) report[stem + ".termination." + to_string(t)] = std::to_string(n);
  }
  report["aborted"] = res.aborted ? "true" : "false";
  if (res.aborted) report["diagnostic"] = res.diagnostic;
  kv::write_file(dir / "filter_report.txt", report);

  kv::Document manifest = config.to_document();
  manifest["manifest.checkpoint"] = checkpoint_ref;
  if (std::filesystem::exists(checkpoint_ref)) manifest["manifest.checkpoint_digest"] = file_digest(checkpoint_ref);
  std::string files;
  for (const auto& so : res.scenarios) files += (files.empty() ? "" : ",") + so.tag.file_name();
  manifest["manifest.files"] = files;
  kv::write_file(dir / "manifest.txt", manifest);
}

TrendReport onset_speed_trend(const std::vector<EpisodeLabels>& labels) {
  TrendReport t;
  t.grid = metrics::conflict_rate_grid(labels);
  const auto corr = [&](bool rows, int& used) {
    std::vector<double> x;
    std::vector<double> y;
    const auto m = metrics::marginal_rates(t.grid, rows);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      x.push_back(static_cast<double>(i));
      y.push_back(*m[i]);
    }
    used = static_cast<int>(x.size());
    return x.size() >= 2 ? metrics::spearman(x, y) : std::numeric_limits<double>::quiet_NaN();
  };
  t.rho_vehicle = corr(true, t.bins_vehicle);
  t.rho_pedestrian = corr(false, t.bins_pedestrian);
  return t;
}

}  // namespace evasim
