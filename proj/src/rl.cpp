#include "evasim/rl.hpp"

#include <algorithm>
#include <cmath>

#include "evasim/error.hpp"

namespace evasim::rl {

using nn::MatrixXd;
using nn::Seq;

void ExplorationSchedule::validate() const {
  if (!(n0 > n_min) || !(n_min >= 0.0)) throw ConfigError("exploration schedule needs n0 > n_min >= 0");
  if (!(decay > 0.0)) throw ConfigError("exploration decay must be positive");
}

void ExplorationSchedule::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "n0", n0);
  b.bind(p + "decay", decay);
  b.bind(p + "n_min", n_min);
}

double exploration_noise(double t, const ExplorationSchedule& s) { return s.n0 * std::exp(-s.decay * t) + s.n_min; }

void TrainingConfig::validate() const {
  if (buffer_capacity < 1 || batch < 1 || segment_steps < 1 || episodes < 0 || patience < 1) {
    throw ConfigError("training sizes must be positive");
  }
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (!(tau_soft > 0.0 && tau_soft <= 1.0)) throw ConfigError("tau_soft must lie in (0, 1]");
  for (double r : {lr_actor, lr_critic, lr_online_actor, lr_online_critic}) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("learning rates must be finite and non-negative");
  }
  if (!(priority_exponent >= 0.0) || !(real_bonus >= 0.0) || !(priority_floor >= 0.0)) {
    throw ConfigError("priority parameters must be non-negative");
  }
  if (!(real_fraction >= 0.0 && real_fraction <= 1.0)) throw ConfigError("real_fraction must lie in [0, 1]");
  if (!(td_temperature > 0.0)) throw ConfigError("td_temperature must be positive");
  if (!(reward_scale > 0.0)) throw ConfigError("reward_scale must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (optimizer != "sgd" && optimizer != "adam") throw ConfigError("optimizer must be sgd or adam");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw ConfigError("adam parameters out of range");
  }
  noise.validate();
  shape.validate();
}

void TrainingConfig::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "buffer_capacity", buffer_capacity);
  b.bind(p + "batch", batch);
  b.bind(p + "segment_steps", segment_steps);
  b.bind(p + "lr_actor", lr_actor);
  b.bind(p + "lr_critic", lr_critic);
  b.bind(p + "lr_online_actor", lr_online_actor);
  b.bind(p + "lr_online_critic", lr_online_critic);
  b.bind(p + "gamma", gamma);
  b.bind(p + "tau_soft", tau_soft);
  b.bind(p + "episodes", episodes);
  b.bind(p + "priority_exponent", priority_exponent);
  b.bind(p + "real_bonus", real_bonus);
  b.bind(p + "priority_floor", priority_floor);
  b.bind(p + "real_fraction", real_fraction);
  b.bind(p + "td_temperature", td_temperature);
  b.bind(p + "reward_scale", reward_scale);
  b.bind(p + "grad_norm_threshold", grad_norm_threshold);
  b.bind(p + "patience", patience);
  b.bind(p + "grad_clip", grad_clip);
  b.bind(p + "optimizer", optimizer);
  b.bind(p + "adam_beta1", adam_beta1);
  b.bind(p + "adam_beta2", adam_beta2);
  b.bind(p + "adam_eps", adam_eps);
  noise.bind(b, p + "noise.");
  shape.bind(b, p + "net.");
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ConfigError("replay capacity must be positive");
}

void ReplayBuffer::push(ReplayEntry entry) {
  // New entries get the largest priority seen so far so they are sampled soon.
  max_td_ = std::max(max_td_, entry.td_error);
  entry.td_error = max_td_;
  if (static_cast<int>(entries_.size()) == capacity_) entries_.pop_front();
  entries_.push_back(std::move(entry));
  ++pushed_;
}

void ReplayBuffer::update_td(std::size_t i, double td) {
  entries_.at(i).td_error = td;
  max_td_ = std::max(max_td_, td);
}

std::vector<double> priorities(const ReplayBuffer& buffer, const TrainingConfig& c) {
  std::vector<double> p(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto& e = buffer[i];
    p[i] = std::pow(std::abs(e.td_error), c.priority_exponent) +
           (e.provenance == Provenance::Real ? c.real_bonus : 0.0) + c.priority_floor;
  }
  return p;
}

std::vector<double> sampling_probabilities(const ReplayBuffer& buffer, const TrainingConfig& c) {
  auto p = priorities(buffer, c);
  double total = 0.0;
  for (double v : p) total += v;
  for (double& v : p) v /= total;
  return p;
}

std::vector<std::size_t> sample_prioritized(const ReplayBuffer& buffer, int count, const TrainingConfig& c,
                                            Rng& rng) {
  if (buffer.empty() || count <= 0) return {};
  const auto p = priorities(buffer, c);
  std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
  std::vector<std::size_t> out(static_cast<std::size_t>(count));
  for (auto& i : out) i = pick(rng);
  return out;
}

double critic_target(double reward, double next_q, double gamma, bool terminal) {
  return reward + (terminal ? 0.0 : gamma * next_q);
}

bool check_convergence(const std::vector<double>& grad_norms, const TrainingConfig& c) {
  if (static_cast<int>(grad_norms.size()) < c.patience) return false;
  return std::all_of(grad_norms.end() - c.patience, grad_norms.end(),
                     [&](double g) { return g < c.grad_norm_threshold; });
}

// ---------------------------------------------------------------------------

MultiAgent make_agents(const nn::NetworkShape& shape, Rng& rng) {
  MultiAgent m;
  m.shape = shape;
  for (auto* a : {&m.vehicle, &m.pedestrian}) {
    a->actor = nn::make_actor(shape, rng);
    a->critic = nn::make_critic(shape, rng);
    a->actor_target = a->actor;
    a->critic_target = a->critic;
  }
  return m;
}

Vec2 predict_velocity(const Vec2& vel, const Action& a, double dt, AgentKind agent) {
  const Vec2 acc(a.long_accel, a.lat_accel);
  return agent == AgentKind::Vehicle ? Vec2(vel + acc * dt) : Vec2(vel + 0.5 * acc * dt);
}

namespace {

struct AgentBatch {
  Seq cur;
  Seq next;
  MatrixXd actions;  // 2 x N
  MatrixXd rewards;  // 1 x N
  std::vector<Vec2> vel;
  std::vector<Vec2> next_vel;
};

AgentBatch gather(const std::vector<const ReplayEntry*>& batch, AgentKind agent, int L, int N) {
  AgentBatch b;
  b.cur.assign(L, MatrixXd(nn::kTokenSize, N));
  b.next.assign(L, MatrixXd(nn::kTokenSize, N));
  b.actions.resize(2, N);
  b.rewards.resize(1, N);
  b.vel.reserve(N);
  b.next_vel.reserve(N);
  int col = 0;
  for (const ReplayEntry* e : batch) {
    const AgentSegment& s = agent == AgentKind::Vehicle ? e->veh : e->ped;
    if (static_cast<int>(s.obs.size()) != L + e->steps() || s.prev_actions.size() != s.obs.size()) {
      throw InputError("replay entry has a malformed stream");
    }
    for (int i = 0; i < e->steps(); ++i, ++col) {
      for (int t = 0; t < L; ++t) {
        const auto a = s.obs[static_cast<std::size_t>(i + t)].to_array();
        const auto n = s.obs[static_cast<std::size_t>(i + t + 1)].to_array();
        for (int f = 0; f < Observation::kSize; ++f) {
          b.cur[t](f, col) = a[f];
          b.next[t](f, col) = n[f];
        }
        const Action& pa = s.prev_actions[static_cast<std::size_t>(i + t)];
        const Action& pn = s.prev_actions[static_cast<std::size_t>(i + t + 1)];
        b.cur[t](Observation::kSize, col) = pa.long_accel;
        b.cur[t](Observation::kSize + 1, col) = pa.lat_accel;
        b.next[t](Observation::kSize, col) = pn.long_accel;
        b.next[t](Observation::kSize + 1, col) = pn.lat_accel;
      }
      b.actions(0, col) = s.actions[i].long_accel;
      b.actions(1, col) = s.actions[i].lat_accel;
      b.rewards(0, col) = s.rewards[i];
      b.vel.push_back(s.vel[i]);
      b.next_vel.push_back(s.next_vel[i]);
    }
  }
  return b;
}

MatrixXd clamp_columns(const MatrixXd& a, const AccelLimits& lim) {
  MatrixXd out(a.rows(), a.cols());
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const Action x = clamp_action({a(0, c), a(1, c)}, lim);
    out(0, c) = x.long_accel;
    out(1, c) = x.lat_accel;
  }
  return out;
}

template <class P>
bool finite_params(const P& p) {
  for (const auto& [n, t] : nn::tensors(p)) {
    if (!t->allFinite()) return false;
  }
  return true;
}

}  // namespace

StepResult train_step(MultiAgent& agents, const std::vector<const ReplayEntry*>& batch, const TrainingConfig& config,
                      const StepContext& ctx, Rng& rng) {
  if (batch.empty()) throw UsageError("train_step needs a non-empty batch");
  const int L = agents.shape.seq_len;
  int N = 0;
  for (const auto* e : batch) N += e->steps();
  if (N == 0) throw InputError("batch holds no transitions");

  const std::array<AgentKind, 2> kinds{AgentKind::Vehicle, AgentKind::Pedestrian};
  std::array<AgentBatch, 2> data{gather(batch, kinds[0], L, N), gather(batch, kinds[1], L, N)};
  MatrixXd live(1, N);  // 1 - terminal
  {
    int col = 0;
    for (const auto* e : batch) {
      for (int i = 0; i < e->steps(); ++i) live(0, col++) = e->terminal[i] ? 0.0 : 1.0;
    }
  }

  // Next actions from the target actors.
  const MatrixXd next_veh = nn::actor_forward(agents.vehicle.actor_target, data[0].next).output;
  const MatrixXd next_ped = nn::actor_forward(agents.pedestrian.actor_target, data[1].next).output;

  // Current policy actions (needed for the policy gradient, and as the
  // behaviour action in offline mode).
  std::array<nn::ActorPass, 2> policy{nn::actor_forward(agents.vehicle.actor, data[0].cur),
                                      nn::actor_forward(agents.pedestrian.actor, data[1].cur)};

  std::array<MatrixXd, 2> own_action;
  std::array<MatrixXd, 2> reward;
  for (int g = 0; g < 2; ++g) {
    if (ctx.mode == BatchMode::Offline) {
      if (!ctx.stats) throw UsageError("offline batches need speed statistics");
      MatrixXd noisy = policy[g].output;
      if (ctx.noise_scale > 0.0) {
        std::normal_distribution<double> n(0.0, ctx.noise_scale);
        for (Eigen::Index i = 0; i < noisy.size(); ++i) noisy.data()[i] += n(rng);
      }
      own_action[g] = clamp_columns(noisy, g == 0 ? ctx.veh_limits : ctx.ped_limits);
      reward[g].resize(1, N);
      for (int c = 0; c < N; ++c) {
        const Vec2 pred =
            predict_velocity(data[g].vel[c], {own_action[g](0, c), own_action[g](1, c)}, ctx.dt_s, kinds[g]);
        reward[g](0, c) = config.reward_scale * speed_reward(pred, data[g].next_vel[c], *ctx.stats, kinds[g]);
      }
    } else {
      own_action[g] = data[g].actions;
      reward[g] = data[g].rewards;
    }
  }

  StepResult out;
  std::array<nn::CriticParams, 2> critic_grad;
  std::array<nn::ActorParams, 2> actor_grad;
  std::array<MatrixXd, 2> abs_td;
  for (int g = 0; g < 2; ++g) {
    AgentNets& net = agents.of(kinds[g]);
    const MatrixXd& a_veh = g == 0 ? own_action[0] : data[0].actions;
    const MatrixXd& a_ped = g == 1 ? own_action[1] : data[1].actions;

    const MatrixXd next_q = nn::critic_forward(net.critic_target, data[g].next, next_veh, next_ped).output;
    const MatrixXd y = reward[g] + config.gamma * live.cwiseProduct(next_q);
    const nn::CriticPass q = nn::critic_forward(net.critic, data[g].cur, a_veh, a_ped);
    const MatrixXd td = y - q.output;
    abs_td[g] = td.cwiseAbs();

    // Importance weights exp(|td| / temperature), normalised to mean one in
    // log space so large errors cannot overflow.
    MatrixXd logw = abs_td[g] / config.td_temperature;
    logw.array() -= logw.maxCoeff();
    MatrixXd w = logw.array().exp();
    w *= static_cast<double>(N) / w.sum();

    const double loss = w.cwiseProduct(td.cwiseProduct(td)).sum() / N;
    if (!std::isfinite(loss)) {
      throw NumericalError(std::string("non-finite critic loss for the ") + (g == 0 ? "vehicle" : "pedestrian"));
    }
    out.weighted_loss[g] = loss;
    out.critic_loss[g] = td.squaredNorm() / N;
    out.mean_reward[g] = reward[g].mean();

    critic_grad[g] = nn::zeros_like(net.critic);
    const MatrixXd d_q = -2.0 * w.cwiseProduct(td) / N;
    nn::critic_backward(net.critic, q, d_q, critic_grad[g]);

    // Policy gradient through the pre-update critic; the other agent's
    // action stays at its recorded value.
    const MatrixXd& pv = g == 0 ? policy[0].output : data[0].actions;
    const MatrixXd& pp = g == 1 ? policy[1].output : data[1].actions;
    const nn::CriticHeadPass head = nn::critic_head_forward(net.critic, q.encoder.pooled, pv, pp);
    const MatrixXd d_obj = MatrixXd::Constant(1, N, -1.0 / N);
    const nn::CriticInputGrads in = nn::critic_head_backward(net.critic, head, d_obj, nullptr);
    // Outside the acceleration limits the critic only extrapolates, so no
    // component may push the policy further out.
    MatrixXd d_action = g == 0 ? in.a_veh : in.a_ped;
    const AccelLimits& lim = g == 0 ? ctx.veh_limits : ctx.ped_limits;
    for (Eigen::Index i = 0; i < d_action.size(); ++i) {
      const double a = policy[g].output.data()[i];
      double& d = d_action.data()[i];
      if ((a >= lim.max_accel && d < 0.0) || (a <= -lim.max_decel && d > 0.0)) d = 0.0;
    }
    actor_grad[g] = nn::zeros_like(net.actor);
    nn::actor_backward(net.actor, policy[g], d_action, actor_grad[g]);

    out.critic_grad_norm[g] = std::sqrt(nn::squared_norm(critic_grad[g]));
    out.actor_grad_norm[g] = std::sqrt(nn::squared_norm(actor_grad[g]));
    if (!std::isfinite(out.critic_grad_norm[g]) || !std::isfinite(out.actor_grad_norm[g])) {
      throw NumericalError("non-finite gradient");
    }
  }

  // Reported norms are taken before clipping.
  const auto clip = [&](double norm) {
    return config.grad_clip > 0.0 && norm > config.grad_clip ? config.grad_clip / norm : 1.0;
  };
  for (int g = 0; g < 2; ++g) {
    AgentNets& net = agents.of(kinds[g]);
    if (config.optimizer == "adam") {
      nn::axpy(critic_grad[g], clip(out.critic_grad_norm[g]) - 1.0, critic_grad[g]);
      nn::axpy(actor_grad[g], clip(out.actor_grad_norm[g]) - 1.0, actor_grad[g]);
      nn::adam_step(net.critic, critic_grad[g], net.critic_opt, ctx.lr_critic, config.adam_beta1, config.adam_beta2,
                    config.adam_eps);
      nn::adam_step(net.actor, actor_grad[g], net.actor_opt, ctx.lr_actor, config.adam_beta1, config.adam_beta2,
                    config.adam_eps);
    } else {
      nn::axpy(net.critic, -ctx.lr_critic * clip(out.critic_grad_norm[g]), critic_grad[g]);
      nn::axpy(net.actor, -ctx.lr_actor * clip(out.actor_grad_norm[g]), actor_grad[g]);
    }
    if (!finite_params(net.critic) || !finite_params(net.actor)) throw NumericalError("parameters became non-finite");
    nn::soft_update(net.actor, net.actor_target, config.tau_soft);
    nn::soft_update(net.critic, net.critic_target, config.tau_soft);
  }

  out.entry_td.reserve(batch.size());
  int col = 0;
  for (const auto* e : batch) {
    double s = 0.0;
    for (int i = 0; i < e->steps(); ++i, ++col) s += 0.5 * (abs_td[0](0, col) + abs_td[1](0, col));
    out.entry_td.push_back(s / e->steps());
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ReplayEntry> segment_rollout(const Rollout& r, int begin, int end, int seq_len, int segment_steps,
                                         Provenance provenance) {
  const int T = static_cast<int>(r.terminal.size());
  if (begin < 0 || end > T || begin > end) throw UsageError("segment_rollout: range out of bounds");
  for (const AgentStream* s : {&r.veh, &r.ped}) {
    if (static_cast<int>(s->obs.size()) != T + 1 || static_cast<int>(s->actions.size()) != T ||
        static_cast<int>(s->rewards.size()) != T || static_cast<int>(s->vel.size()) != T ||
        static_cast<int>(s->next_vel.size()) != T) {
      throw UsageError("segment_rollout: stream lengths disagree");
    }
  }
  std::vector<ReplayEntry> out;
  for (int c = begin; c < end; c += segment_steps) {
    const int n = std::min(segment_steps, end - c);
    ReplayEntry e;
    e.provenance = provenance;
    e.terminal.assign(r.terminal.begin() + c, r.terminal.begin() + c + n);
    for (int g = 0; g < 2; ++g) {
      const AgentStream& s = g == 0 ? r.veh : r.ped;
      AgentSegment& seg = g == 0 ? e.veh : e.ped;
      for (int i = c - seq_len + 1; i <= c + n; ++i) {
        seg.obs.push_back(i < 0 ? Observation{} : s.obs[i]);
        seg.prev_actions.push_back(i < 1 ? Action{} : s.actions[i - 1]);
      }
      seg.actions.assign(s.actions.begin() + c, s.actions.begin() + c + n);
      seg.rewards.assign(s.rewards.begin() + c, s.rewards.begin() + c + n);
      seg.vel.assign(s.vel.begin() + c, s.vel.begin() + c + n);
      seg.next_vel.assign(s.next_vel.begin() + c, s.next_vel.begin() + c + n);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const std::array<const char*, 2> kAgentNames{"vehicle", "pedestrian"};

template <class P>
void export_params(nn::TensorFile& f, const std::string& prefix, const P& p) {
  for (const auto& [n, t] : nn::tensors(p)) f.tensors.emplace_back(prefix + n, *t);
}

template <class P>
void import_params(const nn::TensorFile& f, const std::string& prefix, P& p) {
  for (auto& [n, t] : nn::tensors(p)) {
    const auto& src = f.at(prefix + n);
    if (src.rows() != t->rows() || src.cols() != t->cols()) {
      throw InputError("checkpoint tensor " + prefix + n + " has an unexpected shape");
    }
    *t = src;
  }
}

}  // namespace

nn::TensorFile to_tensor_file(const Checkpoint& c) {
  nn::TensorFile f;
  kv::Binder b;
  nn::NetworkShape shape = c.agents.shape;
  shape.bind(b, "shape.");
  for (auto& [k, v] : b.dump()) f.meta[k] = v;
  const auto stats = c.stats.to_array();
  for (std::size_t i = 0; i < stats.size(); ++i) f.meta["speed_stats." + std::to_string(i)] = kv::format_double(stats[i]);
  f.meta["weights.w1"] = kv::format_double(c.weights.w1);
  f.meta["weights.w2"] = kv::format_double(c.weights.w2);
  f.meta["weights.w3"] = kv::format_double(c.weights.w3);
  f.meta["weights.lambda"] = kv::format_double(c.weights.lambda_temp);
  for (const auto& [k, v] : c.info) f.meta["info." + k] = v;
  for (int g = 0; g < 2; ++g) {
    const AgentNets& a = g == 0 ? c.agents.vehicle : c.agents.pedestrian;
    const std::string p = kAgentNames[g];
    export_params(f, p + ".actor.", a.actor);
    export_params(f, p + ".actor_target.", a.actor_target);
    export_params(f, p + ".critic.", a.critic);
    export_params(f, p + ".critic_target.", a.critic_target);
  }
  return f;
}

Checkpoint from_tensor_file(const nn::TensorFile& f) {
  Checkpoint c;
  kv::Binder b;
  nn::NetworkShape shape;
  shape.bind(b, "shape.");
  kv::Document shape_doc;
  std::array<double, 8> stats{};
  for (const auto& [k, v] : f.meta) {
    if (k.rfind("shape.", 0) == 0) {
      shape_doc[k] = v;
    } else if (k.rfind("speed_stats.", 0) == 0) {
      const auto i = std::stoul(k.substr(12));
      if (i >= stats.size()) throw InputError("bad speed statistic index in checkpoint");
      stats[i] = kv::parse_double(v);
    } else if (k.rfind("info.", 0) == 0) {
      c.info[k.substr(5)] = v;
    } else if (k == "weights.w1") {
      c.weights.w1 = kv::parse_double(v);
    } else if (k == "weights.w2") {
      c.weights.w2 = kv::parse_double(v);
    } else if (k == "weights.w3") {
      c.weights.w3 = kv::parse_double(v);
    } else if (k == "weights.lambda") {
      c.weights.lambda_temp = kv::parse_double(v);
    } else {
      throw InputError("unknown checkpoint metadata key '" + k + "'");
    }
  }
  b.apply(shape_doc);
  shape.validate();
  c.stats = SpeedStats::from_array(stats);
  Rng rng(0);
  c.agents = make_agents(shape, rng);
  for (int g = 0; g < 2; ++g) {
    AgentNets& a = g == 0 ? c.agents.vehicle : c.agents.pedestrian;
    const std::string p = kAgentNames[g];
    import_params(f, p + ".actor.", a.actor);
    import_params(f, p + ".actor_target.", a.actor_target);
    import_params(f, p + ".critic.", a.critic);
    import_params(f, p + ".critic_target.", a.critic_target);
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  nn::write_tensor_file(path, to_tensor_file(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return from_tensor_file(nn::read_tensor_file(path)); }

}  // namespace evasim::rl
