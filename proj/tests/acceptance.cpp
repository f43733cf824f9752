// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 3 5 9      run the listed criteria
//
// Exit status is 0 only if every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "evasim/conflict.hpp"
#include "evasim/corpus.hpp"
#include "evasim/dataset.hpp"
#include "evasim/metrics.hpp"
#include "evasim/pipeline.hpp"
#include "evasim/reward.hpp"
#include "evasim/rl.hpp"
#include "evasim/sstnet.hpp"
#include "evasim/world.hpp"
#include "gradcheck.hpp"

using namespace evasim;
namespace fs = std::filesystem;

namespace {

// Collects sub-checks of one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
    ++count_;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failures_.empty(); }
  std::string detail() const {
    std::ostringstream out;
    out << count_ - failures_.size() << "/" << count_ << " checks";
    for (const auto& n : notes_) out << "; " << n;
    for (const auto& f : failures_) out << "; FAILED: " << f;
    return out.str();
  }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
  std::size_t count_ = 0;
};

std::string num(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("evasim_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// --- 1: gradient fidelity ---------------------------------------------------------

nn::NetworkShape grad_shape() {
  nn::NetworkShape s;
  s.hidden = 8;
  s.layers = 2;
  s.heads = 2;
  s.key_dim = 3;
  s.seq_len = 4;
  s.head_hidden = {6, 5};
  s.encoder_dim = 4;
  return s;
}

nn::Seq random_seq(int L, int batch, Rng& rng) {
  std::normal_distribution<double> n(0.0, 3.0);
  nn::Seq s(L, Eigen::MatrixXd(nn::kTokenSize, batch));
  for (auto& m : s) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  }
  return s;
}

Eigen::MatrixXd random_matrix(int r, int c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void gradient_fidelity(Checks& c) {
  constexpr double kStep = 1e-5;
  constexpr double kTol = 1e-4;
  constexpr int kEvery = 1 << 20;  // every coordinate of every tensor
  double worst_actor = 0.0;
  double worst_critic = 0.0;
  double worst_action = 0.0;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto actor = nn::make_actor(grad_shape(), rng);
    const nn::Seq obs = random_seq(4, 3, rng);
    const Eigen::MatrixXd wa = random_matrix(2, 3, rng);
    const auto actor_loss = [&] { return nn::actor_forward(actor, obs).output.cwiseProduct(wa).sum(); };
    auto ga = nn::zeros_like(actor);
    nn::actor_backward(actor, nn::actor_forward(actor, obs), wa, ga);
    const auto ra = testing::check_gradients(actor, ga, actor_loss, kEvery, seed, kStep);
    worst_actor = std::max(worst_actor, ra.max_rel_error);
    checked += ra.checked;

    auto critic = nn::make_critic(grad_shape(), rng);
    Eigen::MatrixXd av = random_matrix(2, 3, rng);
    Eigen::MatrixXd ap = random_matrix(2, 3, rng);
    const Eigen::MatrixXd wq = random_matrix(1, 3, rng);
    const auto critic_loss = [&] { return nn::critic_forward(critic, obs, av, ap).output.cwiseProduct(wq).sum(); };
    auto gc = nn::zeros_like(critic);
    const auto in = nn::critic_backward(critic, nn::critic_forward(critic, obs, av, ap), wq, gc);
    const auto rc = testing::check_gradients(critic, gc, critic_loss, kEvery, seed, kStep);
    worst_critic = std::max(worst_critic, rc.max_rel_error);
    checked += rc.checked;

    for (auto* which : {&av, &ap}) {
      const Eigen::MatrixXd& exact = which == &av ? in.a_veh : in.a_ped;
      for (Eigen::Index i = 0; i < which->size(); ++i) {
        const double orig = which->data()[i];
        which->data()[i] = orig + kStep;
        const double up = critic_loss();
        which->data()[i] = orig - kStep;
        const double down = critic_loss();
        which->data()[i] = orig;
        const double numeric = (up - down) / (2.0 * kStep);
        const double scale = std::max({std::abs(numeric), std::abs(exact.data()[i]), 1e-6});
        worst_action = std::max(worst_action, std::abs(numeric - exact.data()[i]) / scale);
        ++checked;
      }
    }
  }
  c.expect(worst_actor < kTol, "actor max relative error " + num(worst_actor));
  c.expect(worst_critic < kTol, "critic max relative error " + num(worst_critic));
  c.expect(worst_action < kTol, "critic action-input max relative error " + num(worst_action));
  c.note(std::to_string(checked) + " coordinates, max rel error actor " + num(worst_actor, 3) + " critic " +
         num(worst_critic, 3));
}

// --- 2: training mechanics --------------------------------------------------------

nn::NetworkShape tiny_shape() {
  nn::NetworkShape s;
  s.hidden = 4;
  s.layers = 1;
  s.heads = 2;
  s.key_dim = 2;
  s.seq_len = 3;
  s.head_hidden = {5};
  s.encoder_dim = 3;
  return s;
}

rl::ReplayEntry random_entry(Rng& rng, int seq_len, int steps) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_real_distribution<double> a(-1.0, 1.0);
  rl::ReplayEntry e;
  e.terminal.assign(steps, 0);
  for (rl::AgentSegment* s : {&e.veh, &e.ped}) {
    for (int i = 0; i < seq_len + steps; ++i) {
      s->obs.push_back({u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)});
      s->prev_actions.push_back({a(rng), a(rng)});
    }
    for (int i = 0; i < steps; ++i) {
      s->actions.push_back({a(rng), a(rng)});
      s->rewards.push_back(a(rng));
      s->vel.emplace_back(1.0, 0.0);
      s->next_vel.emplace_back(1.0, 0.0);
    }
  }
  return e;
}

nn::HistoryWindow window(const rl::AgentSegment& s, int seq_len, int i, int offset) {
  nn::HistoryWindow w(seq_len);
  for (int t = 0; t < seq_len; ++t) {
    const auto k = static_cast<std::size_t>(i + t + offset);
    w.push(s.obs[k], s.prev_actions[k]);
  }
  return w;
}

void training_mechanics(Checks& c) {
  Rng rng(21);
  const nn::NetworkShape shape = tiny_shape();

  // Contraction of the soft update.
  const auto src = nn::make_critic(shape, rng);
  auto tgt = nn::make_critic(shape, rng);
  auto diff0 = tgt;
  nn::axpy(diff0, -1.0, src);
  const double d0 = std::sqrt(nn::squared_norm(diff0));
  const double tau = 0.01;
  double worst = 0.0;
  for (int n = 1; n <= 200; ++n) {
    nn::soft_update(src, tgt, tau);
    auto diff = tgt;
    nn::axpy(diff, -1.0, src);
    worst = std::max(worst, std::abs(std::sqrt(nn::squared_norm(diff)) - std::pow(1.0 - tau, n) * d0));
  }
  c.expect(worst < 1e-10, "soft-update contraction error " + num(worst));
  c.note("contraction error " + num(worst, 3) + " over 200 updates");

  // Targets start equal to their mains.
  const rl::MultiAgent m = rl::make_agents(shape, rng);
  bool equal = true;
  for (const rl::AgentNets* a : {&m.vehicle, &m.pedestrian}) {
    equal = equal && nn::same_values(a->actor, a->actor_target) && nn::same_values(a->critic, a->critic_target);
  }
  c.expect(equal, "targets initialised equal to mains");

  // A batch whose rewards place every target on the current Q has zero loss.
  rl::MultiAgent agents = m;
  rl::TrainingConfig cfg;
  cfg.shape = shape;
  const int L = shape.seq_len;
  rl::ReplayEntry e = random_entry(rng, L, 1);
  const Action next_v = nn::act(agents.vehicle.actor_target, window(e.veh, L, 0, 1));
  const Action next_p = nn::act(agents.pedestrian.actor_target, window(e.ped, L, 0, 1));
  for (int g = 0; g < 2; ++g) {
    const rl::AgentNets& n = g == 0 ? agents.vehicle : agents.pedestrian;
    rl::AgentSegment& s = g == 0 ? e.veh : e.ped;
    const double next_q = nn::evaluate_q(n.critic_target, window(s, L, 0, 1), next_v, next_p);
    const double q = nn::evaluate_q(n.critic, window(s, L, 0, 0), e.veh.actions[0], e.ped.actions[0]);
    s.rewards[0] = q - cfg.gamma * next_q;
  }
  rl::StepContext ctx;
  ctx.mode = rl::BatchMode::Stored;
  ctx.lr_actor = cfg.lr_actor;
  ctx.lr_critic = cfg.lr_critic;
  const rl::StepResult r = rl::train_step(agents, {&e, &e, &e}, cfg, ctx, rng);
  const double loss = std::max(r.critic_loss[0], r.critic_loss[1]);
  c.expect(loss < 1e-20, "fixed-point critic loss " + num(loss));
  c.expect(std::max(r.critic_grad_norm[0], r.critic_grad_norm[1]) < 1e-10, "fixed-point critic gradient");
  c.note("fixed-point loss " + num(loss, 3));
}

// --- 3: prioritised sampling ------------------------------------------------------

void prioritized_sampling(Checks& c) {
  rl::TrainingConfig cfg;
  Rng rng(31);
  std::uniform_real_distribution<double> td(0.0, 4.0);
  rl::ReplayBuffer b(100);
  for (int i = 0; i < 100; ++i) {
    rl::ReplayEntry e;
    e.provenance = i % 3 == 0 ? rl::Provenance::Real : rl::Provenance::Simulation;
    e.terminal = {0};
    b.push(std::move(e));
  }
  for (std::size_t i = 0; i < b.size(); ++i) b.update_td(i, i % 10 == 0 ? 0.0 : td(rng));

  std::vector<double> oracle(b.size());
  double total = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const bool real = b[i].provenance == rl::Provenance::Real;
    oracle[i] = std::pow(std::abs(b[i].td_error), cfg.priority_exponent) + (real ? cfg.real_bonus : 0.0) +
                cfg.priority_floor;
    total += oracle[i];
  }
  const auto probs = rl::sampling_probabilities(b, cfg);
  double prob_err = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) prob_err = std::max(prob_err, std::abs(probs[i] - oracle[i] / total));
  c.expect(prob_err < 1e-12, "probabilities match the priority formula");

  const int draws = 1000000;
  std::vector<double> freq(b.size(), 0.0);
  for (std::size_t i : rl::sample_prioritized(b, draws, cfg, rng)) freq[i] += 1.0 / draws;
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(freq[i] - probs[i]));
  c.expect(worst < 0.01, "max |freq - P| = " + num(worst));
  c.note("max |freq - P| " + num(worst, 3) + " over 1e6 draws");
}

// --- 4: rewards -------------------------------------------------------------------

void reward_suite(Checks& c) {
  c.expect(kCollisionPenalty == -200.0, "collision penalty");
  c.expect(kGoalReward == 100.0, "goal reward");
  c.expect(event_rewards(true, false).first == -200.0 && event_rewards(false, true).second == 100.0,
           "event rewards");

  SpeedStats s;
  s.vehicle = {{4.0, 2.0}, {0.1, 0.5}};
  s.pedestrian = {{1.4, 0.4}, {0.0, 0.2}};
  c.expect(speed_reward({3.0, 0.2}, {3.0, 0.2}, s, AgentKind::Vehicle) == 0.0, "speed reward zero at pred = obs");
  c.expect(std::abs(speed_reward({5.0, 0.2}, {3.0, 0.2}, s, AgentKind::Vehicle) + 1.0) < 1e-12,
           "one sigma longitudinal deviation gives -1");
  c.expect(std::abs(speed_reward({3.0, 0.7}, {3.0, 0.2}, s, AgentKind::Vehicle) + 1.0) < 1e-12,
           "one sigma lateral deviation gives -1");
  c.expect(std::abs(speed_reward({1.8, 0.0}, {1.4, 0.0}, s, AgentKind::Pedestrian) + 1.0) < 1e-12,
           "one sigma pedestrian deviation gives -1");

  Rng rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> m(-50.0, 50.0);
  double worst = 0.0;
  RewardWeights w;
  for (int i = 0; i < 10000; ++i) {
    w.lambda_temp = 0.01 + 2.0 * u(rng);
    w = update_weights(w, {m(rng), m(rng), m(rng)});
    worst = std::max(worst, std::abs(w.w1 + w.w2 + w.w3 - 1.0));
    if (i % 100 == 99) {
      const double a = u(rng), b = u(rng), d = u(rng);
      w = {a / (a + b + d), b / (a + b + d), 0.0, w.lambda_temp};
      w.w3 = 1.0 - w.w1 - w.w2;
    }
  }
  c.expect(worst <= 1e-12, "sum of weights drift " + num(worst));

  const RewardWeights hot{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0};
  const double e = std::numbers::e;
  const double hand = update_weights(hot, {2.0, 1.0, -1.0}).w1;
  c.expect(std::abs(hand - e / (e + 2.0)) < 1e-9, "e/(e+2) hand case: " + num(hand, 12));
  c.note("weight-sum drift " + num(worst, 3) + " over 1e4 updates");
}

// --- 5: CurvTTC oracle ------------------------------------------------------------

double closed_form_ttc(const Vec2& r, const Vec2& w, double d, double horizon) {
  if (r.norm() <= d) return 0.0;
  const double a = w.squaredNorm();
  const double b = 2.0 * r.dot(w);
  const double cc = r.squaredNorm() - d * d;
  const double disc = b * b - 4.0 * a * cc;
  if (a == 0.0 || disc < 0.0) return std::numeric_limits<double>::infinity();
  const double t = (-b - std::sqrt(disc)) / (2.0 * a);
  if (t < 0.0 || t > horizon) return std::numeric_limits<double>::infinity();
  return t;
}

AgentState moving(Vec2 pos, Vec2 vel) {
  AgentState s;
  s.pos = pos;
  s.vel = vel;
  s.heading = vel.norm() > 0 ? std::atan2(vel.y(), vel.x()) : 0.0;
  return s;
}

void curv_ttc_oracle(Checks& c) {
  const ConflictParams p;
  Rng rng(51);
  std::uniform_real_distribution<double> pos(-20.0, 20.0);
  std::uniform_real_distribution<double> vel(-6.0, 6.0);
  std::uniform_real_distribution<double> jitter(-2.0, 2.0);
  std::uniform_real_distribution<double> when(1.0, 12.0);
  int finite = 0;
  int mismatched = 0;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const AgentState v = moving({pos(rng), pos(rng)}, {vel(rng), vel(rng)});
    AgentState q = moving({pos(rng), pos(rng)}, {vel(rng), vel(rng)});
    if (i % 2) {
      // Aimed pair: relative motion heads for a point near the vehicle.
      const Vec2 miss(jitter(rng), jitter(rng));
      q.vel = v.vel + (v.pos + miss - q.pos) / when(rng);
    }
    const double expected = closed_form_ttc(q.pos - v.pos, q.vel - v.vel, p.collision_dist_m, p.horizon_s);
    const double got = curv_ttc(v, q, p);
    if (std::isfinite(expected) != std::isfinite(got)) {
      ++mismatched;
      continue;
    }
    if (std::isfinite(expected)) {
      ++finite;
      worst = std::max(worst, std::abs(got - expected));
    }
  }
  c.expect(mismatched == 0, std::to_string(mismatched) + " finiteness disagreements");
  c.expect(worst <= 2e-3, "max |error| " + num(worst) + " s");
  c.expect(finite > 0, "some pairs have finite CurvTTC");
  c.note(std::to_string(finite) + " finite pairs, max |error| " + num(worst, 3) + " s");
}

// --- 6: control mapping -----------------------------------------------------------

void control_mapping(Checks& c) {
  const VehicleSpec spec;
  const AgentState s = moving({0, 0}, {5, 0});
  const Control steer = control_from_accel({0.0, 2.0}, s, spec);
  const double expected_steer = std::atan(2.875 * 2.0 / (25.0 + 1e-6)) / 0.52;
  c.expect(std::abs(steer.steer - expected_steer) < 1e-6, "steer for 2 m/s^2 lateral at 5 m/s: " + num(steer.steer));
  c.expect(std::abs(steer.steer - 0.4347) < 5e-5, "steer rounds to 0.4347");
  const Control t = control_from_accel({9.25, 0.0}, s, spec);
  c.expect(std::abs(t.throttle - 1.0) < 1e-6 && t.brake == 0.0, "full throttle at max acceleration");
  const Control b = control_from_accel({-8.88, 0.0}, s, spec);
  c.expect(std::abs(b.brake - 1.0) < 1e-6 && b.throttle == 0.0, "full brake at max deceleration");

  Rng rng(61);
  std::uniform_real_distribution<double> acc(-30.0, 30.0);
  std::uniform_real_distribution<double> spd(0.0, 15.0);
  int odd = 0;
  int bounded = 0;
  for (int i = 0; i < 1000; ++i) {
    const AgentState st = moving({0, 0}, {spd(rng), 0});
    const Action a{acc(rng), acc(rng)};
    const Control x = control_from_accel(a, st, spec);
    const Control y = control_from_accel({a.long_accel, -a.lat_accel}, st, spec);
    odd += std::abs(x.steer + y.steer) <= 1e-12;
    bounded += std::abs(x.steer) <= 1.0 && x.throttle >= 0.0 && x.throttle <= 1.0 && x.brake >= 0.0 &&
               x.brake <= 1.0 && x.throttle * x.brake == 0.0;
  }
  c.expect(odd == 1000, "odd symmetry held on " + std::to_string(odd) + "/1000");
  c.expect(bounded == 1000, "saturation held on " + std::to_string(bounded) + "/1000");
}

// --- 7: filters -------------------------------------------------------------------

EpisodeRecord compliant(int frames = 120) {
  EpisodeRecord e;
  e.termination = Termination::Goal;
  for (int i = 0; i < frames; ++i) {
    const double s = static_cast<double>(i) / (frames - 1);
    Frame f;
    f.frame = i;
    f.veh_pos = {12.0 * s, 0.1 * s};
    f.veh_vel = {4.1, 0.01};
    f.ped_pos = {6.0, -3.0 + 6.0 * s};
    f.ped_vel = {0.0, 1.3};
    f.distance = (f.veh_pos - f.ped_pos).norm();
    f.curv_ttc = i < 30 ? std::numeric_limits<double>::infinity() : 3.0 + 0.01 * i;
    e.frames.push_back(f);
  }
  return e;
}

void filter_suite(Checks& c) {
  const FilterParams p;
  const ConflictParams cp;
  const auto verdict = [&](const EpisodeRecord& e) { return filter_episode(e, label_episode(e, cp), p); };

  std::vector<std::pair<EpisodeRecord, FilterReason>> cases;
  cases.emplace_back(compliant(), FilterReason::Kept);
  EpisodeRecord calm = compliant();
  for (auto& f : calm.frames) f.curv_ttc = 6.0;
  cases.emplace_back(calm, FilterReason::NoSafetyCritical);
  EpisodeRecord gappy = compliant();
  for (int i = 50; i < 60; ++i) gappy.frames[i].veh_vel.y() = std::nan("");
  cases.emplace_back(gappy, FilterReason::MissingValues);
  cases.emplace_back(compliant(99), FilterReason::TooShort);
  EpisodeRecord slow = compliant();
  for (auto& f : slow.frames) f.veh_pos *= 0.75;
  cases.emplace_back(slow, FilterReason::VehicleMotion);
  EpisodeRecord still = compliant();
  for (auto& f : still.frames) f.ped_pos.y() = -3.0 + (f.ped_pos.y() + 3.0) * 0.5;
  cases.emplace_back(still, FilterReason::PedestrianMotion);

  for (const auto& [e, want] : cases) {
    const FilterReason got = verdict(e);
    c.expect(got == want, "expected " + to_string(want) + ", got " + to_string(got));
  }
}

// --- 8: schema --------------------------------------------------------------------

void schema(Checks& c) {
  const auto dir = scratch("schema");
  const ConflictParams cp;
  Rng rng(81);
  std::uniform_real_distribution<double> u(-40.0, 40.0);
  std::vector<EpisodeRecord> episodes;
  std::vector<EpisodeLabels> labels;
  const ScenarioTag tag = ScenarioTag::from_number(5);
  for (int n = 0; n < 4; ++n) {
    EpisodeRecord e = compliant(100 + 13 * n);
    e.count = n;
    e.veh_id = 2 * n + 1;
    e.ped_id = 2 * n + 2;
    e.seed = 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(n);
    e.tag = tag;
    for (auto& f : e.frames) {
      f.veh_pos = {u(rng), u(rng) / 3.0};
      f.ped_pos = {u(rng) / 7.0, u(rng)};
      f.veh_vel = {u(rng) / 9.0, u(rng) / 11.0};
      f.ped_vel = {u(rng) / 13.0, u(rng) / 17.0};
      f.distance = (f.veh_pos - f.ped_pos).norm();
      f.curv_ttc = f.frame % 4 ? std::abs(u(rng)) / 8.0 : std::numeric_limits<double>::infinity();
    }
    labels.push_back(label_episode(e, cp));
    episodes.push_back(e);
  }
  write_scenario_file(dir, tag, episodes, labels);
  const auto path = dir / tag.file_name();
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  c.expect(header == kDatasetHeader, "header is the 14-column schema");
  int columns = 1;
  for (char ch : header) columns += ch == ',';
  c.expect(columns == 14, std::to_string(columns) + " columns");

  const auto back = read_scenario_file(path);
  bool exact = back.size() == episodes.size();
  double worst = 0.0;
  for (std::size_t i = 0; exact && i < back.size(); ++i) {
    const auto& a = episodes[i];
    const auto& b = back[i];
    exact = exact && a.count == b.count && a.veh_id == b.veh_id && a.ped_id == b.ped_id &&
            a.frames.size() == b.frames.size();
    for (std::size_t k = 0; exact && k < a.frames.size(); ++k) {
      const Frame& x = a.frames[k];
      const Frame& y = b.frames[k];
      exact = x.frame == y.frame && x.veh_pos == y.veh_pos && x.veh_vel == y.veh_vel && x.ped_pos == y.ped_pos &&
              x.ped_vel == y.ped_vel && x.distance == y.distance &&
              (x.curv_ttc == y.curv_ttc || (std::isinf(x.curv_ttc) && std::isinf(y.curv_ttc)));
      worst = std::max(worst, std::abs(y.distance - (y.veh_pos - y.ped_pos).norm()));
    }
  }
  c.expect(exact, "round trip is bit-exact");
  c.expect(worst <= 1e-9, "distance recomputes within " + num(worst));
  fs::remove_all(dir);
}

// --- 9: end-to-end desk pipeline --------------------------------------------------

struct Captured {
  int code = 0;
  std::string out;
};

Captured run_cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Captured r;
  r.code = cli::run(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str() + err.str();
  return r;
}

double number(const kv::Document& d, const std::string& key) {
  const auto it = d.find(key);
  return it == d.end() ? std::nan("") : kv::parse_double(it->second);
}

// The shipped workflow: each stage is a CLI subcommand and only files pass
// between stages.
void desk_pipeline(Checks& c) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto dir = scratch("pipeline");
  const std::string seed = "7";
  const auto corpus = (dir / "corpus" / "corpus.csv").string();
  const auto step = [&](std::vector<std::string> args, const fs::path& out) {
    args.insert(args.end(), {"--seed", seed, "--out", out.string()});
    const auto r = run_cli(args);
    c.expect(r.code == 0, args.front() + " exited with " + std::to_string(r.code) + ": " + r.out);
    return r.code == 0;
  };

  if (!step({"synth-corpus"}, dir / "corpus")) return;
  const int interactions = static_cast<int>(read_corpus(corpus).interactions.size());
  c.expect(interactions == 200, std::to_string(interactions) + " corpus interactions");

  if (!step({"pretrain", "--corpus", corpus}, dir / "s1")) return;
  const kv::Document s1 = kv::read_file(dir / "s1" / "summary.txt");
  const double ratio = number(s1, "critic_loss.ratio");
  c.expect(ratio < 0.5, "stage 1 final/initial critic loss " + num(ratio, 4));
  c.note("stage 1 loss " + num(number(s1, "critic_loss.initial"), 4) + " -> " +
         num(number(s1, "critic_loss.final"), 4) + " (ratio " + num(ratio, 3) + ")");

  if (!step({"refine", "--checkpoint", (dir / "s1" / "stage1.ckpt").string(), "--corpus", corpus}, dir / "s2")) {
    return;
  }
  const kv::Document s2 = kv::read_file(dir / "s2" / "summary.txt");
  c.expect(s2.at("episodes") == "500", s2.at("episodes") + " stage 2 episodes");
  c.expect(s2.at("evaluation.episodes") == "200", s2.at("evaluation.episodes") + " evaluation episodes");
  const double before = number(s2, "evaluation.collision_rate.unrefined");
  const double after = number(s2, "evaluation.collision_rate.refined");
  c.expect(after < before, "refined collision rate " + num(after, 4) + " not below unrefined " + num(before, 4));
  c.note("collision rate unrefined " + num(before, 3) + " refined " + num(after, 3));

  if (!step({"generate", "--checkpoint", (dir / "s2" / "stage2.ckpt").string()}, dir / "gen")) return;
  int scenarios = 0;
  for (const auto& e : fs::directory_iterator(dir / "gen")) {
    const auto name = e.path().filename().string();
    if (name.rfind("Location", 0) != 0 || name.find(".labels") != std::string::npos) continue;
    ++scenarios;
    const auto kept = read_scenario_file(e.path()).size();
    c.expect(kept == 100, name + " holds " + std::to_string(kept) + " episodes");
  }
  c.expect(scenarios == 2, std::to_string(scenarios) + " scenario files");
  const kv::Document trend = kv::read_file(dir / "gen" / "trend.txt");
  const double rho_v = number(trend, "spearman.vehicle_speed");
  const double rho_p = number(trend, "spearman.pedestrian_speed");
  c.expect(rho_v > 0.0, "Spearman rho along vehicle speed " + num(rho_v, 4));
  c.expect(rho_p > 0.0, "Spearman rho along pedestrian speed " + num(rho_p, 4));
  c.note("rho vehicle " + num(rho_v, 3) + " pedestrian " + num(rho_p, 3));
  c.note("runtime " + num(std::chrono::duration<double>(clock::now() - t0).count(), 3) + " s");
  fs::remove_all(dir);
}

// --- 10: statistics ---------------------------------------------------------------

void statistics(Checks& c) {
  const metrics::StatsConfig sc;
  // KS null calibration.
  int accepted = 0;
  std::vector<double> a(10000);
  std::vector<double> b(10000);
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + static_cast<std::uint64_t>(trial));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = n(rng);
    accepted += metrics::ks_two_sample(a, b, sc.ks_tolerance).p > 0.05;
  }
  c.expect(accepted >= 90, "KS null calibration " + std::to_string(accepted) + "/100");
  c.note("KS null accepted " + std::to_string(accepted) + "/100");

  // Means 1 and 0 with unit sample variance, 100 each.
  std::vector<double> x(100);
  std::vector<double> y(100);
  const double h = std::sqrt(99.0 / 100.0);
  for (int i = 0; i < 100; ++i) {
    x[i] = 1.0 + (i % 2 ? h : -h);
    y[i] = i % 2 ? -h : h;
  }
  const auto w = metrics::welch_t(x, y);
  c.expect(std::abs(w.t - 1.0 / std::sqrt(0.02)) < 1e-4, "Welch t " + num(w.t, 8));
  c.expect(std::abs(metrics::cohens_d(x, y) - 1.0) < 1e-4, "Cohen's d");
  c.expect(std::abs(metrics::welch_t(x, x).t) < 1e-12 && metrics::cohens_d(x, x) == 0.0, "identical samples");

  // TOST: identical large samples are equivalent; a mean gap of 1 is not.
  Rng rng(101);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> big(5000);
  for (auto& v : big) v = n(rng);
  c.expect(metrics::tost(big, big, 0.5, sc.alpha).equivalent, "TOST equivalent on identical samples");
  std::vector<double> shifted = big;
  for (auto& v : shifted) v += 1.0;
  c.expect(!metrics::tost(big, shifted, 0.5, sc.alpha).equivalent, "TOST not equivalent at gap 1");

  // ICC: agreement, the 4x3 ANOVA fixture and the null.
  Eigen::MatrixXd agree(3, 4);
  agree << 1, 1, 1, 1, 3, 3, 3, 3, 5, 5, 5, 5;
  c.expect(std::abs(metrics::icc_2k(agree).icc - 1.0) < 1e-12, "ICC of exact agreement");
  Eigen::MatrixXd f(4, 3);
  f << 9, 2, 5, 6, 1, 3, 8, 4, 6, 7, 1, 2;
  {
    const double grand = f.mean();
    const double nr = 4, nc = 3;
    const double ssr = nc * (f.rowwise().mean().array() - grand).square().sum();
    const double ssc = nr * (f.colwise().mean().array() - grand).square().sum();
    const double sst = (f.array() - grand).square().sum();
    const double msr = ssr / (nr - 1);
    const double msc = ssc / (nc - 1);
    const double mse = (sst - ssr - ssc) / ((nr - 1) * (nc - 1));
    const double expected = (msr - mse) / (msr + (msc - mse) / nr);
    const auto r = metrics::icc_2k(f);
    c.expect(std::abs(r.icc - expected) < 1e-12, "ICC 4x3 fixture " + num(r.icc, 10));
    c.expect(r.ci[0] < r.icc && r.icc < r.ci[1], "ICC interval brackets the estimate");
  }
  int small = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::MatrixXd m(50, 10);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    small += std::abs(metrics::icc_2k(m).icc) < 0.3;
  }
  c.expect(small >= 150, "independent ratings |ICC| < 0.3 in " + std::to_string(small) + "/200");
  c.note("null |ICC| < 0.3 in " + std::to_string(small) + "/200");
}

// --- 11: determinism --------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  }
  return m;
}

void determinism(Checks& c) {
  const auto dir = scratch("determinism");
  RunConfig cfg;
  cfg.seed = 11;
  auto& s = cfg.training.shape;
  s.hidden = 8;
  s.layers = 2;
  s.heads = 2;
  s.key_dim = 4;
  s.seq_len = 4;
  s.head_hidden = {8};
  s.encoder_dim = 4;
  cfg.training.batch = 4;
  cfg.training.episodes = 6;
  cfg.corpus_interactions = 12;
  cfg.pretrain_iterations = 20;
  cfg.eval_episodes = 6;
  cfg.generate_target = 4;
  const auto cfg_path = (dir / "run.cfg").string();
  kv::write_file(cfg_path, cfg.to_document());
  {
    std::ofstream(dir / "a.txt") << "1.5\n2.25\n3.0\n4.5\n7.0\n";
    std::ofstream(dir / "b.txt") << "2.0\n2.5\n3.5\n6.0\n8.0\n9.5\n";
    std::ofstream(dir / "m.csv") << "r1,r2,r3\n9,2,5\n6,1,3\n8,4,6\n7,1,2\n";
  }

  // Inputs produced once; every subcommand then runs twice on them.
  const auto in = dir / "inputs";
  const auto corpus = (in / "corpus" / "corpus.csv").string();
  const auto s1 = (in / "s1" / "stage1.ckpt").string();
  const auto s2 = (in / "s2" / "stage2.ckpt").string();
  const std::vector<std::string> base{"--config", cfg_path};
  const auto with = [&](std::vector<std::string> a, const fs::path& out) {
    a.insert(a.end(), base.begin(), base.end());
    a.push_back("--out");
    a.push_back(out.string());
    return a;
  };
  bool prepared = run_cli(with({"synth-corpus"}, in / "corpus")).code == 0 &&
                  run_cli(with({"pretrain", "--corpus", corpus}, in / "s1")).code == 0 &&
                  run_cli(with({"refine", "--checkpoint", s1, "--corpus", corpus}, in / "s2")).code == 0 &&
                  run_cli(with({"generate", "--checkpoint", s2}, in / "gen")).code == 0;
  c.expect(prepared, "input chain ran");
  if (!prepared) return;
  std::vector<std::string> datasets;
  for (const auto& e : fs::directory_iterator(in / "gen")) {
    const auto name = e.path().filename().string();
    if (name.rfind("Location", 0) == 0 && name.find(".labels") == std::string::npos) {
      datasets.push_back(e.path().string());
    }
  }
  std::sort(datasets.begin(), datasets.end());

  std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"synth-corpus", {"synth-corpus"}},
      {"pretrain", {"pretrain", "--corpus", corpus}},
      {"refine", {"refine", "--checkpoint", s1, "--corpus", corpus}},
      {"generate", {"generate", "--checkpoint", s2}},
      {"generate-2-workers", {"generate", "--checkpoint", s2, "--workers", "2"}},
      {"stats-ks", {"stats", "--test", "ks", "--a", (dir / "a.txt").string(), "--b", (dir / "b.txt").string()}},
      {"stats-welch", {"stats", "--test", "welch", "--a", (dir / "a.txt").string(), "--b", (dir / "b.txt").string()}},
      {"stats-icc", {"stats", "--test", "icc", "--a", (dir / "m.csv").string()}},
  };
  std::vector<std::string> filter{"filter", "--input"};
  filter.insert(filter.end(), datasets.begin(), datasets.end());
  commands.emplace_back("filter", filter);
  std::vector<std::string> evaluate{"evaluate", "--checkpoint", s2, "--input"};
  evaluate.insert(evaluate.end(), datasets.begin(), datasets.end());
  commands.emplace_back("evaluate", evaluate);
  if (datasets.size() >= 2) {
    commands.emplace_back("compare",
                          std::vector<std::string>{"compare", "--a", datasets[0], "--b", datasets[1]});
  }

  std::size_t files = 0;
  for (const auto& [name, args] : commands) {
    const auto r1 = run_cli(with(args, dir / "first" / name));
    const auto r2 = run_cli(with(args, dir / "second" / name));
    c.expect(r1.code == 0 && r2.code == 0, name + " exit codes " + std::to_string(r1.code) + "/" +
                                                 std::to_string(r2.code));
    c.expect(r1.out == r2.out, name + " stdout differs");
    const auto a = snapshot(dir / "first" / name);
    const auto b = snapshot(dir / "second" / name);
    c.expect(a == b, name + " artifacts differ");
    files += a.size();
  }
  // Worker count does not change the datasets.
  const auto one = snapshot(dir / "first" / "generate");
  const auto two = snapshot(dir / "first" / "generate-2-workers");
  bool same = true;
  for (const auto& [f, bytes] : one) {
    if (f.rfind("Location", 0) == 0) same = same && two.count(f) && two.at(f) == bytes;
  }
  c.expect(same, "generate datasets independent of worker count");
  c.note(std::to_string(commands.size()) + " subcommand runs, " + std::to_string(files) +
         " artifacts compared byte for byte");
  fs::remove_all(dir);
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(Checks&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gradient fidelity", gradient_fidelity},
      {2, "training mechanics", training_mechanics},
      {3, "prioritised sampling", prioritized_sampling},
      {4, "reward suite", reward_suite},
      {5, "CurvTTC oracle equivalence", curv_ttc_oracle},
      {6, "control mapping", control_mapping},
      {7, "filter suite", filter_suite},
      {8, "dataset schema", schema},
      {9, "end-to-end desk-scale learning", desk_pipeline},
      {10, "statistics calibration", statistics},
      {11, "determinism", determinism},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& cr : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), cr.id) == selected.end()) continue;
    Checks checks;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(checks);
    } catch (const std::exception& e) {
      checks.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  criterion %2d  %-32s %7.2fs  %s\n", checks.ok() ? "PASS" : "FAIL", cr.id, cr.title, secs,
                checks.detail().c_str());
    std::fflush(stdout);
    failed += !checks.ok();
  }
  return failed ? 1 : 0;
}
