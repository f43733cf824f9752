#include "evasim/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "evasim/error.hpp"

namespace evasim {

namespace {

constexpr std::array<const char*, 10> kColumns = {"interaction_id", "frame", "veh_x", "veh_y", "veh_vx",
                                                  "veh_vy", "ped_x", "ped_y", "ped_vx", "ped_vy"};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') {
      out.emplace_back();
    } else if (c != '\r' && c != ' ' && c != '\t') {
      out.back() += c;
    }
  }
  return out;
}

int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw InputError(where + ": expected an integer, found '" + s + "'");
}

}  // namespace

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file " + path.string());
  std::string line;
  if (!std::getline(in, line) || split(line) == std::vector<std::string>{""}) {
    throw InputError(path.string() + ": empty corpus file");
  }
  const auto header = split(line);
  std::array<std::size_t, kColumns.size()> col{};
  for (std::size_t c = 0; c < kColumns.size(); ++c) {
    const auto it = std::find(header.begin(), header.end(), kColumns[c]);
    if (it == header.end()) throw InputError(path.string() + ": missing column '" + kColumns[c] + "'");
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  std::vector<CorpusInteraction> order;
  std::map<int, std::size_t> index;
  std::map<int, std::vector<int>> bad_lines;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (f.size() != header.size()) {
      throw InputError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(f.size()));
    }
    const int id = parse_int(f[col[0]], where);
    CorpusRow row;
    row.frame = parse_int(f[col[1]], where);
    std::array<double, 8> v{};
    bool missing = false;
    for (std::size_t c = 2; c < kColumns.size(); ++c) {
      const std::string& s = f[col[c]];
      if (s.empty()) {
        missing = true;
        continue;
      }
      try {
        v[c - 2] = kv::parse_double(s);
      } catch (const ConfigError&) {
        throw InputError(where + ": malformed value '" + s + "' in column " + kColumns[c]);
      }
      if (!std::isfinite(v[c - 2])) missing = true;
    }
    row.veh_pos = {v[0], v[1]};
    row.veh_vel = {v[2], v[3]};
    row.ped_pos = {v[4], v[5]};
    row.ped_vel = {v[6], v[7]};

    auto [it, inserted] = index.try_emplace(id, order.size());
    if (inserted) order.push_back({id, {}});
    auto& inter = order[it->second];
    if (!inter.rows.empty() && row.frame <= inter.rows.back().frame) {
      throw InputError(where + ": frames of interaction " + std::to_string(id) + " are not increasing");
    }
    if (missing) bad_lines[id].push_back(line_no);
    inter.rows.push_back(row);
  }

  Corpus corpus;
  for (auto& inter : order) {
    if (const auto b = bad_lines.find(inter.id); b != bad_lines.end()) {
      corpus.rejected.push_back({inter.id, b->second});
    } else {
      corpus.interactions.push_back(std::move(inter));
    }
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& path, const std::vector<CorpusInteraction>& interactions) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << kCorpusHeader << '\n';
    const auto d = [](double x) { return kv::format_double(x); };
    for (const auto& inter : interactions) {
      for (const auto& r : inter.rows) {
        out << inter.id << ',' << r.frame << ',' << d(r.veh_pos.x()) << ',' << d(r.veh_pos.y()) << ','
            << d(r.veh_vel.x()) << ',' << d(r.veh_vel.y()) << ',' << d(r.ped_pos.x()) << ',' << d(r.ped_pos.y())
            << ',' << d(r.ped_vel.x()) << ',' << d(r.ped_vel.y()) << '\n';
      }
    }
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw InputError("write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------

namespace {

double heading_of(const Vec2& v, double fallback) {
  return v.norm() > 1e-3 ? std::atan2(v.y(), v.x()) : fallback;
}

std::vector<AgentState> states_with_accel(const EpisodeRecord& e, bool vehicle) {
  std::vector<AgentState> s(e.frames.size());
  for (std::size_t i = 0; i < e.frames.size(); ++i) {
    const auto& f = e.frames[i];
    s[i].pos = vehicle ? f.veh_pos : f.ped_pos;
    s[i].vel = vehicle ? f.veh_vel : f.ped_vel;
    s[i].accel = i == 0 ? Vec2::Zero() : Vec2((s[i].vel - s[i - 1].vel) / e.dt_s);
  }
  return s;
}

}  // namespace

std::vector<AgentState> vehicle_states(const EpisodeRecord& e) {
  auto s = states_with_accel(e, true);
  if (s.empty()) return s;
  // Leading stops take the first moving direction, or the net displacement.
  double h = heading_of(s.back().pos - s.front().pos, 0.0);
  for (const auto& st : s) {
    if (st.vel.norm() > 1e-3) {
      h = std::atan2(st.vel.y(), st.vel.x());
      break;
    }
  }
  for (auto& st : s) {
    h = heading_of(st.vel, h);
    st.heading = h;
  }
  return s;
}

std::vector<AgentState> pedestrian_states(const EpisodeRecord& e) {
  auto s = states_with_accel(e, false);
  if (s.empty()) return s;
  double h = heading_of(s.back().pos - s.front().pos, heading_of(s.front().vel, 0.0));
  for (auto& st : s) st.heading = h;
  return s;
}

EpisodeRecord resample(const CorpusInteraction& inter, double dt, const ConflictParams& params) {
  EpisodeRecord e;
  e.count = inter.id;
  e.dt_s = dt;
  if (inter.rows.empty()) return e;
  const double t0 = inter.rows.front().frame * kCorpusDt;
  const double span = inter.rows.back().frame * kCorpusDt - t0;
  const int n = static_cast<int>(std::floor(span / dt + 1e-9)) + 1;
  std::size_t k = 0;
  for (int j = 0; j < n; ++j) {
    const double t = j * dt;
    while (k + 1 < inter.rows.size() && inter.rows[k + 1].frame * kCorpusDt - t0 < t - 1e-12) ++k;
    Frame f;
    f.frame = j;
    const auto& a = inter.rows[k];
    if (k + 1 < inter.rows.size()) {
      const auto& b = inter.rows[k + 1];
      const double ta = a.frame * kCorpusDt - t0;
      const double tb = b.frame * kCorpusDt - t0;
      const double u = std::clamp((t - ta) / (tb - ta), 0.0, 1.0);
      const auto lerp = [u](const Vec2& x, const Vec2& y) -> Vec2 { return x + u * (y - x); };
      f.veh_pos = lerp(a.veh_pos, b.veh_pos);
      f.veh_vel = lerp(a.veh_vel, b.veh_vel);
      f.ped_pos = lerp(a.ped_pos, b.ped_pos);
      f.ped_vel = lerp(a.ped_vel, b.ped_vel);
    } else {
      f.veh_pos = a.veh_pos;
      f.veh_vel = a.veh_vel;
      f.ped_pos = a.ped_pos;
      f.ped_vel = a.ped_vel;
    }
    f.distance = (f.veh_pos - f.ped_pos).norm();
    e.frames.push_back(f);
  }
  const auto veh = vehicle_states(e);
  const auto ped = pedestrian_states(e);
  for (std::size_t i = 0; i < e.frames.size(); ++i) e.frames[i].curv_ttc = curv_ttc(veh[i], ped[i], params);
  return e;
}

SpeedStats compute_speed_stats(const std::vector<EpisodeRecord>& episodes, double sigma_floor) {
  // Running sums per (agent, axis).
  std::array<double, 4> sum{}, sq{};
  double n = 0.0;
  for (const auto& e : episodes) {
    const auto veh = vehicle_states(e);
    const auto ped = pedestrian_states(e);
    for (std::size_t i = 0; i < veh.size(); ++i) {
      const Vec2 bv = to_body(veh[i].vel, veh[i].heading);
      const Vec2 bp = to_body(ped[i].vel, ped[i].heading);
      const std::array<double, 4> x{bv.x(), bv.y(), bp.x(), bp.y()};
      for (int a = 0; a < 4; ++a) {
        sum[a] += x[a];
        sq[a] += x[a] * x[a];
      }
      n += 1.0;
    }
  }
  if (n == 0.0) throw InputError("speed statistics need at least one frame");
  std::array<AxisStats, 4> ax;
  for (int a = 0; a < 4; ++a) {
    const double mean = sum[a] / n;
    const double var = std::max(sq[a] / n - mean * mean, 0.0);
    ax[a] = {mean, std::max(std::sqrt(var), sigma_floor)};
  }
  SpeedStats s;
  s.vehicle = {ax[0], ax[1]};
  s.pedestrian = {ax[2], ax[3]};
  s.validate();
  return s;
}

rl::Rollout to_rollout(const EpisodeRecord& e, const SpeedStats& stats, double reward_scale) {
  rl::Rollout r;
  const auto veh = vehicle_states(e);
  const auto ped = pedestrian_states(e);
  const int T = static_cast<int>(e.frames.size()) - 1;
  if (T < 1) return r;
  for (int t = 0; t <= T; ++t) {
    const auto [ov, op] = observe(veh[t], ped[t]);
    r.veh.obs.push_back(ov);
    r.ped.obs.push_back(op);
  }
  const double dt = e.dt_s;
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < 2; ++g) {
      const auto& s = g == 0 ? veh : ped;
      auto& out = g == 0 ? r.veh : r.ped;
      const AgentKind kind = g == 0 ? AgentKind::Vehicle : AgentKind::Pedestrian;
      const Vec2 v = to_body(s[t].vel, s[t].heading);
      const Vec2 nv = to_body(s[t + 1].vel, s[t].heading);
      const Vec2 a = (nv - v) / dt * (g == 0 ? 1.0 : 2.0);
      const Action act{a.x(), a.y()};
      out.actions.push_back(act);
      out.vel.push_back(v);
      out.next_vel.push_back(nv);
      out.rewards.push_back(reward_scale * speed_reward(rl::predict_velocity(v, act, dt, kind), nv, stats, kind));
    }
    r.terminal.push_back(t == T - 1 ? 1 : 0);
  }
  return r;
}

PracticalData build_practical(const Corpus& corpus, const rl::TrainingConfig& training, const ConflictParams& conflict,
                              double dt, double sigma_floor) {
  if (corpus.interactions.empty()) throw InputError("corpus holds no usable interactions");
  PracticalData d;
  d.rejected = corpus.rejected;
  for (const auto& inter : corpus.interactions) d.episodes.push_back(resample(inter, dt, conflict));
  d.stats = compute_speed_stats(d.episodes, sigma_floor);
  d.buffer = rl::ReplayBuffer(training.buffer_capacity);
  for (const auto& e : d.episodes) {
    const auto roll = to_rollout(e, d.stats, training.reward_scale);
    const int T = static_cast<int>(roll.terminal.size());
    d.transitions += T;
    for (auto& entry : rl::segment_rollout(roll, 0, T, training.shape.seq_len, training.segment_steps,
                                           rl::Provenance::Real)) {
      d.buffer.push(std::move(entry));
    }
  }
  return d;
}

}  // namespace evasim
