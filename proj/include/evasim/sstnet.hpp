#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evasim/error.hpp"
#include "evasim/kv.hpp"
#include "evasim/world.hpp"

namespace evasim::nn {

using Eigen::MatrixXd;

// One matrix per time step, each (features x batch).
using Seq = std::vector<MatrixXd>;

struct NetworkShape {
  int hidden = 256;
  int layers = 2;
  int heads = 8;
  int key_dim = 32;
  int seq_len = 10;
  std::vector<int> head_hidden{64, 64};
  int encoder_dim = 16;  // critic state / action encoders

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

// One history token: the observation followed by the agent's own action
// from the previous tick (zero at episode start).
inline constexpr int kTokenSize = Observation::kSize + 2;

// Fixed per-feature input scaling (speeds / 5, distances / 20, actions / 5).
const Eigen::Matrix<double, kTokenSize, 1>& input_scale();
inline constexpr double kActionScale = 0.2;

struct DenseParams {
  MatrixXd W;
  MatrixXd b;  // out x 1
};

// h_t = A h_{t-1} + B x_t, y_t = C h_t + D x_t, followed by multi-head
// causal attention with queries/keys from h and values from y.
struct SstLayerParams {
  MatrixXd A, B, C, D;
  MatrixXd Wq, Wk;  // (heads * key_dim) x hidden
  MatrixXd Wo;      // hidden x hidden
  MatrixXd bo;
  int heads = 1;
  int key_dim = 1;
};

struct EncoderParams {
  DenseParams embed;  // 6 -> hidden
  std::vector<SstLayerParams> layers;
};

struct ActorParams {
  EncoderParams encoder;
  std::vector<DenseParams> head;  // ReLU between, linear output (long, lat)
};

struct CriticParams {
  EncoderParams encoder;
  DenseParams state_proj;   // hidden -> 16, ReLU
  DenseParams action_proj;  // 4 -> 16, ReLU
  std::vector<DenseParams> head;  // 32 -> ... -> 1
};

ActorParams make_actor(const NetworkShape& shape, Rng& rng);
CriticParams make_critic(const NetworkShape& shape, Rng& rng);

// Named views over every learnable tensor, in a fixed order.
using NamedTensors = std::vector<std::pair<std::string, MatrixXd*>>;
NamedTensors tensors(ActorParams& p);
NamedTensors tensors(CriticParams& p);

template <class P>
std::vector<std::pair<std::string, const MatrixXd*>> tensors(const P& p) {
  std::vector<std::pair<std::string, const MatrixXd*>> out;
  for (auto& [n, t] : tensors(const_cast<P&>(p))) out.emplace_back(n, t);
  return out;
}

template <class P>
P zeros_like(const P& p) {
  P z = p;
  for (auto& [n, t] : tensors(z)) t->setZero();
  return z;
}

// dst += scale * src
template <class P>
void axpy(P& dst, double scale, const P& src) {
  auto d = tensors(dst);
  auto s = tensors(src);
  for (std::size_t i = 0; i < d.size(); ++i) *d[i].second += scale * *s[i].second;
}

template <class P>
double squared_norm(const P& p) {
  double s = 0.0;
  for (const auto& [n, t] : tensors(p)) s += t->squaredNorm();
  return s;
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors(p)) n += static_cast<std::size_t>(t->size());
  return n;
}

// First and second moment estimates for Adam; empty until the first step.
template <class P>
struct AdamState {
  P m;
  P v;
  long step = 0;
};

// params -= lr * m_hat / (sqrt(v_hat) + eps), bias-corrected moments.
template <class P>
void adam_step(P& params, const P& grad, AdamState<P>& state, double lr, double beta1, double beta2, double eps) {
  if (state.step == 0) {
    state.m = zeros_like(params);
    state.v = zeros_like(params);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  auto p = tensors(params);
  auto g = tensors(grad);
  auto m = tensors(state.m);
  auto v = tensors(state.v);
  for (std::size_t i = 0; i < p.size(); ++i) {
    *m[i].second = beta1 * *m[i].second + (1.0 - beta1) * *g[i].second;
    *v[i].second = beta2 * *v[i].second + (1.0 - beta2) * g[i].second->cwiseAbs2();
    *p[i].second -= (lr * (*m[i].second / c1).array() / ((*v[i].second / c2).array().sqrt() + eps)).matrix();
  }
}

// target <- tau * source + (1 - tau) * target. Throws ConfigError on shape mismatch.
template <class P>
void soft_update(const P& source, P& target, double tau) {
  auto s = tensors(source);
  auto t = tensors(target);
  if (s.size() != t.size()) throw ConfigError("soft update: tensor count mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].second->rows() != t[i].second->rows() || s[i].second->cols() != t[i].second->cols()) {
      throw ConfigError("soft update: shape mismatch at " + s[i].first);
    }
  }
  for (std::size_t i = 0; i < s.size(); ++i) *t[i].second = tau * *s[i].second + (1.0 - tau) * *t[i].second;
}

template <class P>
bool same_values(const P& a, const P& b) {
  auto x = tensors(a);
  auto y = tensors(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].second->rows() != y[i].second->rows() || x[i].second->cols() != y[i].second->cols()) return false;
    if (*x[i].second != *y[i].second) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Forward / backward. Each forward returns a pass object holding the
// intermediates that backward needs; backward on a default-constructed pass
// throws UsageError. Gradients are accumulated into `grad`.

struct OpCounts {
  std::uint64_t recurrence_steps = 0;    // h_t updates per sequence
  std::uint64_t recurrence_macs = 0;     // multiply-adds spent in the recurrence
};

struct SstLayerPass {
  bool retained = false;
  int first_out = 0;  // attention evaluated only for t >= first_out
  Seq x, h, y, q, k;
  std::vector<std::vector<MatrixXd>> alpha;  // [head][t] : (t+1) x batch
  Seq att;                                   // concatenated head outputs
  Seq z;                                     // layer output (empty for t < first_out)
  OpCounts ops;
};

SstLayerPass sst_forward(const SstLayerParams& p, const Seq& x, int first_out = 0);
// `dz` holds adjoints for t >= first_out. Returns adjoints of the inputs.
Seq sst_backward(const SstLayerParams& p, const SstLayerPass& pass, const Seq& dz, SstLayerParams& grad);

struct EncoderPass {
  bool retained = false;
  Seq input;  // scaled observations
  Seq embedded;
  std::vector<SstLayerPass> layers;
  MatrixXd pooled;  // hidden x batch, final-position output
  OpCounts ops;
};

// `obs` holds seq_len matrices of raw observations (6 x batch).
EncoderPass encoder_forward(const EncoderParams& p, const Seq& obs);
void encoder_backward(const EncoderParams& p, const EncoderPass& pass, const MatrixXd& d_pooled,
                      EncoderParams& grad);

struct DensePass {
  MatrixXd input;
  MatrixXd pre;  // pre-activation
};

struct MlpPass {
  std::vector<DensePass> layers;
  MatrixXd output;
};

MlpPass mlp_forward(const std::vector<DenseParams>& p, const MatrixXd& x, bool relu_output = false);
MatrixXd mlp_backward(const std::vector<DenseParams>& p, const MlpPass& pass, const MatrixXd& d_out,
                      std::vector<DenseParams>* grad, bool relu_output = false);

struct ActorPass {
  bool retained = false;
  EncoderPass encoder;
  MlpPass head;
  MatrixXd output;  // 2 x batch: rows (long_accel, lat_accel)
};

ActorPass actor_forward(const ActorParams& p, const Seq& obs);
void actor_backward(const ActorParams& p, const ActorPass& pass, const MatrixXd& d_output, ActorParams& grad);

struct CriticHeadPass {
  bool retained = false;
  MatrixXd pooled;
  DensePass state;
  DensePass action;
  MatrixXd joint;
  MlpPass head;
  MatrixXd output;  // 1 x batch
};

CriticHeadPass critic_head_forward(const CriticParams& p, const MatrixXd& pooled, const MatrixXd& a_veh,
                                   const MatrixXd& a_ped);

struct CriticInputGrads {
  MatrixXd pooled;
  MatrixXd a_veh;
  MatrixXd a_ped;
};

// `grad` may be null when only input adjoints are wanted.
CriticInputGrads critic_head_backward(const CriticParams& p, const CriticHeadPass& pass, const MatrixXd& d_q,
                                      CriticParams* grad);

struct CriticPass {
  bool retained = false;
  EncoderPass encoder;
  CriticHeadPass head;
  MatrixXd output;
};

CriticPass critic_forward(const CriticParams& p, const Seq& obs, const MatrixXd& a_veh, const MatrixXd& a_ped);
CriticInputGrads critic_backward(const CriticParams& p, const CriticPass& pass, const MatrixXd& d_q,
                                 CriticParams& grad);

// exp(|td| / temperature); throws ConfigError unless temperature > 0.
double importance_weight(double td_error, double temperature);

// ---------------------------------------------------------------------------

struct HistoryItem {
  Observation obs;
  Action prev_action;  // own action that led to `obs`
};

// Most recent seq_len tokens, zero-padded at episode start, oldest first.
class HistoryWindow {
 public:
  explicit HistoryWindow(int length);
  void push(const Observation& obs, const Action& prev_action = {});
  int length() const { return static_cast<int>(data_.size()); }
  const std::vector<HistoryItem>& items() const { return data_; }

 private:
  std::vector<HistoryItem> data_;
};

Seq pack(const std::vector<const HistoryWindow*>& windows);
Seq pack(const HistoryWindow& window);

Action act(const ActorParams& p, const HistoryWindow& window);
double evaluate_q(const CriticParams& p, const HistoryWindow& window, const Action& a_veh, const Action& a_ped);

}  // namespace evasim::nn
