#include "evasim/sstnet.hpp"

#include <cmath>

#include "evasim/error.hpp"

namespace evasim::nn {

void NetworkShape::validate() const {
  if (hidden < 1 || layers < 1 || heads < 1 || key_dim < 1 || seq_len < 1 || encoder_dim < 1) {
    throw ConfigError("network dimensions must be positive");
  }
  if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the head count");
  for (int h : head_hidden) {
    if (h < 1) throw ConfigError("dense head widths must be positive");
  }
}

void NetworkShape::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "hidden", hidden);
  b.bind(p + "layers", layers);
  b.bind(p + "heads", heads);
  b.bind(p + "key_dim", key_dim);
  b.bind(p + "seq_len", seq_len);
  b.bind(p + "head_hidden", head_hidden);
  b.bind(p + "encoder_dim", encoder_dim);
}

const Eigen::Matrix<double, kTokenSize, 1>& input_scale() {
  static const Eigen::Matrix<double, kTokenSize, 1> s =
      (Eigen::Matrix<double, kTokenSize, 1>() << 0.2, 0.2, 0.05, 0.05, 0.2, 0.2, kActionScale, kActionScale)
          .finished();
  return s;
}

namespace {

MatrixXd uniform(int rows, int cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  MatrixXd m(rows, cols);
  // Fill row-major so initialization does not depend on storage order.
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = u(rng);
  }
  return m;
}

DenseParams make_dense(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  DenseParams d;
  d.W = uniform(out, in, bound, rng);
  d.b = uniform(out, 1, bound, rng);
  return d;
}

EncoderParams make_encoder(const NetworkShape& s, Rng& rng) {
  EncoderParams e;
  e.embed = make_dense(kTokenSize, s.hidden, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.hidden));
  const int qk = s.heads * s.key_dim;
  for (int l = 0; l < s.layers; ++l) {
    SstLayerParams p;
    p.heads = s.heads;
    p.key_dim = s.key_dim;
    p.A = uniform(s.hidden, s.hidden, bound, rng);
    p.B = uniform(s.hidden, s.hidden, bound, rng);
    p.C = uniform(s.hidden, s.hidden, bound, rng);
    p.D = uniform(s.hidden, s.hidden, bound, rng);
    p.Wq = uniform(qk, s.hidden, bound, rng);
    p.Wk = uniform(qk, s.hidden, bound, rng);
    p.Wo = uniform(s.hidden, s.hidden, bound, rng);
    p.bo = uniform(s.hidden, 1, bound, rng);
    e.layers.push_back(std::move(p));
  }
  return e;
}

std::vector<DenseParams> make_mlp(int in, const std::vector<int>& hidden, int out, Rng& rng) {
  std::vector<DenseParams> layers;
  for (int h : hidden) {
    layers.push_back(make_dense(in, h, rng));
    in = h;
  }
  layers.push_back(make_dense(in, out, rng));
  return layers;
}

void add_dense(NamedTensors& out, const std::string& p, DenseParams& d) {
  out.emplace_back(p + ".W", &d.W);
  out.emplace_back(p + ".b", &d.b);
}

void add_encoder(NamedTensors& out, EncoderParams& e) {
  add_dense(out, "encoder.embed", e.embed);
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    auto& p = e.layers[l];
    const std::string n = "encoder.sst" + std::to_string(l) + ".";
    out.emplace_back(n + "A", &p.A);
    out.emplace_back(n + "B", &p.B);
    out.emplace_back(n + "C", &p.C);
    out.emplace_back(n + "D", &p.D);
    out.emplace_back(n + "Wq", &p.Wq);
    out.emplace_back(n + "Wk", &p.Wk);
    out.emplace_back(n + "Wo", &p.Wo);
    out.emplace_back(n + "bo", &p.bo);
  }
}

MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }
MatrixXd relu_mask(const MatrixXd& pre, const MatrixXd& d) {
  return (pre.array() > 0.0).select(d, 0.0);
}

DensePass dense_forward(const DenseParams& p, const MatrixXd& x) {
  DensePass d;
  d.input = x;
  d.pre = p.W * x;
  d.pre.colwise() += p.b.col(0);
  return d;
}

// Accumulates parameter gradients (when `grad` is set) and returns dL/dx.
MatrixXd dense_backward(const DenseParams& p, const DensePass& pass, const MatrixXd& d_pre, DenseParams* grad) {
  if (grad) {
    grad->W.noalias() += d_pre * pass.input.transpose();
    grad->b.col(0) += d_pre.rowwise().sum();
  }
  return p.W.transpose() * d_pre;
}

void require(bool retained) {
  if (!retained) throw UsageError("backward called without a retained forward pass");
}

}  // namespace

ActorParams make_actor(const NetworkShape& shape, Rng& rng) {
  shape.validate();
  ActorParams a;
  a.encoder = make_encoder(shape, rng);
  a.head = make_mlp(shape.hidden, shape.head_hidden, 2, rng);
  return a;
}

CriticParams make_critic(const NetworkShape& shape, Rng& rng) {
  shape.validate();
  CriticParams c;
  c.encoder = make_encoder(shape, rng);
  c.state_proj = make_dense(shape.hidden, shape.encoder_dim, rng);
  c.action_proj = make_dense(4, shape.encoder_dim, rng);
  c.head = make_mlp(2 * shape.encoder_dim, shape.head_hidden, 1, rng);
  return c;
}

NamedTensors tensors(ActorParams& p) {
  NamedTensors out;
  add_encoder(out, p.encoder);
  for (std::size_t i = 0; i < p.head.size(); ++i) add_dense(out, "head" + std::to_string(i), p.head[i]);
  return out;
}

NamedTensors tensors(CriticParams& p) {
  NamedTensors out;
  add_encoder(out, p.encoder);
  add_dense(out, "state_proj", p.state_proj);
  add_dense(out, "action_proj", p.action_proj);
  for (std::size_t i = 0; i < p.head.size(); ++i) add_dense(out, "head" + std::to_string(i), p.head[i]);
  return out;
}

// ---------------------------------------------------------------------------

SstLayerPass sst_forward(const SstLayerParams& p, const Seq& x, int first_out) {
  const int L = static_cast<int>(x.size());
  if (L < 1) throw ConfigError("sst layer needs a non-empty sequence");
  const auto batch = x[0].cols();
  const auto d = p.A.rows();
  const int heads = p.heads;
  const int dk = p.key_dim;
  const auto dv = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  SstLayerPass s;
  s.first_out = std::clamp(first_out, 0, L - 1);
  s.x = x;
  s.h.resize(L);
  s.y.resize(L);
  s.q.resize(L);
  s.k.resize(L);
  for (int t = 0; t < L; ++t) {
    s.h[t] = p.B * x[t];
    if (t > 0) s.h[t].noalias() += p.A * s.h[t - 1];
    s.y[t] = p.C * s.h[t];
    s.y[t].noalias() += p.D * x[t];
    s.q[t] = p.Wq * s.h[t];
    s.k[t] = p.Wk * s.h[t];
    ++s.ops.recurrence_steps;
    s.ops.recurrence_macs += static_cast<std::uint64_t>((t > 0 ? d : 0) * d + d * x[t].rows());
  }

  s.alpha.assign(heads, std::vector<MatrixXd>(L));
  s.att.resize(L);
  s.z.resize(L);
  for (int t = s.first_out; t < L; ++t) {
    s.att[t] = MatrixXd::Zero(d, batch);
    for (int j = 0; j < heads; ++j) {
      MatrixXd logits(t + 1, batch);
      for (int u = 0; u <= t; ++u) {
        logits.row(u) = (s.q[t].middleRows(j * dk, dk).cwiseProduct(s.k[u].middleRows(j * dk, dk)))
                            .colwise()
                            .sum() *
                        inv_sqrt_dk;
      }
      const Eigen::RowVectorXd mx = logits.colwise().maxCoeff();
      MatrixXd a = (logits.rowwise() - mx).array().exp();
      const Eigen::RowVectorXd total = a.colwise().sum();
      a.array().rowwise() /= total.array();
      for (int u = 0; u <= t; ++u) {
        s.att[t].middleRows(j * dv, dv).array() +=
            s.y[u].middleRows(j * dv, dv).array().rowwise() * a.row(u).array();
      }
      s.alpha[j][t] = std::move(a);
    }
    s.z[t] = p.Wo * s.att[t];
    s.z[t].colwise() += p.bo.col(0);
  }
  s.retained = true;
  return s;
}

Seq sst_backward(const SstLayerParams& p, const SstLayerPass& s, const Seq& dz, SstLayerParams& g) {
  require(s.retained);
  const int L = static_cast<int>(s.x.size());
  const auto batch = s.x[0].cols();
  const auto d = p.A.rows();
  const int heads = p.heads;
  const int dk = p.key_dim;
  const auto dv = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Seq dh(L, MatrixXd::Zero(d, batch));
  Seq dy(L, MatrixXd::Zero(d, batch));
  Seq dq(L, MatrixXd::Zero(p.Wq.rows(), batch));
  Seq dk_(L, MatrixXd::Zero(p.Wk.rows(), batch));

  for (int t = s.first_out; t < L; ++t) {
    if (dz[t].size() == 0) continue;
    g.Wo.noalias() += dz[t] * s.att[t].transpose();
    g.bo.col(0) += dz[t].rowwise().sum();
    const MatrixXd datt = p.Wo.transpose() * dz[t];
    for (int j = 0; j < heads; ++j) {
      const MatrixXd& a = s.alpha[j][t];
      const auto dout = datt.middleRows(j * dv, dv);
      MatrixXd dalpha(t + 1, batch);
      for (int u = 0; u <= t; ++u) {
        const auto yu = s.y[u].middleRows(j * dv, dv);
        dalpha.row(u) = dout.cwiseProduct(yu).colwise().sum();
        dy[u].middleRows(j * dv, dv).array() += dout.array().rowwise() * a.row(u).array();
      }
      const Eigen::RowVectorXd inner = a.cwiseProduct(dalpha).colwise().sum();
      const MatrixXd dlogit = a.cwiseProduct((dalpha.rowwise() - inner)) * inv_sqrt_dk;
      for (int u = 0; u <= t; ++u) {
        dq[t].middleRows(j * dk, dk).array() +=
            s.k[u].middleRows(j * dk, dk).array().rowwise() * dlogit.row(u).array();
        dk_[u].middleRows(j * dk, dk).array() +=
            s.q[t].middleRows(j * dk, dk).array().rowwise() * dlogit.row(u).array();
      }
    }
  }

  Seq dx(L);
  for (int t = 0; t < L; ++t) {
    g.Wq.noalias() += dq[t] * s.h[t].transpose();
    g.Wk.noalias() += dk_[t] * s.h[t].transpose();
    dh[t].noalias() += p.Wq.transpose() * dq[t];
    dh[t].noalias() += p.Wk.transpose() * dk_[t];
    g.C.noalias() += dy[t] * s.h[t].transpose();
    g.D.noalias() += dy[t] * s.x[t].transpose();
    dh[t].noalias() += p.C.transpose() * dy[t];
    dx[t] = p.D.transpose() * dy[t];
  }
  MatrixXd carry;
  for (int t = L - 1; t >= 0; --t) {
    MatrixXd gt = dh[t];
    if (t + 1 < L) gt.noalias() += p.A.transpose() * carry;
    if (t > 0) g.A.noalias() += gt * s.h[t - 1].transpose();
    g.B.noalias() += gt * s.x[t].transpose();
    dx[t].noalias() += p.B.transpose() * gt;
    carry = std::move(gt);
  }
  return dx;
}

EncoderPass encoder_forward(const EncoderParams& p, const Seq& obs) {
  if (obs.empty()) throw ConfigError("encoder needs a non-empty observation sequence");
  EncoderPass e;
  const int L = static_cast<int>(obs.size());
  e.input.resize(L);
  e.embedded.resize(L);
  for (int t = 0; t < L; ++t) {
    if (obs[t].rows() != kTokenSize) throw ConfigError("history tokens must have 8 rows");
    e.input[t] = input_scale().asDiagonal() * obs[t];
    e.embedded[t] = p.embed.W * e.input[t];
    e.embedded[t].colwise() += p.embed.b.col(0);
  }
  const Seq* x = &e.embedded;
  const int n = static_cast<int>(p.layers.size());
  e.layers.reserve(n);
  for (int l = 0; l < n; ++l) {
    e.layers.push_back(sst_forward(p.layers[l], *x, l + 1 == n ? L - 1 : 0));
    e.ops.recurrence_steps += e.layers.back().ops.recurrence_steps;
    e.ops.recurrence_macs += e.layers.back().ops.recurrence_macs;
    x = &e.layers.back().z;
  }
  e.pooled = (*x)[L - 1];
  e.retained = true;
  return e;
}

void encoder_backward(const EncoderParams& p, const EncoderPass& e, const MatrixXd& d_pooled, EncoderParams& g) {
  require(e.retained);
  const int L = static_cast<int>(e.input.size());
  Seq dz(L);
  dz[L - 1] = d_pooled;
  for (int l = static_cast<int>(p.layers.size()) - 1; l >= 0; --l) {
    dz = sst_backward(p.layers[l], e.layers[l], dz, g.layers[l]);
  }
  for (int t = 0; t < L; ++t) {
    g.embed.W.noalias() += dz[t] * e.input[t].transpose();
    g.embed.b.col(0) += dz[t].rowwise().sum();
  }
}

MlpPass mlp_forward(const std::vector<DenseParams>& p, const MatrixXd& x, bool relu_output) {
  MlpPass m;
  MatrixXd a = x;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m.layers.push_back(dense_forward(p[i], a));
    const bool last = i + 1 == p.size();
    a = (!last || relu_output) ? relu(m.layers.back().pre) : m.layers.back().pre;
  }
  m.output = std::move(a);
  return m;
}

MatrixXd mlp_backward(const std::vector<DenseParams>& p, const MlpPass& m, const MatrixXd& d_out,
                      std::vector<DenseParams>* grad, bool relu_output) {
  MatrixXd d = d_out;
  for (int i = static_cast<int>(p.size()) - 1; i >= 0; --i) {
    const bool last = i + 1 == static_cast<int>(p.size());
    if (!last || relu_output) d = relu_mask(m.layers[i].pre, d);
    d = dense_backward(p[i], m.layers[i], d, grad ? &(*grad)[i] : nullptr);
  }
  return d;
}

ActorPass actor_forward(const ActorParams& p, const Seq& obs) {
  ActorPass a;
  a.encoder = encoder_forward(p.encoder, obs);
  a.head = mlp_forward(p.head, a.encoder.pooled);
  a.output = a.head.output;
  a.retained = true;
  return a;
}

void actor_backward(const ActorParams& p, const ActorPass& a, const MatrixXd& d_output, ActorParams& g) {
  require(a.retained);
  const MatrixXd d_pooled = mlp_backward(p.head, a.head, d_output, &g.head);
  encoder_backward(p.encoder, a.encoder, d_pooled, g.encoder);
}

CriticHeadPass critic_head_forward(const CriticParams& p, const MatrixXd& pooled, const MatrixXd& a_veh,
                                   const MatrixXd& a_ped) {
  CriticHeadPass c;
  c.pooled = pooled;
  c.state = dense_forward(p.state_proj, pooled);
  MatrixXd actions(4, pooled.cols());
  actions << a_veh * kActionScale, a_ped * kActionScale;
  c.action = dense_forward(p.action_proj, actions);
  const auto e = p.state_proj.W.rows();
  c.joint.resize(2 * e, pooled.cols());
  c.joint << relu(c.state.pre), relu(c.action.pre);
  c.head = mlp_forward(p.head, c.joint);
  c.output = c.head.output;
  c.retained = true;
  return c;
}

CriticInputGrads critic_head_backward(const CriticParams& p, const CriticHeadPass& c, const MatrixXd& d_q,
                                      CriticParams* g) {
  require(c.retained);
  const MatrixXd d_joint = mlp_backward(p.head, c.head, d_q, g ? &g->head : nullptr);
  const auto e = p.state_proj.W.rows();
  const MatrixXd d_state = relu_mask(c.state.pre, d_joint.topRows(e));
  const MatrixXd d_action = relu_mask(c.action.pre, d_joint.bottomRows(e));
  CriticInputGrads out;
  out.pooled = dense_backward(p.state_proj, c.state, d_state, g ? &g->state_proj : nullptr);
  const MatrixXd d_in = dense_backward(p.action_proj, c.action, d_action, g ? &g->action_proj : nullptr);
  out.a_veh = d_in.topRows(2) * kActionScale;
  out.a_ped = d_in.bottomRows(2) * kActionScale;
  return out;
}

CriticPass critic_forward(const CriticParams& p, const Seq& obs, const MatrixXd& a_veh, const MatrixXd& a_ped) {
  CriticPass c;
  c.encoder = encoder_forward(p.encoder, obs);
  c.head = critic_head_forward(p, c.encoder.pooled, a_veh, a_ped);
  c.output = c.head.output;
  c.retained = true;
  return c;
}

CriticInputGrads critic_backward(const CriticParams& p, const CriticPass& c, const MatrixXd& d_q, CriticParams& g) {
  require(c.retained);
  CriticInputGrads out = critic_head_backward(p, c.head, d_q, &g);
  encoder_backward(p.encoder, c.encoder, out.pooled, g.encoder);
  return out;
}

double importance_weight(double td_error, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("importance weight temperature must be positive");
  return std::exp(std::abs(td_error) / temperature);
}

// ---------------------------------------------------------------------------

HistoryWindow::HistoryWindow(int length) {
  if (length < 1) throw ConfigError("history window length must be positive");
  data_.assign(static_cast<std::size_t>(length), HistoryItem{});
}

void HistoryWindow::push(const Observation& obs, const Action& prev_action) {
  data_.erase(data_.begin());
  data_.push_back({obs, prev_action});
}

Seq pack(const std::vector<const HistoryWindow*>& windows) {
  if (windows.empty()) throw ConfigError("pack needs at least one window");
  const int L = windows.front()->length();
  const auto batch = static_cast<Eigen::Index>(windows.size());
  Seq out(L, MatrixXd(kTokenSize, batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& items = windows[static_cast<std::size_t>(b)]->items();
    if (static_cast<int>(items.size()) != L) throw ConfigError("history windows differ in length");
    for (int t = 0; t < L; ++t) {
      const HistoryItem& item = items[static_cast<std::size_t>(t)];
      const auto a = item.obs.to_array();
      for (int f = 0; f < Observation::kSize; ++f) out[t](f, b) = a[f];
      out[t](Observation::kSize, b) = item.prev_action.long_accel;
      out[t](Observation::kSize + 1, b) = item.prev_action.lat_accel;
    }
  }
  return out;
}

Seq pack(const HistoryWindow& window) { return pack(std::vector<const HistoryWindow*>{&window}); }

Action act(const ActorParams& p, const HistoryWindow& window) {
  const ActorPass a = actor_forward(p, pack(window));
  return {a.output(0, 0), a.output(1, 0)};
}

double evaluate_q(const CriticParams& p, const HistoryWindow& window, const Action& a_veh, const Action& a_ped) {
  MatrixXd av(2, 1);
  MatrixXd ap(2, 1);
  av << a_veh.long_accel, a_veh.lat_accel;
  ap << a_ped.long_accel, a_ped.lat_accel;
  return critic_forward(p, pack(window), av, ap).output(0, 0);
}

}  // namespace evasim::nn
