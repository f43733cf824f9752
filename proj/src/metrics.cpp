#include "evasim/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "evasim/error.hpp"
#include "evasim/kv.hpp"

namespace evasim::metrics {

namespace {

std::vector<double> sorted_copy(std::span<const double> s) {
  std::vector<double> v(s.begin(), s.end());
  std::sort(v.begin(), v.end());
  return v;
}

struct Moments {
  double n = 0.0;
  double mean = 0.0;
  double var = 0.0;  // unbiased
};

Moments moments(std::span<const double> s) {
  Moments m;
  m.n = static_cast<double>(s.size());
  m.mean = std::accumulate(s.begin(), s.end(), 0.0) / m.n;
  double ss = 0.0;
  for (double x : s) ss += (x - m.mean) * (x - m.mean);
  m.var = ss / (m.n - 1.0);
  return m;
}

void require_two_groups(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("each group needs at least two observations");
}

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double rmse(std::span<const double> predicted, std::span<const double> observed) {
  if (predicted.size() != observed.size()) throw InputError("rmse: length mismatch");
  if (predicted.empty()) throw InputError("rmse: empty input");
  double ss = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - observed[i];
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(predicted.size()));
}

DisplacementErrors displacement_errors(std::span<const Trajectory> predicted, std::span<const Trajectory> observed) {
  if (predicted.size() != observed.size() || predicted.empty()) {
    throw InputError("displacement errors: trajectory count mismatch");
  }
  double sum = 0.0;
  double final_sum = 0.0;
  std::size_t points = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].size() != observed[i].size() || predicted[i].empty()) {
      throw InputError("displacement errors: horizon mismatch in trajectory " + std::to_string(i));
    }
    for (std::size_t t = 0; t < predicted[i].size(); ++t) sum += (predicted[i][t] - observed[i][t]).norm();
    points += predicted[i].size();
    final_sum += (predicted[i].back() - observed[i].back()).norm();
  }
  return {sum / static_cast<double>(points), final_sum / static_cast<double>(predicted.size())};
}

// ---------------------------------------------------------------------------

int Axis::bin_of(double v) const {
  const int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
  return std::clamp(b, 0, bins - 1);
}

int Grid::total() const { return std::accumulate(counts.begin(), counts.end(), 0); }

std::string Grid::to_csv(const std::string& row_name, const std::string& col_name) const {
  std::ostringstream out;
  out << row_name << "_lo," << row_name << "_hi," << col_name << "_lo," << col_name << "_hi,count,value\n";
  for (int r = 0; r < rows.bins; ++r) {
    for (int c = 0; c < cols.bins; ++c) {
      out << kv::format_double(rows.edge(r)) << ',' << kv::format_double(rows.edge(r + 1)) << ','
          << kv::format_double(cols.edge(c)) << ',' << kv::format_double(cols.edge(c + 1)) << ',' << count(r, c)
          << ',';
      if (const auto v = value(r, c)) out << kv::format_double(*v);
      out << '\n';
    }
  }
  return out.str();
}

namespace {

Grid make_grid(Axis rows, Axis cols) {
  Grid g{rows, cols, {}, {}};
  const auto cells = static_cast<std::size_t>(rows.bins * cols.bins);
  g.counts.assign(cells, 0);
  g.values.assign(cells, std::nullopt);
  return g;
}

void finish_rates(Grid& g, const std::vector<double>& hits, double scale) {
  for (std::size_t i = 0; i < g.counts.size(); ++i) {
    if (g.counts[i] > 0) g.values[i] = scale * hits[i] / g.counts[i];
  }
}

}  // namespace

Grid conflict_rate_grid(std::span<const EpisodeLabels> episodes, Axis veh_speed, Axis ped_speed) {
  Grid g = make_grid(veh_speed, ped_speed);
  std::vector<double> hits(g.counts.size(), 0.0);
  for (const auto& e : episodes) {
    if (!e.onset_frame) continue;
    const auto cell = static_cast<std::size_t>(veh_speed.bin_of(e.onset.veh_speed) * ped_speed.bins +
                                               ped_speed.bin_of(e.onset.ped_speed));
    ++g.counts[cell];
    if (e.is_conflict) hits[cell] += 1.0;
  }
  finish_rates(g, hits, 100.0);
  return g;
}

Grid yielding_surface(std::span<const EpisodeLabels> episodes, SurfaceKind kind, AgentKind yielding,
                      AgentKind kinematics_of, Axis distance, std::optional<Axis> second) {
  const Axis other = second ? *second
                            : (kind == SurfaceKind::DistanceSpeed ? Axis{0.0, 4.0, 8} : Axis{-4.0, 4.0, 8});
  Grid g = make_grid(distance, other);
  std::vector<double> hits(g.counts.size(), 0.0);
  for (const auto& e : episodes) {
    if (!e.onset_frame) continue;
    const bool veh = kinematics_of == AgentKind::Vehicle;
    const double v = kind == SurfaceKind::DistanceSpeed ? (veh ? e.onset.veh_speed : e.onset.ped_speed)
                                                        : (veh ? e.onset.veh_accel : e.onset.ped_accel);
    const auto cell = static_cast<std::size_t>(distance.bin_of(e.onset.distance) * other.bins + other.bin_of(v));
    ++g.counts[cell];
    const bool y = yielding == AgentKind::Vehicle ? e.veh_yielded : e.ped_yielded;
    if (y) hits[cell] += 1.0;
  }
  finish_rates(g, hits, 1.0);
  return g;
}

std::vector<std::optional<double>> marginal_rates(const Grid& grid, bool along_rows) {
  const int outer = along_rows ? grid.rows.bins : grid.cols.bins;
  const int inner = along_rows ? grid.cols.bins : grid.rows.bins;
  std::vector<std::optional<double>> out(static_cast<std::size_t>(outer));
  for (int i = 0; i < outer; ++i) {
    double n = 0.0;
    double hits = 0.0;
    for (int j = 0; j < inner; ++j) {
      const int r = along_rows ? i : j;
      const int c = along_rows ? j : i;
      const int cnt = grid.count(r, c);
      if (cnt == 0) continue;
      n += cnt;
      hits += cnt * *grid.value(r, c);
    }
    if (n > 0) out[static_cast<std::size_t>(i)] = hits / n;
  }
  return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("spearman: need two equal-length samples");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const Moments mx = moments(rx);
  const Moments my = moments(ry);
  double cov = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) cov += (rx[i] - mx.mean) * (ry[i] - my.mean);
  cov /= (mx.n - 1.0);
  const double denom = std::sqrt(mx.var * my.var);
  if (denom == 0.0) return 0.0;
  return cov / denom;
}

// ---------------------------------------------------------------------------

void StatsConfig::validate() const {
  if (!(margin > 0.0)) throw ConfigError("equivalence margin must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("significance level must lie in (0, 1)");
  if (!(ks_tolerance > 0.0)) throw ConfigError("ks_tolerance must be positive");
}

void StatsConfig::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "margin", margin);
  b.bind(p + "alpha", alpha);
  b.bind(p + "ks_tolerance", ks_tolerance);
}

double kolmogorov_q(double lambda, double tolerance) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Complementary (Jacobi theta) form converges quickly for small lambda.
    const double k = std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double sum = 0.0;
    for (int j = 1; j < 100; ++j) {
      const double term = std::exp(-(2.0 * j - 1.0) * (2.0 * j - 1.0) * k);
      sum += term;
      if (term < tolerance) break;
    }
    return std::clamp(1.0 - std::sqrt(2.0 * std::numbers::pi) / lambda * sum, 0.0, 1.0);
  }
  double sum = 0.0;
  double sign = 1.0;
  for (int j = 1; j < 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += sign * term;
    sign = -sign;
    if (term < tolerance) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b, double tolerance) {
  if (a.empty() || b.empty()) throw InputError("ks test: empty sample");
  const auto x = sorted_copy(a);
  const auto y = sorted_copy(b);
  const double n = static_cast<double>(x.size());
  const double m = static_cast<double>(y.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
  }
  const double ne = n * m / (n + m);
  const double sq = std::sqrt(ne);
  return {d, kolmogorov_q((sq + 0.12 + 0.11 / sq) * d, tolerance)};
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InputError("wasserstein: empty sample");
  const auto x = sorted_copy(a);
  const auto y = sorted_copy(b);
  std::vector<double> all;
  all.reserve(x.size() + y.size());
  std::merge(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(all));
  const double n = static_cast<double>(x.size());
  const double m = static_cast<double>(y.size());
  double w = 0.0;
  std::size_t i = 0;
  std::size_t j = 0;
  for (std::size_t k = 0; k + 1 < all.size(); ++k) {
    while (i < x.size() && x[i] <= all[k]) ++i;
    while (j < y.size() && y[j] <= all[k]) ++j;
    w += std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m) * (all[k + 1] - all[k]);
  }
  return w;
}

Quartiles quartiles(std::span<const double> sample) {
  if (sample.empty()) throw InputError("quartiles: empty sample");
  const auto v = sorted_copy(sample);
  const auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {q(0.25), q(0.5), q(0.75)};
}

// ---------------------------------------------------------------------------

WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  require_two_groups(a, b);
  const Moments ma = moments(a);
  const Moments mb = moments(b);
  const double va = ma.var / ma.n;
  const double vb = mb.var / mb.n;
  if (!(va + vb > 0.0)) throw InputError("welch t-test: both groups have zero variance");
  WelchResult r;
  r.mean_diff = ma.mean - mb.mean;
  r.se = std::sqrt(va + vb);
  r.t = r.mean_diff / r.se;
  r.df = (va + vb) * (va + vb) / (va * va / (ma.n - 1.0) + vb * vb / (mb.n - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  r.ci95 = {r.mean_diff - q * r.se, r.mean_diff + q * r.se};
  return r;
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
  require_two_groups(a, b);
  const Moments ma = moments(a);
  const Moments mb = moments(b);
  const double pooled = std::sqrt(((ma.n - 1.0) * ma.var + (mb.n - 1.0) * mb.var) / (ma.n + mb.n - 2.0));
  if (!(pooled > 0.0)) throw InputError("cohen's d: zero pooled standard deviation");
  return (ma.mean - mb.mean) / pooled;
}

TostResult tost(std::span<const double> a, std::span<const double> b, double margin, double alpha) {
  if (!(margin > 0.0)) throw ConfigError("tost: equivalence margin must be positive");
  const WelchResult w = welch_t(a, b);
  const boost::math::students_t dist(w.df);
  TostResult r;
  r.t_lower = (w.mean_diff + margin) / w.se;
  r.t_upper = (w.mean_diff - margin) / w.se;
  r.p_lower = boost::math::cdf(boost::math::complement(dist, r.t_lower));
  r.p_upper = boost::math::cdf(dist, r.t_upper);
  r.equivalent = r.p_lower < alpha && r.p_upper < alpha;
  return r;
}

IccResult icc_2k(const Eigen::MatrixXd& x, double alpha) {
  const auto n = static_cast<double>(x.rows());
  const auto k = static_cast<double>(x.cols());
  if (x.rows() < 2 || x.cols() < 2) throw InputError("icc: need at least two subjects and two raters");
  if (!x.allFinite()) throw InputError("icc: ratings matrix must be complete");

  const double grand = x.mean();
  const Eigen::VectorXd row_means = x.rowwise().mean();
  const Eigen::RowVectorXd col_means = x.colwise().mean();
  const double ss_rows = k * (row_means.array() - grand).square().sum();
  const double ss_cols = n * (col_means.array() - grand).square().sum();
  const double ss_total = (x.array() - grand).square().sum();
  const double ss_err = std::max(ss_total - ss_rows - ss_cols, 0.0);

  IccResult r;
  r.ms_rows = ss_rows / (n - 1.0);
  r.ms_cols = ss_cols / (k - 1.0);
  r.ms_error = ss_err / ((n - 1.0) * (k - 1.0));
  const double msr = r.ms_rows;
  const double msc = r.ms_cols;
  const double mse = r.ms_error;

  const double denom = msr + (msc - mse) / n;
  if (!(msr > 0.0) || !(denom > 0.0)) {
    r.degenerate = true;
    r.icc = std::numeric_limits<double>::quiet_NaN();
    r.ci = {r.icc, r.icc};
    return r;
  }
  r.icc = (msr - mse) / denom;
  if (mse == 0.0) {
    r.ci = {r.icc, r.icc};
    return r;
  }

  // F-based bounds for the single-rater coefficient, Spearman-Brown stepped
  // up to k raters.
  const double icc1 = (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n);
  const double fc = msc / mse;
  const double a = n * (1.0 + (k - 1.0) * icc1) - k * icc1;
  const double vn = (k - 1.0) * (n - 1.0) * std::pow(k * icc1 * fc + a, 2);
  const double vd = (n - 1.0) * k * k * icc1 * icc1 * fc * fc + a * a;
  const double v = vn / vd;
  const double f_upper = boost::math::quantile(boost::math::fisher_f(n - 1.0, v), 1.0 - alpha / 2.0);
  const double f_lower = boost::math::quantile(boost::math::fisher_f(v, n - 1.0), 1.0 - alpha / 2.0);
  const double base = k * msc + (k * n - k - n) * mse;
  const double l1 = n * (msr - f_upper * mse) / (f_upper * base + n * msr);
  const double u1 = n * (f_lower * msr - mse) / (base + n * f_lower * msr);
  const auto step_up = [k](double c) { return c * k / (1.0 + c * (k - 1.0)); };
  r.ci = {step_up(l1), step_up(u1)};
  return r;
}

}  // namespace evasim::metrics
