#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evasim/conflict.hpp"
#include "evasim/episode.hpp"
#include "evasim/kv.hpp"
#include "evasim/world.hpp"

namespace evasim::metrics {

struct StatsConfig {
  double margin = 0.5;  // equivalence margin
  double alpha = 0.05;
  double ks_tolerance = 1e-12;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
};

// --- trajectory error ------------------------------------------------------

double rmse(std::span<const double> predicted, std::span<const double> observed);

struct DisplacementErrors {
  double ade = 0.0;
  double fde = 0.0;
};

using Trajectory = std::vector<Vec2>;

DisplacementErrors displacement_errors(std::span<const Trajectory> predicted, std::span<const Trajectory> observed);

// RMSE per indicator, in this order: own long/lat speed of vehicle, own
// long/lat speed of pedestrian, vehicle->pedestrian long/lat distance,
// pedestrian->vehicle long/lat distance.
inline constexpr std::array<const char*, 8> kIndicatorNames = {
    "v_veh_long", "v_veh_lat", "v_ped_long", "v_ped_lat", "d_vp_long", "d_vp_lat", "d_pv_long", "d_pv_lat"};

struct ErrorReport {
  std::array<double, 8> rmse{};
  double ade = 0.0;
  double fde = 0.0;
};

// --- binned surfaces -------------------------------------------------------

struct Axis {
  double lo = 0.0;
  double hi = 4.0;
  int bins = 8;

  int bin_of(double v) const;  // clamps out-of-range values into the edge bins
  double edge(int i) const { return lo + (hi - lo) * i / bins; }
};

// Row index follows `rows`, column index follows `cols`. Empty bins hold no
// value (std::nullopt), distinct from a zero rate.
struct Grid {
  Axis rows;
  Axis cols;
  std::vector<int> counts;
  std::vector<std::optional<double>> values;

  int count(int r, int c) const { return counts[static_cast<std::size_t>(r * cols.bins + c)]; }
  std::optional<double> value(int r, int c) const { return values[static_cast<std::size_t>(r * cols.bins + c)]; }
  int total() const;
  std::string to_csv(const std::string& row_name, const std::string& col_name) const;
};

// Percentage of conflicts per (vehicle onset speed, pedestrian onset speed)
// bin. Episodes without onset are skipped.
Grid conflict_rate_grid(std::span<const EpisodeLabels> episodes, Axis veh_speed = {}, Axis ped_speed = {});

enum class SurfaceKind { DistanceSpeed, DistanceAccel };

// Yielding fraction of `yielding` over (onset distance, onset speed or
// acceleration of `kinematics_of`).
Grid yielding_surface(std::span<const EpisodeLabels> episodes, SurfaceKind kind, AgentKind yielding,
                      AgentKind kinematics_of, Axis distance = {0.0, 20.0, 10}, std::optional<Axis> second = {});

// Marginal rate along one axis of a grid (count-weighted), nullopt for
// empty rows/columns.
std::vector<std::optional<double>> marginal_rates(const Grid& grid, bool along_rows);

double spearman(std::span<const double> x, std::span<const double> y);

// --- distribution comparison -----------------------------------------------

struct KsResult {
  double d = 0.0;
  double p = 1.0;
};

// Series terms below `tolerance` end the summation.
KsResult ks_two_sample(std::span<const double> a, std::span<const double> b, double tolerance = 1e-12);
double kolmogorov_q(double lambda, double tolerance = 1e-12);  // survival function of the Kolmogorov distribution
double wasserstein1(std::span<const double> a, std::span<const double> b);

struct Quartiles {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};
Quartiles quartiles(std::span<const double> sample);

// --- group comparison ------------------------------------------------------

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
  double mean_diff = 0.0;
  double se = 0.0;
  std::array<double, 2> ci95{};
};

WelchResult welch_t(std::span<const double> a, std::span<const double> b);
double cohens_d(std::span<const double> a, std::span<const double> b);

struct TostResult {
  double t_lower = 0.0;  // against H0: diff <= -margin
  double t_upper = 0.0;  // against H0: diff >= +margin
  double p_lower = 1.0;
  double p_upper = 1.0;
  bool equivalent = false;
};

TostResult tost(std::span<const double> a, std::span<const double> b, double margin, double alpha = 0.05);

struct IccResult {
  double icc = 0.0;
  std::array<double, 2> ci{};
  bool degenerate = false;
  double ms_rows = 0.0;
  double ms_cols = 0.0;
  double ms_error = 0.0;
};

// ICC(2,k): two-way random effects, absolute agreement, mean of k raters.
// `ratings` is subjects x raters.
IccResult icc_2k(const Eigen::MatrixXd& ratings, double alpha = 0.05);

}  // namespace evasim::metrics
