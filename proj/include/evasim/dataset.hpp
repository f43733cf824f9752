#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "evasim/conflict.hpp"
#include "evasim/episode.hpp"
#include "evasim/kv.hpp"

namespace evasim {

inline constexpr const char* kDatasetHeader =
    "count,frame,veh_id,veh_x,veh_y,veh_vx,veh_vy,ped_id,ped_x,ped_y,ped_vx,ped_vy,distance,curv_ttc";

struct FilterParams {
  int max_missing_run = 10;  // a run of this many missing frames rejects
  int min_frames = 100;
  double min_vehicle_motion_m = 10.0;  // net displacement must exceed
  double min_pedestrian_motion_m = 4.0;

  void validate() const;
  void bind(kv::Binder& binder, const std::string& prefix);
};

enum class FilterReason { Kept, NoSafetyCritical, MissingValues, TooShort, VehicleMotion, PedestrianMotion };

inline constexpr std::array<FilterReason, 5> kRejectReasons = {
    FilterReason::NoSafetyCritical, FilterReason::MissingValues, FilterReason::TooShort,
    FilterReason::VehicleMotion, FilterReason::PedestrianMotion};

std::string to_string(FilterReason r);

// Conditions in order; the first failing one is reported.
FilterReason filter_episode(const EpisodeRecord& episode, const EpisodeLabels& labels, const FilterParams& params);

// Longest run of frames with a missing (NaN) position or velocity component.
int longest_missing_run(const EpisodeRecord& episode);

struct FilterReport {
  std::uint64_t raw = 0;
  std::uint64_t kept = 0;
  std::map<FilterReason, std::uint64_t> rejected;

  void add(FilterReason r);
  std::uint64_t rejected_total() const;
  void merge(const FilterReport& other);
  kv::Document to_document(const std::string& prefix = "") const;
};

// Table-row serialization. Non-finite values are written as empty fields.
std::string format_field(double v);

// Writes `<dir>/<tag file name>` plus a `.labels.csv` sidecar. Files are
// written to a temporary name first and removed if anything fails.
void write_scenario_file(const std::filesystem::path& dir, const ScenarioTag& tag,
                         const std::vector<EpisodeRecord>& episodes, const std::vector<EpisodeLabels>& labels);

// Reads a dataset file (and its sidecar when present). Infinite CurvTTC is
// read back from empty fields; empty position/velocity fields become NaN.
std::vector<EpisodeRecord> read_scenario_file(const std::filesystem::path& path);

// Parses a scenario tag from a dataset file name.
ScenarioTag tag_from_path(const std::filesystem::path& path);

}  // namespace evasim
