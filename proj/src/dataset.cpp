#include "evasim/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "evasim/error.hpp"

namespace evasim {

void FilterParams::validate() const {
  if (max_missing_run < 1 || min_frames < 1) throw ConfigError("filter frame counts must be positive");
  if (!(min_vehicle_motion_m >= 0) || !(min_pedestrian_motion_m >= 0)) {
    throw ConfigError("filter motion thresholds must be non-negative");
  }
}

void FilterParams::bind(kv::Binder& b, const std::string& p) {
  b.bind(p + "max_missing_run", max_missing_run);
  b.bind(p + "min_frames", min_frames);
  b.bind(p + "min_vehicle_motion_m", min_vehicle_motion_m);
  b.bind(p + "min_pedestrian_motion_m", min_pedestrian_motion_m);
}

std::string to_string(FilterReason r) {
  switch (r) {
    case FilterReason::Kept:
      return "kept";
    case FilterReason::NoSafetyCritical:
      return "no_safety_critical";
    case FilterReason::MissingValues:
      return "missing_values";
    case FilterReason::TooShort:
      return "too_short";
    case FilterReason::VehicleMotion:
      return "insufficient_vehicle_motion";
    case FilterReason::PedestrianMotion:
      return "insufficient_pedestrian_motion";
  }
  return "kept";
}

namespace {

bool finite2(const Vec2& v) { return std::isfinite(v.x()) && std::isfinite(v.y()); }

bool frame_missing(const Frame& f) {
  return !finite2(f.veh_pos) || !finite2(f.veh_vel) || !finite2(f.ped_pos) || !finite2(f.ped_vel);
}

// Net displacement between the first and last frames where the position is known.
double net_displacement(const std::vector<Frame>& frames, bool vehicle) {
  const auto pos = [vehicle](const Frame& f) { return vehicle ? f.veh_pos : f.ped_pos; };
  auto first = frames.begin();
  while (first != frames.end() && !finite2(pos(*first))) ++first;
  auto last = frames.rbegin();
  while (last != frames.rend() && !finite2(pos(*last))) ++last;
  if (first == frames.end()) return 0.0;
  return (pos(*last) - pos(*first)).norm();
}

}  // namespace

int longest_missing_run(const EpisodeRecord& e) {
  int best = 0;
  int run = 0;
  for (const auto& f : e.frames) {
    run = frame_missing(f) ? run + 1 : 0;
    best = std::max(best, run);
  }
  return best;
}

FilterReason filter_episode(const EpisodeRecord& e, const EpisodeLabels& labels, const FilterParams& p) {
  if (!labels.onset_frame) return FilterReason::NoSafetyCritical;
  if (longest_missing_run(e) >= p.max_missing_run) return FilterReason::MissingValues;
  if (static_cast<int>(e.frames.size()) < p.min_frames) return FilterReason::TooShort;
  if (!(net_displacement(e.frames, true) > p.min_vehicle_motion_m)) return FilterReason::VehicleMotion;
  if (!(net_displacement(e.frames, false) > p.min_pedestrian_motion_m)) return FilterReason::PedestrianMotion;
  return FilterReason::Kept;
}

void FilterReport::add(FilterReason r) {
  ++raw;
  if (r == FilterReason::Kept) {
    ++kept;
  } else {
    ++rejected[r];
  }
}

std::uint64_t FilterReport::rejected_total() const {
  std::uint64_t n = 0;
  for (const auto& [r, c] : rejected) n += c;
  return n;
}

void FilterReport::merge(const FilterReport& o) {
  raw += o.raw;
  kept += o.kept;
  for (const auto& [r, c] : o.rejected) rejected[r] += c;
}

kv::Document FilterReport::to_document(const std::string& prefix) const {
  kv::Document d;
  d[prefix + "raw"] = std::to_string(raw);
  d[prefix + "kept"] = std::to_string(kept);
  for (FilterReason r : kRejectReasons) {
    const auto it = rejected.find(r);
    d[prefix + "rejected." + to_string(r)] = std::to_string(it == rejected.end() ? 0 : it->second);
  }
  return d;
}

std::string format_field(double v) { return std::isfinite(v) ? kv::format_double(v) : std::string(); }

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path) : path_(std::move(path)), tmp_(path_) {
    tmp_ += ".tmp";
    out_.open(tmp_, std::ios::trunc);
    if (!out_) throw InputError("cannot open " + tmp_.string() + " for writing");
  }
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }
  std::ofstream& stream() { return out_; }
  void commit() {
    out_.flush();
    if (!out_) throw InputError("write failed for " + path_.string());
    out_.close();
    std::filesystem::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

std::filesystem::path sidecar_path(const std::filesystem::path& data) {
  auto p = data;
  p.replace_extension(".labels.csv");
  return p;
}

constexpr const char* kLabelsHeader =
    "count,seed,termination,onset_frame,min_curv_ttc,is_conflict,veh_yielded,ped_yielded";

double read_value(const std::string& field, double blank, const std::string& where) {
  if (field.empty()) return blank;
  try {
    return kv::parse_double(field);
  } catch (const ConfigError&) {
    throw InputError(where + ": not a number '" + field + "'");
  }
}

int read_int(const std::string& field, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw InputError(where + ": not an integer '" + field + "'");
  }
}

}  // namespace

void write_scenario_file(const std::filesystem::path& dir, const ScenarioTag& tag,
                         const std::vector<EpisodeRecord>& episodes, const std::vector<EpisodeLabels>& labels) {
  if (labels.size() != episodes.size()) throw UsageError("labels and episodes differ in number");
  std::filesystem::create_directories(dir);
  const auto path = dir / tag.file_name();
  AtomicFile data(path);
  AtomicFile side(sidecar_path(path));
  auto& out = data.stream();
  out << kDatasetHeader << '\n';
  auto& lab = side.stream();
  lab << kLabelsHeader << '\n';
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    for (const auto& f : e.frames) {
      out << e.count << ',' << f.frame << ',' << e.veh_id << ',' << format_field(f.veh_pos.x()) << ','
          << format_field(f.veh_pos.y()) << ',' << format_field(f.veh_vel.x()) << ',' << format_field(f.veh_vel.y())
          << ',' << e.ped_id << ',' << format_field(f.ped_pos.x()) << ',' << format_field(f.ped_pos.y()) << ','
          << format_field(f.ped_vel.x()) << ',' << format_field(f.ped_vel.y()) << ',' << format_field(f.distance)
          << ',' << format_field(f.curv_ttc) << '\n';
    }
    const auto& l = labels[i];
    lab << e.count << ',' << e.seed << ',' << to_string(e.termination) << ','
        << (l.onset_frame ? std::to_string(*l.onset_frame) : std::string()) << ',' << format_field(l.min_curvttc_s)
        << ',' << int(l.is_conflict) << ',' << int(l.veh_yielded) << ',' << int(l.ped_yielded) << '\n';
  }
  data.commit();
  side.commit();
}

ScenarioTag tag_from_path(const std::filesystem::path& path) { return ScenarioTag::parse(path.stem().string()); }

std::vector<EpisodeRecord> read_scenario_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset file " + path.string());
  ScenarioTag tag;
  try {
    tag = tag_from_path(path);
  } catch (const ConfigError&) {
    // Files with non-standard names keep the default tag.
  }
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kDatasetHeader) throw InputError(path.string() + ": unexpected header");

  std::vector<EpisodeRecord> episodes;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (f.size() != 14) throw InputError(where + ": expected 14 fields, found " + std::to_string(f.size()));
    const int count = read_int(f[0], where);
    if (episodes.empty() || episodes.back().count != count) {
      EpisodeRecord e;
      e.count = count;
      e.veh_id = read_int(f[2], where);
      e.ped_id = read_int(f[7], where);
      e.tag = tag;
      episodes.push_back(std::move(e));
    }
    auto& e = episodes.back();
    Frame fr;
    fr.frame = read_int(f[1], where);
    if (fr.frame != static_cast<int>(e.frames.size())) throw InputError(where + ": frames must be contiguous from 0");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    fr.veh_pos = {read_value(f[3], nan, where), read_value(f[4], nan, where)};
    fr.veh_vel = {read_value(f[5], nan, where), read_value(f[6], nan, where)};
    fr.ped_pos = {read_value(f[8], nan, where), read_value(f[9], nan, where)};
    fr.ped_vel = {read_value(f[10], nan, where), read_value(f[11], nan, where)};
    fr.distance = read_value(f[12], nan, where);
    fr.curv_ttc = read_value(f[13], std::numeric_limits<double>::infinity(), where);
    e.frames.push_back(fr);
  }

  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream ls(side);
    std::getline(ls, line);
    std::size_t i = 0;
    int ln = 1;
    while (std::getline(ls, line)) {
      ++ln;
      if (line.empty()) continue;
      const auto f = split(line);
      const std::string where = side.filename().string() + ":" + std::to_string(ln);
      if (f.size() != 8 || i >= episodes.size()) throw InputError(where + ": malformed labels row");
      if (read_int(f[0], where) != episodes[i].count) throw InputError(where + ": labels out of step with data");
      episodes[i].seed = std::stoull(f[1]);
      episodes[i].termination = termination_from_string(f[2]);
      ++i;
    }
  }
  return episodes;
}

}  // namespace evasim
