#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "evasim/error.hpp"
#include "evasim/metrics.hpp"
#include "evasim/pipeline.hpp"

namespace evasim::cli {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 1;
};

class Aborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig() : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const Common& c, RunConfig& cfg) {
  const fs::path out = c.out;
  fs::create_directories(out);
  kv::write_file(out / "config.txt", cfg.to_document());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

std::string fmt(double v) { return kv::format_double(v); }

// --- subcommands ---------------------------------------------------------------

void synth_corpus(const Common& c) {
  RunConfig cfg = resolve(c);
  const fs::path out = prepare_out(c, cfg);
  SynthOptions opt;
  opt.interactions = cfg.corpus_interactions;
  for (int n : cfg.corpus_tags) opt.tags.push_back(ScenarioTag::from_number(n));
  const auto corpus = synth_expert_corpus(cfg, opt, cfg.seed);
  write_corpus(out / "corpus.csv", corpus);
  std::size_t rows = 0;
  for (const auto& i : corpus) rows += i.rows.size();
  std::cout << "interactions " << corpus.size() << "\nrows " << rows << "\n";
}

void print_practical(const PracticalData& p) {
  std::cout << "interactions " << p.episodes.size() << "\ntransitions " << p.transitions << "\nrejected "
            << p.rejected.size() << "\n";
  for (const auto& r : p.rejected) {
    std::cout << "  rejected interaction " << r.id << " at lines";
    for (int l : r.lines) std::cout << ' ' << l;
    std::cout << "\n";
  }
}

void pretrain(const Common& c, const std::string& corpus_path) {
  RunConfig cfg = resolve(c);
  PracticalData practical = ingest_corpus(corpus_path, cfg);
  const fs::path out = prepare_out(c, cfg);
  print_practical(practical);
  const StageResult r = stage1_pretrain(practical, cfg);
  write_telemetry(out / "telemetry_stage1.csv", r.telemetry);
  rl::save_checkpoint(out / "stage1.ckpt", r.checkpoint);
  const auto [first, last] = loss_endpoints(r.telemetry);
  kv::Document s;
  s["iterations"] = std::to_string(r.telemetry.size());
  s["critic_loss.initial"] = fmt(first);
  s["critic_loss.final"] = fmt(last);
  s["critic_loss.ratio"] = fmt(first > 0 ? last / first : 0.0);
  s["diverged"] = r.diverged ? "true" : "false";
  if (r.diverged) s["diagnostic"] = r.diagnostic;
  kv::write_file(out / "summary.txt", s);
  std::cout << kv::serialize(s);
  if (r.diverged) throw NumericalError(r.diagnostic);
}

void refine(const Common& c, const std::string& checkpoint, const std::string& corpus_path) {
  RunConfig cfg = resolve(c);
  const rl::Checkpoint start = rl::load_checkpoint(checkpoint);
  PracticalData practical = ingest_corpus(corpus_path, cfg);
  const fs::path out = prepare_out(c, cfg);
  const StageResult r = stage2_online(start, practical, cfg);
  write_telemetry(out / "telemetry_stage2.csv", r.telemetry);
  rl::save_checkpoint(out / "stage2.ckpt", r.checkpoint);
  const EvaluationResult before = evaluate_collisions(start, cfg);
  const EvaluationResult after = evaluate_collisions(r.checkpoint, cfg);
  kv::Document s;
  s["episodes"] = std::to_string(r.telemetry.size());
  s["evaluation.episodes"] = std::to_string(after.episodes);
  s["evaluation.collisions.unrefined"] = std::to_string(before.collisions);
  s["evaluation.collisions.refined"] = std::to_string(after.collisions);
  s["evaluation.collision_rate.unrefined"] = fmt(before.collision_rate());
  s["evaluation.collision_rate.refined"] = fmt(after.collision_rate());
  s["weights.w1"] = fmt(r.checkpoint.weights.w1);
  s["weights.w2"] = fmt(r.checkpoint.weights.w2);
  s["weights.w3"] = fmt(r.checkpoint.weights.w3);
  s["diverged"] = r.diverged ? "true" : "false";
  if (r.diverged) s["diagnostic"] = r.diagnostic;
  kv::write_file(out / "summary.txt", s);
  std::cout << kv::serialize(s);
  if (r.diverged) throw NumericalError(r.diagnostic);
}

void write_trend(const fs::path& out, const std::vector<EpisodeLabels>& labels) {
  const TrendReport t = onset_speed_trend(labels);
  write_text(out / "conflict_rate_grid.csv", t.grid.to_csv("veh_speed", "ped_speed"));
  kv::Document d;
  d["episodes_with_onset"] = std::to_string(t.grid.total());
  d["spearman.vehicle_speed"] = fmt(t.rho_vehicle);
  d["spearman.pedestrian_speed"] = fmt(t.rho_pedestrian);
  d["bins.vehicle_speed"] = std::to_string(t.bins_vehicle);
  d["bins.pedestrian_speed"] = std::to_string(t.bins_pedestrian);
  kv::write_file(out / "trend.txt", d);
  std::cout << kv::serialize(d);
}

void generate(const Common& c, const std::string& checkpoint) {
  RunConfig cfg = resolve(c);
  const rl::Checkpoint ck = rl::load_checkpoint(checkpoint);
  if (!(ck.agents.shape == cfg.training.shape)) {
    // The checkpoint decides the network; keep the frozen config consistent.
    cfg.training.shape = ck.agents.shape;
  }
  const fs::path out = prepare_out(c, cfg);
  const GenerationResult g = stage3_generate(ck, cfg, c.workers);
  write_generation(out, g, cfg, checkpoint);
  std::vector<EpisodeLabels> labels;
  for (const auto& s : g.scenarios) labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  std::cout << kv::serialize(g.total.to_document("total."));
  write_trend(out, labels);
  if (g.aborted) throw Aborted(g.diagnostic);
}

void filter(const Common& c, const std::vector<std::string>& inputs) {
  RunConfig cfg = resolve(c);
  const fs::path out = prepare_out(c, cfg);
  FilterReport total;
  kv::Document report;
  for (const auto& in : inputs) {
    const auto episodes = read_scenario_file(in);
    const ScenarioTag tag = tag_from_path(in);
    std::vector<EpisodeRecord> kept;
    std::vector<EpisodeLabels> kept_labels;
    FilterReport rep;
    for (const auto& e : episodes) {
      const auto labels = label_episode(e, cfg.conflict);
      const auto reason = filter_episode(e, labels, cfg.filter);
      rep.add(reason);
      if (reason != FilterReason::Kept) continue;
      EpisodeRecord k = e;
      const int count = static_cast<int>(kept.size());
      k.count = count;
      k.veh_id = 2 * count + 1;
      k.ped_id = 2 * count + 2;
      kept.push_back(std::move(k));
      kept_labels.push_back(labels);
    }
    write_scenario_file(out, tag, kept, kept_labels);
    for (const auto& [k, v] : rep.to_document(fs::path(in).stem().string() + ".")) report[k] = v;
    total.merge(rep);
  }
  for (const auto& [k, v] : total.to_document("total.")) report[k] = v;
  kv::write_file(out / "filter_report.txt", report);
  std::cout << kv::serialize(report);
}

void evaluate(const Common& c, const std::vector<std::string>& inputs, const std::string& checkpoint) {
  RunConfig cfg = resolve(c);
  const fs::path out = prepare_out(c, cfg);
  std::vector<EpisodeLabels> labels;
  std::ostringstream ttc;
  ttc << "file,count,min_curv_ttc,is_conflict,veh_yielded,ped_yielded,onset_veh_speed,onset_ped_speed,"
         "onset_distance\n";
  for (const auto& in : inputs) {
    for (const auto& e : read_scenario_file(in)) {
      const auto l = label_episode(e, cfg.conflict);
      labels.push_back(l);
      ttc << fs::path(in).filename().string() << ',' << e.count << ',' << format_field(l.min_curvttc_s) << ','
          << int(l.is_conflict) << ',' << int(l.veh_yielded) << ',' << int(l.ped_yielded) << ','
          << (l.onset_frame ? fmt(l.onset.veh_speed) : "") << ',' << (l.onset_frame ? fmt(l.onset.ped_speed) : "")
          << ',' << (l.onset_frame ? fmt(l.onset.distance) : "") << '\n';
    }
  }
  write_text(out / "episodes.csv", ttc.str());
  using metrics::SurfaceKind;
  const std::array<std::pair<AgentKind, const char*>, 2> agents{
      std::pair{AgentKind::Vehicle, "veh"}, std::pair{AgentKind::Pedestrian, "ped"}};
  for (const auto& [who, name] : agents) {
    const AgentKind other = who == AgentKind::Vehicle ? AgentKind::Pedestrian : AgentKind::Vehicle;
    write_text(out / (std::string("yielding_") + name + "_distance_speed.csv"),
               metrics::yielding_surface(labels, SurfaceKind::DistanceSpeed, who, other)
                   .to_csv("distance", "other_speed"));
    write_text(out / (std::string("yielding_") + name + "_distance_accel.csv"),
               metrics::yielding_surface(labels, SurfaceKind::DistanceAccel, who, other)
                   .to_csv("distance", "other_accel"));
  }
  write_trend(out, labels);
  if (!checkpoint.empty()) {
    const auto ck = rl::load_checkpoint(checkpoint);
    const auto r = evaluate_collisions(ck, cfg);
    kv::Document d;
    d["episodes"] = std::to_string(r.episodes);
    d["collisions"] = std::to_string(r.collisions);
    d["interventions"] = std::to_string(r.interventions);
    d["collision_rate"] = fmt(r.collision_rate());
    kv::write_file(out / "collision_evaluation.txt", d);
    std::cout << kv::serialize(d);
  }
}

std::vector<double> read_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<double> v;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    line.erase(std::remove_if(line.begin(), line.end(), [](char ch) { return std::isspace(static_cast<unsigned char>(ch)); }),
               line.end());
    if (line.empty()) continue;
    try {
      v.push_back(kv::parse_double(line));
    } catch (const ConfigError&) {
      if (n == 1) continue;  // header
      throw InputError(path + ":" + std::to_string(n) + ": not a number");
    }
  }
  if (v.empty()) throw InputError(path + ": no values");
  return v;
}

Eigen::MatrixXd read_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    bool header = false;
    while (std::getline(ss, cell, ',')) {
      try {
        r.push_back(kv::parse_double(cell));
      } catch (const ConfigError&) {
        if (n != 1) throw InputError(path + ":" + std::to_string(n) + ": not a number");
        header = true;
        break;
      }
    }
    if (header) continue;
    if (!rows.empty() && r.size() != rows.front().size()) throw InputError(path + ": ragged matrix");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw InputError(path + ": no values");
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

void stats(const Common& c, const std::string& test, const std::string& a_path, const std::string& b_path) {
  RunConfig cfg = resolve(c);
  const fs::path out = prepare_out(c, cfg);
  kv::Document d;
  d["test"] = test;
  if (test == "icc") {
    const auto r = metrics::icc_2k(read_matrix(a_path), cfg.stats.alpha);
    d["icc"] = fmt(r.icc);
    d["ci.lower"] = fmt(r.ci[0]);
    d["ci.upper"] = fmt(r.ci[1]);
    d["degenerate"] = r.degenerate ? "true" : "false";
    d["ms_rows"] = fmt(r.ms_rows);
    d["ms_cols"] = fmt(r.ms_cols);
    d["ms_error"] = fmt(r.ms_error);
  } else {
    if (b_path.empty()) throw UsageError("--b is required for test '" + test + "'");
    const auto a = read_column(a_path);
    const auto b = read_column(b_path);
    if (test == "ks") {
      const auto r = metrics::ks_two_sample(a, b, cfg.stats.ks_tolerance);
      d["D"] = fmt(r.d);
      d["p"] = fmt(r.p);
    } else if (test == "wasserstein") {
      d["W1"] = fmt(metrics::wasserstein1(a, b));
    } else if (test == "welch") {
      const auto r = metrics::welch_t(a, b);
      d["t"] = fmt(r.t);
      d["df"] = fmt(r.df);
      d["p"] = fmt(r.p);
      d["mean_diff"] = fmt(r.mean_diff);
      d["ci95.lower"] = fmt(r.ci95[0]);
      d["ci95.upper"] = fmt(r.ci95[1]);
      d["cohens_d"] = fmt(metrics::cohens_d(a, b));
    } else if (test == "tost") {
      const auto r = metrics::tost(a, b, cfg.stats.margin, cfg.stats.alpha);
      d["margin"] = fmt(cfg.stats.margin);
      d["t_lower"] = fmt(r.t_lower);
      d["t_upper"] = fmt(r.t_upper);
      d["p_lower"] = fmt(r.p_lower);
      d["p_upper"] = fmt(r.p_upper);
      d["equivalent"] = r.equivalent ? "true" : "false";
    } else {
      throw UsageError("unknown test '" + test + "'");
    }
  }
  kv::write_file(out / ("stats_" + test + ".txt"), d);
  std::cout << kv::serialize(d);
}

void compare(const Common& c, const std::vector<std::string>& a_files, const std::vector<std::string>& b_files) {
  RunConfig cfg = resolve(c);
  const fs::path out = prepare_out(c, cfg);
  // Per-frame CurvTTC (finite values) and per-episode onset speeds.
  struct Sample {
    std::vector<double> ttc, veh_speed, ped_speed;
  };
  const auto load = [&](const std::vector<std::string>& files) {
    Sample s;
    for (const auto& f : files) {
      for (const auto& e : read_scenario_file(f)) {
        for (const auto& fr : e.frames) {
          if (std::isfinite(fr.curv_ttc)) s.ttc.push_back(fr.curv_ttc);
        }
        const auto l = label_episode(e, cfg.conflict);
        if (l.onset_frame) {
          s.veh_speed.push_back(l.onset.veh_speed);
          s.ped_speed.push_back(l.onset.ped_speed);
        }
      }
    }
    return s;
  };
  const Sample a = load(a_files);
  const Sample b = load(b_files);
  kv::Document d;
  const auto add = [&](const std::string& name, const std::vector<double>& x, const std::vector<double>& y) {
    d[name + ".n_a"] = std::to_string(x.size());
    d[name + ".n_b"] = std::to_string(y.size());
    if (x.empty() || y.empty()) return;
    const auto ks = metrics::ks_two_sample(x, y, cfg.stats.ks_tolerance);
    d[name + ".ks.D"] = fmt(ks.d);
    d[name + ".ks.p"] = fmt(ks.p);
    d[name + ".wasserstein"] = fmt(metrics::wasserstein1(x, y));
    const auto qa = metrics::quartiles(x);
    const auto qb = metrics::quartiles(y);
    d[name + ".a.q1"] = fmt(qa.q1);
    d[name + ".a.median"] = fmt(qa.median);
    d[name + ".a.q3"] = fmt(qa.q3);
    d[name + ".b.q1"] = fmt(qb.q1);
    d[name + ".b.median"] = fmt(qb.median);
    d[name + ".b.q3"] = fmt(qb.q3);
  };
  add("curv_ttc", a.ttc, b.ttc);
  add("onset_veh_speed", a.veh_speed, b.veh_speed);
  add("onset_ped_speed", a.ped_speed, b.ped_speed);
  kv::write_file(out / "compare.txt", d);
  std::cout << kv::serialize(d);
}

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config, "Run configuration (key = value file)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Vehicle-pedestrian safety-critical scenario generator"};
  app.require_subcommand(1);
  Common c;
  std::string corpus;
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string test;
  std::string a_path;
  std::string b_path;
  std::vector<std::string> a_files;
  std::vector<std::string> b_files;

  auto* synth = app.add_subcommand("synth-corpus", "Synthesise an expert trajectory corpus");
  add_common(synth, c);

  auto* pre = app.add_subcommand("pretrain", "Stage 1: offline pre-training on a corpus");
  add_common(pre, c);
  pre->add_option("--corpus", corpus, "Corpus CSV")->required()->check(CLI::ExistingFile);

  auto* ref = app.add_subcommand("refine", "Stage 2: CurvTTC-gated online refinement");
  add_common(ref, c);
  ref->add_option("--checkpoint", checkpoint, "Stage 1 checkpoint")->required()->check(CLI::ExistingFile);
  ref->add_option("--corpus", corpus, "Corpus CSV for the practical buffer")->required()->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("generate", "Stage 3: generate, filter and write datasets");
  add_common(gen, c);
  gen->add_option("--checkpoint", checkpoint, "Refined checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);

  auto* fil = app.add_subcommand("filter", "Label and filter existing dataset files");
  add_common(fil, c);
  fil->add_option("--input", inputs, "Dataset CSV files")->required()->check(CLI::ExistingFile);

  auto* eva = app.add_subcommand("evaluate", "Conflict and yielding surfaces of dataset files");
  add_common(eva, c);
  eva->add_option("--input", inputs, "Dataset CSV files")->required()->check(CLI::ExistingFile);
  eva->add_option("--checkpoint", checkpoint, "Also evaluate this checkpoint's collision rate")
      ->check(CLI::ExistingFile);

  auto* sta = app.add_subcommand("stats", "Statistical test on column files");
  add_common(sta, c);
  sta->add_option("--test", test, "ks, wasserstein, welch, tost or icc")
      ->required()
      ->check(CLI::IsMember({"ks", "wasserstein", "welch", "tost", "icc"}));
  sta->add_option("--a", a_path, "First sample (one value per line) or ratings matrix for icc")
      ->required()
      ->check(CLI::ExistingFile);
  sta->add_option("--b", b_path, "Second sample")->check(CLI::ExistingFile);

  auto* cmp = app.add_subcommand("compare", "Compare two sets of dataset files");
  add_common(cmp, c);
  cmp->add_option("--a", a_files, "First dataset files")->required()->check(CLI::ExistingFile);
  cmp->add_option("--b", b_files, "Second dataset files")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (synth->parsed()) synth_corpus(c);
    if (pre->parsed()) pretrain(c, corpus);
    if (ref->parsed()) refine(c, checkpoint, corpus);
    if (gen->parsed()) generate(c, checkpoint);
    if (fil->parsed()) filter(c, inputs);
    if (eva->parsed()) evaluate(c, inputs, checkpoint);
    if (sta->parsed()) stats(c, test, a_path, b_path);
    if (cmp->parsed()) compare(c, a_files, b_files);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Aborted& e) {
    std::cerr << "generation aborted: " << e.what() << "\n";
    return kUnreachable;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace evasim::cli
