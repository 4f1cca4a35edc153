#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "advlab/checkpoint.hpp"
#include "advlab/config.hpp"
#include "advlab/gradcheck_suite.hpp"

namespace advlab {

namespace fs = std::filesystem;

enum class ExitCode : int { pass = 0, fail = 1, invalid_config = 2, numeric_abort = 3 };

enum class RunStatus { ok, failed, aborted };

inline const char* to_string(RunStatus s) {
  return s == RunStatus::ok ? "ok" : s == RunStatus::failed ? "failed" : "aborted";
}

inline ExitCode exit_code(RunStatus s) {
  return s == RunStatus::ok ? ExitCode::pass : s == RunStatus::failed ? ExitCode::fail : ExitCode::numeric_abort;
}

struct RunOutcome {
  RunStatus status = RunStatus::ok;
  bool exploratory = false;
  Metrics summary;
  std::string detail;  // abort reason or failure description
};

/// Shortest text that reads back to the same double.
inline std::string format_number(double v) { return ojson(v).dump(); }

// ---------------------------------------------------------------------------
// Run directory

/// One run's outputs: config.json, metrics.jsonl, summary.csv, checkpoint/.
class RunDirectory {
 public:
  explicit RunDirectory(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    metrics_.open(root_ / "metrics.jsonl", std::ios::trunc);
    if (!metrics_) throw Error("cannot write " + (root_ / "metrics.jsonl").string());
  }

  const fs::path& path() const { return root_; }

  void write_config(const RunConfig& cfg) const { write_text(root_ / "config.json", config_echo(cfg)); }

  /// Appends one row and flushes it, so an abort keeps everything before it.
  void append(const MetricRow& row) {
    ojson j;
    j["step"] = row.step;
    j["wall_ms"] = row.wall_ms;
    bool finite = true;
    for (const auto& [k, v] : row.metrics) {
      if (std::isfinite(v)) j[k] = v;
      else j[k] = nullptr, finite = false;
    }
    if (!finite) j["aborted"] = true;
    metrics_ << j.dump() << "\n" << std::flush;
    next_step_ = row.step + 1;
  }

  RowSink sink() {
    return [this](const MetricRow& r) { append(r); };
  }

  void append_abort(std::size_t step, const std::string& reason) {
    ojson j{{"step", step}, {"wall_ms", 0.0}, {"aborted", true}, {"reason", reason}};
    metrics_ << j.dump() << "\n" << std::flush;
  }

  /// The step after the last row written (0 before any).
  std::size_t next_step() const { return next_step_; }

  void checkpoint(const std::string& name, const ParamStore& store) const {
    fs::create_directories(root_ / "checkpoint");
    checkpoint_save(store, root_ / "checkpoint" / name);
  }

  /// Written once at the end: header row, then one value row.
  void write_summary(const RunConfig& cfg, const RunOutcome& out) const {
    std::string head = "status,kind,seed,exploratory", row;
    row = std::string(to_string(out.status)) + "," + to_string(cfg.kind) + "," + std::to_string(cfg.seed) + "," +
          (out.exploratory ? "1" : "0");
    for (const auto& [k, v] : out.summary) {
      head += "," + k;
      row += "," + format_number(v);
    }
    write_text(root_ / "summary.csv", head + "\n" + row + "\n");
  }

  static void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
  }

 private:
  fs::path root_;
  std::ofstream metrics_;
  std::size_t next_step_ = 0;
};

// ---------------------------------------------------------------------------
// Experiments

namespace detail {

// Batch-norm running statistics go next to the weights as <name>_buffers.
inline void checkpoint_network(const RunDirectory& dir, const std::string& name, const Mlp& net) {
  dir.checkpoint(name, net.params());
  if (!net.buffers().empty()) dir.checkpoint(name + "_buffers", net.buffers());
}

inline RunOutcome run_gan_kind(const RunConfig& cfg, RunDirectory& dir) {
  const GanConfig g = cfg.gan_run();
  GanRun run = g.replay ? gan_replay_experiment(g, cfg.seed, dir.sink()) : train_gan(g, cfg.seed, dir.sink());
  checkpoint_network(dir, "generator", run.model->generator());
  checkpoint_network(dir, "discriminator", run.model->discriminator());
  return {RunStatus::ok, run.record.exploratory, run.record.summary, {}};
}

inline RunOutcome run_ac_kind(const RunConfig& cfg, RunDirectory& dir) {
  AcRun run = train_ac(cfg.ac_run(), cfg.seed, dir.sink());
  dir.checkpoint("actor", run.actor->params());
  dir.checkpoint("critic", run.critic->params());
  return {RunStatus::ok, run.record.exploratory, run.record.summary, {}};
}

inline RunOutcome run_bridge_kind(const RunConfig& cfg, RunDirectory& dir) {
  BridgeRun run = train_bridge_ac(cfg.bridge_run(), cfg.seed, dir.sink());
  checkpoint_network(dir, "actor", run.learner->actor());
  checkpoint_network(dir, "critic", run.learner->critic());
  return {RunStatus::ok, run.record.exploratory, run.record.summary, {}};
}

inline RunOutcome run_equivalence_kind(const RunConfig& cfg, RunDirectory& dir) {
  Stopwatch clock;
  auto rep = equivalence_check(cfg.gan, cfg.bridge_run(), cfg.seed, cfg.equivalence_rounds, cfg.tolerance);
  for (const auto& r : rep.rows)
    dir.append({r.round, clock.elapsed_ms(), {{"max_rel_divergence", r.divergence}, {"pass", r.pass ? 1.0 : 0.0}}});
  write_equivalence_csv((dir.path() / "equivalence.csv").string(), rep);
  RunOutcome out{rep.passed ? RunStatus::ok : RunStatus::failed, false, {}, {}};
  out.summary = {{"max_rel_divergence", rep.max_divergence},
                 {"tolerance", rep.tolerance},
                 {"rounds", static_cast<double>(rep.rows.size())},
                 {"passed", rep.passed ? 1.0 : 0.0}};
  if (rep.first_failure) out.detail = "divergence exceeds tolerance from round " + std::to_string(*rep.first_failure);
  return out;
}

inline RunOutcome run_gradcheck_kind(const RunConfig& cfg, RunDirectory& dir) {
  Stopwatch clock;
  auto cases = primitive_gradcheck_cases();
  auto models = model_gradcheck_cases();
  cases.insert(cases.end(), models.begin(), models.end());
  const auto results = run_gradcheck_cases(cases, cfg.gradcheck_points, cfg.seed);
  double worst = 0.0;
  std::size_t failing = 0;
  std::string names;
  std::ofstream csv(dir.path() / "gradcheck.csv");
  csv << "case,points,entries,max_rel_error,pass\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const bool pass = r.report.max_rel_error < cfg.gradcheck_tolerance;
    worst = std::max(worst, r.report.max_rel_error);
    if (!pass) ++failing, names += (names.empty() ? "" : ", ") + r.name;
    dir.append({i, clock.elapsed_ms(),
                {{"entries", static_cast<double>(r.report.entries)},
                 {"max_rel_error", r.report.max_rel_error},
                 {"pass", pass ? 1.0 : 0.0}}});
    csv << r.name << "," << r.points << "," << r.report.entries << "," << format_number(r.report.max_rel_error) << ","
        << (pass ? 1 : 0) << "\n";
  }
  RunOutcome out{failing ? RunStatus::failed : RunStatus::ok, false, {}, {}};
  out.summary = {{"cases", static_cast<double>(results.size())},
                 {"failing_cases", static_cast<double>(failing)},
                 {"max_rel_error", worst},
                 {"tolerance", cfg.gradcheck_tolerance}};
  if (failing) out.detail = "gradient mismatch in " + names;
  return out;
}

}  // namespace detail

inline RunOutcome run_ablation(const RunConfig& cfg, const fs::path& out);

/// Runs one configured experiment into `out`. NumericAbort (and any other
/// numeric failure) is recorded in the directory rather than propagated.
inline RunOutcome run_experiment(const RunConfig& cfg, const fs::path& out) {
  if (cfg.kind == ExperimentKind::ablate) return run_ablation(cfg, out);
  RunDirectory dir(out);
  dir.write_config(cfg);
  RunOutcome res;
  try {
    switch (cfg.kind) {
      case ExperimentKind::gan: res = detail::run_gan_kind(cfg, dir); break;
      case ExperimentKind::ac: res = detail::run_ac_kind(cfg, dir); break;
      case ExperimentKind::bridge: res = detail::run_bridge_kind(cfg, dir); break;
      case ExperimentKind::equivalence: res = detail::run_equivalence_kind(cfg, dir); break;
      case ExperimentKind::gradcheck: res = detail::run_gradcheck_kind(cfg, dir); break;
      case ExperimentKind::ablate: break;
    }
  } catch (const NumericAbort& e) {
    dir.append_abort(e.round(), e.what());
    res = {RunStatus::aborted, cfg.kind == ExperimentKind::gan && cfg.stabilizers.replay.has_value(), {}, e.what()};
  } catch (const NumericError& e) {
    dir.append_abort(dir.next_step(), e.what());
    res = {RunStatus::aborted, false, {}, e.what()};
  }
  dir.write_summary(cfg, res);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation matrix

struct AblationCell {
  Problem problem = Problem::gan;
  std::string set;
  std::uint64_t seed = 0;
  RunConfig config;
};

struct AblationPlan {
  std::vector<AblationCell> cells;  // in matrix order: problem, set, seed
  std::vector<std::string> notes;   // one per skipped cell
};

inline std::string cell_name(Problem p, const std::string& set, std::uint64_t seed) {
  return std::string(to_string(p)) + "-" + set + "-seed" + std::to_string(seed);
}

/// Expands the matrix. Inapplicable cells become notes; everything else was
/// validated when the configuration was parsed.
inline AblationPlan plan_ablation(const RunConfig& cfg) {
  AblationPlan plan;
  for (Problem p : cfg.ablate.problems)
    for (const auto& set : cfg.ablate.sets) {
      const auto conflicts = stabilizer_conflicts(set.stabilizers, p);
      for (std::uint64_t seed : cfg.ablate.seeds) {
        if (!conflicts.empty()) {
          std::string note = "skipped " + cell_name(p, set.name, seed) + ":";
          for (const auto& c : conflicts) note += " " + c + ";";
          note.pop_back();
          plan.notes.push_back(note);
          continue;
        }
        RunConfig c = cfg;
        c.kind = p == Problem::gan ? ExperimentKind::gan : ExperimentKind::ac;
        c.seed = seed;
        c.stabilizers = set.stabilizers;
        c.ablate = {};
        c.ablate.seeds = {seed};
        plan.cells.push_back({p, set.name, seed, std::move(c)});
      }
    }
  return plan;
}

/// Runs every cell into its own directory under out/cells and writes the
/// aggregated ablation.csv (deterministic: no timings, fixed row order,
/// sorted metric columns) plus ablation_notes.txt.
inline RunOutcome run_ablation(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  RunDirectory::write_text(out / "config.json", config_echo(cfg));
  AblationPlan plan = plan_ablation(cfg);
  std::string notes;
  for (const auto& n : plan.notes) notes += n + "\n";
  RunDirectory::write_text(out / "ablation_notes.txt", notes);

  std::vector<RunOutcome> results(plan.cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.cells.size(); i = next++) {
      try {
        auto& cell = plan.cells[i];
        cell.config.out = (out / "cells" / cell_name(cell.problem, cell.set, cell.seed)).string();
        results[i] = run_experiment(cell.config, cell.config.out);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::max<std::size_t>(1, std::min(cfg.ablate.threads, plan.cells.size()));
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (err) std::rethrow_exception(err);

  std::set<std::string> columns;
  for (const auto& r : results)
    for (const auto& [k, v] : r.summary) columns.insert(k);
  std::string csv = "problem,stabilizers,seed,status,exploratory";
  for (const auto& c : columns) csv += "," + c;
  csv += "\n";
  std::size_t aborted = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& cell = plan.cells[i];
    const auto& r = results[i];
    if (r.status == RunStatus::aborted) ++aborted;
    std::map<std::string, double> m(r.summary.begin(), r.summary.end());
    csv += std::string(to_string(cell.problem)) + "," + cell.set + "," + std::to_string(cell.seed) + "," +
           to_string(r.status) + "," + (r.exploratory ? "1" : "0");
    for (const auto& c : columns) {
      csv += ",";
      if (auto it = m.find(c); it != m.end()) csv += format_number(it->second);
    }
    csv += "\n";
  }
  RunDirectory::write_text(out / "ablation.csv", csv);

  RunOutcome res{aborted ? RunStatus::aborted : RunStatus::ok, false, {}, {}};
  res.summary = {{"cells", static_cast<double>(results.size())},
                 {"skipped", static_cast<double>(plan.notes.size())},
                 {"aborted", static_cast<double>(aborted)}};
  if (aborted) res.detail = std::to_string(aborted) + " cell(s) aborted";
  return res;
}

// ---------------------------------------------------------------------------
// Report

struct ReportSummary {
  std::size_t rows = 0;
  std::vector<std::string> metrics;  // one CSV each under report/
  bool aborted = false;
  std::size_t samples = 0;  // generated samples written, GAN runs only
};

/// Turns a run directory into report/<metric>.csv series, report/ABORTED when
/// the run aborted, and for GAN runs report/samples.csv and
/// report/data_samples.csv regenerated from the checkpoint.
inline ReportSummary write_report(const fs::path& run_dir) {
  const fs::path metrics_path = run_dir / "metrics.jsonl";
  std::ifstream in(metrics_path);
  if (!in) throw LoadError("missing metrics stream " + metrics_path.string());
  ReportSummary rep;
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> series;
  std::vector<std::string> order;
  std::string abort_reason;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw LoadError(metrics_path.string() + ":" + std::to_string(lineno) + ": not a JSON object");
    }
    if (!j.is_object() || !j.contains("step") || !j["step"].is_number_unsigned())
      throw LoadError(metrics_path.string() + ":" + std::to_string(lineno) + ": row without a step");
    const auto step = j["step"].get<std::size_t>();
    ++rep.rows;
    if (j.value("aborted", false)) {
      rep.aborted = true;
      abort_reason = j.value("reason", std::string("non-finite metric at step ") + std::to_string(step));
    }
    for (const auto& [k, v] : j.items()) {
      if (k == "step" || k == "wall_ms" || !v.is_number()) continue;
      if (!series.contains(k)) order.push_back(k);
      series[k].emplace_back(step, v.get<double>());
    }
  }

  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  for (const auto& name : order) {
    std::string csv = "step,value\n";
    for (const auto& [s, v] : series[name]) csv += std::to_string(s) + "," + format_number(v) + "\n";
    RunDirectory::write_text(out / (name + ".csv"), csv);
    rep.metrics.push_back(name);
  }
  if (rep.aborted) RunDirectory::write_text(out / "ABORTED", abort_reason + "\n");
  else fs::remove(out / "ABORTED");

  std::ifstream cfg_in(run_dir / "config.json");
  if (!cfg_in) return rep;
  std::stringstream text;
  text << cfg_in.rdbuf();
  const RunConfig cfg = parse_run_config(text.str());
  const fs::path ckpt = run_dir / "checkpoint" / "generator";
  if (cfg.kind == ExperimentKind::gan && fs::exists(fs::path(ckpt).concat(".manifest"))) {
    const GanConfig g = cfg.gan_run();
    Rng init(cfg.seed);
    GanModel model(g, init);
    model.generator().params().assign_values(checkpoint_load(ckpt));
    if (!model.generator().buffers().empty())
      model.generator().buffers().assign_values(checkpoint_load(run_dir / "checkpoint" / "generator_buffers"));
    Rng rng = Rng(cfg.seed).split();
    write_samples_csv((out / "samples.csv").string(), draw_generated(model, cfg.report_samples, rng));
    write_samples_csv((out / "data_samples.csv").string(), sample_toy(g.data, cfg.report_samples, rng));
    rep.samples = cfg.report_samples;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Entry points shared by the CLI and the tests

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

/// Where a run writes when neither the config nor the command line says.
inline fs::path default_out(const RunConfig& cfg) {
  return fs::path("runs") / (std::string(to_string(cfg.kind)) + "-seed" + std::to_string(cfg.seed));
}

}  // namespace advlab
