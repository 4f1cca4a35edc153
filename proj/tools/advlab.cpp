#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "advlab/harness.hpp"

using namespace advlab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> tolerance;
};

void add_common(CLI::App* app, Common& c, bool config_required) {
  auto* opt = app->add_option("--config", c.config, "JSON run configuration");
  if (config_required) opt->required();
  app->add_option("--seed", c.seed, "override the configured seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--tolerance", c.tolerance, "override the pass tolerance");
}

RunConfig bare_config(ExperimentKind kind, std::uint64_t seed) {
  return parse_run_config(ojson{{"format", kConfigFormat}, {"kind", to_string(kind)}, {"seed", seed}});
}

// Command-line overrides go through the same parser, so they are validated
// like everything else and show up in the echo.
RunConfig with_overrides(const RunConfig& base, const Common& c) {
  ojson j = to_json(base);
  if (c.seed) {
    j["seed"] = *c.seed;
    if (base.kind == ExperimentKind::ablate) j["ablate"]["seeds"] = ojson::array({*c.seed});
  }
  if (!c.out.empty()) j["out"] = c.out;
  if (c.tolerance) {
    if (base.kind == ExperimentKind::gradcheck) j["gradcheck"]["tolerance"] = *c.tolerance;
    else j["equivalence"]["tolerance"] = *c.tolerance;
  }
  return parse_run_config(j);
}

int finish(const RunConfig& cfg, const RunOutcome& r, const fs::path& out) {
  std::cout << to_string(cfg.kind) << " seed " << cfg.seed << ": " << to_string(r.status);
  if (r.exploratory) std::cout << " (exploratory)";
  std::cout << "\n";
  for (const auto& [k, v] : r.summary) std::cout << "  " << k << " = " << format_number(v) << "\n";
  if (!r.detail.empty()) std::cout << "  " << r.detail << "\n";
  std::cout << "  output: " << out.string() << "\n";
  return static_cast<int>(exit_code(r.status));
}

int execute(RunConfig cfg) {
  const fs::path out = cfg.out.empty() ? default_out(cfg) : fs::path(cfg.out);
  cfg.out = out.string();
  const RunOutcome r = run_experiment(cfg, out);
  if (cfg.kind == ExperimentKind::ablate) {
    std::ifstream notes(out / "ablation_notes.txt");
    for (std::string line; std::getline(notes, line);) std::cerr << "note: " << line << "\n";
  }
  return finish(cfg, r, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial bilevel training lab"};
  app.require_subcommand(1);

  Common run_opts, ablate_opts, grad_opts, bridge_opts;
  std::string report_dir;
  std::optional<std::size_t> points, rounds;
  bool controls = false;

  auto* run = app.add_subcommand("run", "run the experiment a config describes");
  add_common(run, run_opts, true);
  auto* ablate = app.add_subcommand("ablate", "run a problems x stabilizers x seeds matrix");
  add_common(ablate, ablate_opts, true);
  auto* report = app.add_subcommand("report", "turn a run directory into CSV series");
  report->add_option("run_dir", report_dir, "run directory")->required();
  auto* grad = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  add_common(grad, grad_opts, false);
  grad->add_option("--points", points, "random points per case");
  auto* bridge = app.add_subcommand("bridge-check", "lockstep GAN vs modified actor-critic");
  add_common(bridge, bridge_opts, false);
  bridge->add_option("--rounds", rounds, "lockstep rounds");
  bridge->add_flag("--controls", controls, "also disable each modification in turn");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::invalid_config);
  }

  try {
    if (*run) return execute(with_overrides(load_run_config(run_opts.config), run_opts));

    if (*ablate) {
      RunConfig cfg = load_run_config(ablate_opts.config);
      if (cfg.kind != ExperimentKind::ablate) throw ConfigError("ablate needs a config of kind \"ablate\"");
      return execute(with_overrides(cfg, ablate_opts));
    }

    if (*report) {
      const ReportSummary rep = write_report(report_dir);
      std::cout << "report: " << rep.rows << " rows, " << rep.metrics.size() << " metric series";
      if (rep.samples) std::cout << ", " << rep.samples << " samples";
      if (rep.aborted) std::cout << ", run aborted";
      std::cout << "\n  output: " << (fs::path(report_dir) / "report").string() << "\n";
      return static_cast<int>(rep.aborted ? ExitCode::numeric_abort : ExitCode::pass);
    }

    if (*grad) {
      RunConfig cfg = grad_opts.config.empty() ? bare_config(ExperimentKind::gradcheck, grad_opts.seed.value_or(1))
                                               : load_run_config(grad_opts.config);
      if (cfg.kind != ExperimentKind::gradcheck) throw ConfigError("gradcheck needs a config of kind \"gradcheck\"");
      if (points) cfg.gradcheck_points = *points;
      return execute(with_overrides(cfg, grad_opts));
    }

    if (*bridge) {
      if (!bridge_opts.config.empty()) {
        RunConfig cfg = load_run_config(bridge_opts.config);
        if (cfg.kind != ExperimentKind::equivalence)
          throw ConfigError("bridge-check needs a config of kind \"equivalence\"");
        if (rounds) cfg.equivalence_rounds = *rounds;
        cfg = with_overrides(cfg, bridge_opts);
        const int code = execute(cfg);
        if (controls)
          for (const auto& a : bridge_ablations(cfg.gan, cfg.seed, cfg.equivalence_rounds, cfg.tolerance))
            std::cout << "  control " << a.name << ": max divergence " << format_number(a.report.max_divergence)
                      << (a.report.passed ? " (matches)" : " (diverges)") << "\n";
        return code;
      }
      // No config: check both generator losses on the default networks.
      int code = 0;
      for (const char* loss : {"minimax", "non_saturating"}) {
        ojson j{{"format", kConfigFormat}, {"kind", "equivalence"}, {"seed", bridge_opts.seed.value_or(1)},
                {"gan", {{"loss", loss}}}};
        if (rounds) j["equivalence"] = {{"rounds", *rounds}};
        Common o = bridge_opts;
        o.seed.reset();
        if (o.out.empty()) o.out = (fs::path("runs") / "bridge-check").string();
        o.out = (fs::path(o.out) / loss).string();
        RunConfig cfg = with_overrides(parse_run_config(j), o);
        code = std::max(code, execute(cfg));
        if (controls)
          for (const auto& a : bridge_ablations(cfg.gan, cfg.seed, cfg.equivalence_rounds, cfg.tolerance))
            std::cout << "  control " << a.name << ": max divergence " << format_number(a.report.max_divergence)
                      << (a.report.passed ? " (matches)" : " (diverges)") << "\n";
      }
      return code;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::invalid_config);
  } catch (const LoadError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::invalid_config);
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numeric_abort);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::fail);
  }
  return 0;
}
