#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "advlab/bridge.hpp"
#include "advlab/gan.hpp"
#include "advlab/rl.hpp"

namespace advlab {

using ojson = nlohmann::ordered_json;

inline constexpr const char* kConfigFormat = "advlab-config-1";

enum class ExperimentKind { gan, ac, bridge, equivalence, gradcheck, ablate };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::gan: return "gan";
    case ExperimentKind::ac: return "ac";
    case ExperimentKind::bridge: return "bridge";
    case ExperimentKind::equivalence: return "equivalence";
    case ExperimentKind::gradcheck: return "gradcheck";
    case ExperimentKind::ablate: return "ablate";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::gan, ExperimentKind::ac, ExperimentKind::bridge, ExperimentKind::equivalence,
                 ExperimentKind::gradcheck, ExperimentKind::ablate})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Stabilizers

enum class Strategy {
  freezing,
  label_smoothing,
  historical_averaging,
  minibatch_discrimination,
  batch_normalization,
  target_networks,
  replay_buffers,
  entropy_regularization,
  compatibility,
};

inline constexpr Strategy kStrategies[] = {
    Strategy::freezing,           Strategy::label_smoothing,        Strategy::historical_averaging,
    Strategy::minibatch_discrimination, Strategy::batch_normalization, Strategy::target_networks,
    Strategy::replay_buffers,     Strategy::entropy_regularization, Strategy::compatibility,
};

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::freezing: return "freezing";
    case Strategy::label_smoothing: return "label_smoothing";
    case Strategy::historical_averaging: return "historical_averaging";
    case Strategy::minibatch_discrimination: return "minibatch_discrimination";
    case Strategy::batch_normalization: return "batch_normalization";
    case Strategy::target_networks: return "target_networks";
    case Strategy::replay_buffers: return "replay_buffers";
    case Strategy::entropy_regularization: return "entropy_regularization";
    case Strategy::compatibility: return "compatibility";
  }
  return "?";
}

enum class Problem { gan, ac };

inline const char* to_string(Problem p) { return p == Problem::gan ? "gan" : "ac"; }

/// yes: shown to help; no: not demonstrated; na: does not apply.
enum class Applicability { yes, no, na };

inline const char* to_string(Applicability a) {
  return a == Applicability::yes ? "yes" : a == Applicability::no ? "no" : "n/a";
}

inline Applicability applicability(Strategy s, Problem p) {
  const bool gan = p == Problem::gan;
  switch (s) {
    case Strategy::freezing:
    case Strategy::batch_normalization: return Applicability::yes;
    case Strategy::label_smoothing:
    case Strategy::historical_averaging:
    case Strategy::minibatch_discrimination: return gan ? Applicability::yes : Applicability::no;
    case Strategy::target_networks: return gan ? Applicability::na : Applicability::yes;
    case Strategy::replay_buffers:
    case Strategy::entropy_regularization:
    case Strategy::compatibility: return gan ? Applicability::no : Applicability::yes;
  }
  return Applicability::na;
}

/// Whether this library can run the combination at all. Every "yes" cell is
/// implemented; of the "no" cells, GAN sample replay and AC historical
/// averaging are.
inline bool implemented(Strategy s, Problem p) {
  switch (applicability(s, p)) {
    case Applicability::yes: return true;
    case Applicability::na: return false;
    case Applicability::no:
      return (p == Problem::gan && s == Strategy::replay_buffers) ||
             (p == Problem::ac && s == Strategy::historical_averaging);
  }
  return false;
}

struct HistoryConfig {
  std::optional<double> outer{};
  std::optional<double> inner{};
};

struct MinibatchConfig {
  std::size_t kernels = 4;
  std::size_t kernel_dim = 4;
};

struct ReplayConfig {
  std::size_t capacity = 4096;
  std::optional<double> rho{};  // GAN only: share of each fake batch from the buffer
};

struct StabilizerConfig {
  std::optional<FreezeController> freeze{};
  std::optional<LabelSmoothing> label_smoothing{};
  std::optional<HistoryConfig> historical_averaging{};
  std::optional<MinibatchConfig> minibatch_discrimination{};
  bool batch_norm_outer = false;
  bool batch_norm_inner = false;
  std::optional<double> target_tau{};
  std::optional<ReplayConfig> replay{};
  std::optional<double> entropy_beta{};
  std::optional<std::size_t> compatible_samples{};

  std::vector<Strategy> active() const {
    std::vector<Strategy> out;
    if (freeze) out.push_back(Strategy::freezing);
    if (label_smoothing) out.push_back(Strategy::label_smoothing);
    if (historical_averaging) out.push_back(Strategy::historical_averaging);
    if (minibatch_discrimination) out.push_back(Strategy::minibatch_discrimination);
    if (batch_norm_outer || batch_norm_inner) out.push_back(Strategy::batch_normalization);
    if (target_tau) out.push_back(Strategy::target_networks);
    if (replay) out.push_back(Strategy::replay_buffers);
    if (entropy_beta) out.push_back(Strategy::entropy_regularization);
    if (compatible_samples) out.push_back(Strategy::compatibility);
    return out;
  }
};

/// Why `st` cannot be used on `p`, or nothing when it can.
inline std::vector<std::string> stabilizer_conflicts(const StabilizerConfig& st, Problem p) {
  std::vector<std::string> out;
  for (Strategy s : st.active()) {
    if (applicability(s, p) == Applicability::na)
      out.push_back(std::string(to_string(s)) + " is n/a for " + to_string(p) + " runs");
    else if (!implemented(s, p))
      out.push_back(std::string(to_string(s)) + " is not implemented for " + to_string(p) + " runs");
  }
  return out;
}

inline void apply_stabilizers(const StabilizerConfig& st, GanConfig& g) {
  g.stabilizers.freeze = st.freeze;
  if (st.historical_averaging) {
    g.stabilizers.outer_history = st.historical_averaging->outer;
    g.stabilizers.inner_history = st.historical_averaging->inner;
  }
  if (st.label_smoothing) g.smoothing = *st.label_smoothing;
  if (st.minibatch_discrimination) {
    g.mbd_kernels = st.minibatch_discrimination->kernels;
    g.mbd_kernel_dim = st.minibatch_discrimination->kernel_dim;
  }
  g.discriminator_batch_norm = st.batch_norm_outer;
  g.generator_batch_norm = st.batch_norm_inner;
  if (st.replay) g.replay = SampleReplayConfig{st.replay->capacity, st.replay->rho.value_or(0.0)};
}

inline void apply_stabilizers(const StabilizerConfig& st, AcConfig& a) {
  a.stabilizers.freeze = st.freeze;
  if (st.historical_averaging) {
    a.stabilizers.outer_history = st.historical_averaging->outer;
    a.stabilizers.inner_history = st.historical_averaging->inner;
  }
  a.critic_batch_norm = st.batch_norm_outer;
  a.actor_batch_norm = st.batch_norm_inner;
  a.target_tau = st.target_tau;
  if (st.replay) a.replay_capacity = st.replay->capacity;
  a.entropy = st.entropy_beta.value_or(0.0);
  a.compatible = st.compatible_samples.has_value();
  if (st.compatible_samples) a.compatible_samples = *st.compatible_samples;
}

// ---------------------------------------------------------------------------
// Run configuration

struct StabilizerSet {
  std::string name;
  StabilizerConfig stabilizers;
};

struct AblateConfig {
  std::vector<Problem> problems{Problem::gan, Problem::ac};
  std::vector<StabilizerSet> sets{{"none", {}}};
  std::vector<std::uint64_t> seeds{};  // empty: the run seed
  std::size_t threads = 1;
};

struct RunConfig {
  ExperimentKind kind = ExperimentKind::gan;
  std::uint64_t seed = 0;
  std::string out;
  GanConfig gan{};
  std::size_t report_samples = 1000;
  AcConfig ac{};
  BridgeConfig bridge{};
  StabilizerConfig stabilizers{};
  std::size_t equivalence_rounds = 100;
  double tolerance = 1e-9;
  std::size_t gradcheck_points = 100;
  double gradcheck_tolerance = 1e-5;
  AblateConfig ablate{};

  /// Stabilized problem configurations.
  GanConfig gan_run() const {
    GanConfig g = gan;
    apply_stabilizers(stabilizers, g);
    return g;
  }
  AcConfig ac_run() const {
    AcConfig a = ac;
    apply_stabilizers(stabilizers, a);
    return a;
  }
  BridgeConfig bridge_run() const {
    BridgeConfig b = bridge;
    b.gan = gan_run();
    return b;
  }
};

// ---------------------------------------------------------------------------
// Strict reading

/// Collects every violation before reporting, so one pass lists them all.
class ConfigIssues {
 public:
  void add(const std::string& path, const std::string& msg) { list_.push_back(path + ": " + msg); }
  bool empty() const { return list_.empty(); }
  const std::vector<std::string>& list() const { return list_; }
  void raise() const {
    if (list_.empty()) return;
    std::string msg = "invalid configuration (" + std::to_string(list_.size()) + " problem" +
                      (list_.size() == 1 ? "" : "s") + ")";
    for (const auto& s : list_) msg += "\n  " + s;
    throw ConfigError(msg);
  }

 private:
  std::vector<std::string> list_;
};

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

/// Typed view of one JSON object. Reads record the keys they touch; finish()
/// reports the rest as unknown.
inline bool is_count(const ojson& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

class Fields {
 public:
  Fields(const ojson* j, std::string path, ConfigIssues& issues) : j_(j), path_(std::move(path)), issues_(issues) {
    if (j_ && !j_->is_object()) {
      issues_.add(path_, "expected an object");
      j_ = nullptr;
    }
  }

  const std::string& path() const { return path_; }

  bool has(const std::string& key) const { return j_ && j_->contains(key); }

  /// The member itself, or nullptr when absent or null.
  const ojson* sub(const std::string& key) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return nullptr;
    const ojson& v = j_->at(key);
    return v.is_null() ? nullptr : &v;
  }

  double number(const std::string& key, double fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!v->is_number()) return bad(key, "expected a number"), fallback;
    return v->get<double>();
  }

  std::optional<double> opt_number(const std::string& key, std::optional<double> fallback = {}) {
    if (has(key) && j_->at(key).is_null()) {
      seen_.insert(key);
      return std::nullopt;
    }
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!v->is_number()) return bad(key, "expected a number or null"), fallback;
    return v->get<double>();
  }

  std::uint64_t count(const std::string& key, std::uint64_t fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!is_count(*v)) return bad(key, "expected a non-negative integer"), fallback;
    return v->get<std::uint64_t>();
  }

  bool flag(const std::string& key, bool fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!v->is_boolean()) return bad(key, "expected true or false"), fallback;
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!v->is_string()) return bad(key, "expected a string"), fallback;
    return v->get<std::string>();
  }

  template <class E, class Parse>
  E choice(const std::string& key, E fallback, Parse parse) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    if (!v->is_string()) return bad(key, "expected a string"), fallback;
    try {
      return parse(v->get<std::string>());
    } catch (const ConfigError& e) {
      bad(key, e.what());
      return fallback;
    }
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    if (!v->is_array()) return bad(key, "expected an array of non-negative integers"), fallback;
    for (const auto& x : *v) {
      if (!is_count(x)) return bad(key, "expected an array of non-negative integers"), fallback;
      out.push_back(x.get<std::size_t>());
    }
    return out;
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    const ojson* v = sub(key);
    if (!v) return fallback;
    std::vector<double> out;
    if (!v->is_array()) return bad(key, "expected an array of numbers"), fallback;
    for (const auto& x : *v) {
      if (!x.is_number()) return bad(key, "expected an array of numbers"), fallback;
      out.push_back(x.get<double>());
    }
    return out;
  }

  void bad(const std::string& key, const std::string& msg) { issues_.add(join_path(path_, key), msg); }

  void finish() {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!seen_.contains(k)) issues_.add(join_path(path_, k), "unknown key");
  }

 private:
  const ojson* j_;
  std::string path_;
  ConfigIssues& issues_;
  std::set<std::string> seen_;
};

/// Runs a semantic validator, recording its complaint instead of throwing.
template <class F>
void check(ConfigIssues& issues, const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    issues.add(path, e.what());
  }
}

inline UpdateSchedule read_schedule(const ojson* j, const std::string& path, UpdateSchedule d, ConfigIssues& is) {
  Fields f(j, path, is);
  UpdateSchedule s;
  s.inner_steps = f.count("inner_steps", d.inner_steps);
  s.outer_steps = f.count("outer_steps", d.outer_steps);
  s.inner_lr = f.number("inner_lr", d.inner_lr);
  s.outer_lr = f.number("outer_lr", d.outer_lr);
  s.rounds = f.count("rounds", d.rounds);
  s.mode = f.choice("mode", d.mode, parse_update_mode);
  s.optimizer = f.choice("optimizer", d.optimizer, parse_optimizer);
  s.beta1 = f.number("beta1", d.beta1);
  s.beta2 = f.number("beta2", d.beta2);
  s.final_lr_scale = f.number("final_lr_scale", d.final_lr_scale);
  f.finish();
  return s;
}

inline ojson write_schedule(const UpdateSchedule& s) {
  return {{"inner_steps", s.inner_steps}, {"outer_steps", s.outer_steps}, {"inner_lr", s.inner_lr},
          {"outer_lr", s.outer_lr},       {"rounds", s.rounds},           {"mode", to_string(s.mode)},
          {"optimizer", to_string(s.optimizer)}, {"beta1", s.beta1},      {"beta2", s.beta2},
          {"final_lr_scale", s.final_lr_scale}};
}

inline ToyDistribution::Kind parse_toy_kind(const std::string& s) {
  for (auto k : {ToyDistribution::Kind::gaussian, ToyDistribution::Kind::mixture, ToyDistribution::Kind::ring})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown distribution kind '" + s + "'");
}

inline ToyDistribution read_data(const ojson* j, const std::string& path, const ToyDistribution& d, ConfigIssues& is) {
  Fields f(j, path, is);
  ToyDistribution t = d;
  t.kind = f.choice("kind", d.kind, parse_toy_kind);
  if (const ojson* m = f.sub("means")) {
    t.means.clear();
    bool ok = m->is_array();
    if (ok)
      for (const auto& row : *m) {
        if (!row.is_array()) ok = false;
        std::vector<double> r;
        if (ok)
          for (const auto& x : row) {
            if (!x.is_number()) ok = false;
            else r.push_back(x.get<double>());
          }
        t.means.push_back(std::move(r));
      }
    if (!ok) {
      f.bad("means", "expected an array of coordinate arrays");
      t.means = d.means;
    }
  }
  t.scales = f.numbers("scales", d.scales);
  t.weights = f.numbers("weights", d.weights);
  f.finish();
  return t;
}

inline ojson write_data(const ToyDistribution& d) {
  return {{"kind", to_string(d.kind)}, {"means", d.means}, {"scales", d.scales}, {"weights", d.weights}};
}

inline void read_gan(const ojson* j, const std::string& path, GanConfig& g, std::size_t& report_samples,
                     ConfigIssues& is) {
  Fields f(j, path, is);
  const GanConfig d = g;
  g.data = read_data(f.sub("data"), join_path(path, "data"), d.data, is);
  g.noise_dim = f.count("noise_dim", d.noise_dim);
  g.generator_hidden = f.counts("generator_hidden", d.generator_hidden);
  g.discriminator_hidden = f.counts("discriminator_hidden", d.discriminator_hidden);
  g.activation = f.choice("activation", d.activation, parse_activation);
  g.loss = f.choice("loss", d.loss, parse_gan_loss);
  g.batch = f.count("batch", d.batch);
  g.exact_generator = f.flag("exact_generator", d.exact_generator);
  g.eval_every = f.count("eval_every", d.eval_every);
  {
    Fields e(f.sub("eval"), join_path(path, "eval"), is);
    g.eval.samples = e.count("samples", d.eval.samples);
    g.eval.bins = e.count("bins", d.eval.bins);
    g.eval.lo = e.number("lo", d.eval.lo);
    g.eval.hi = e.number("hi", d.eval.hi);
    g.eval.coverage_threshold = e.number("coverage_threshold", d.eval.coverage_threshold);
    g.eval.accuracy_samples = e.count("accuracy_samples", d.eval.accuracy_samples);
    e.finish();
  }
  g.schedule = read_schedule(f.sub("schedule"), join_path(path, "schedule"), d.schedule, is);
  report_samples = f.count("report_samples", report_samples);
  f.finish();
}

inline ojson write_gan(const GanConfig& g, std::size_t report_samples) {
  return {{"data", write_data(g.data)},
          {"noise_dim", g.noise_dim},
          {"generator_hidden", g.generator_hidden},
          {"discriminator_hidden", g.discriminator_hidden},
          {"activation", to_string(g.activation)},
          {"loss", to_string(g.loss)},
          {"batch", g.batch},
          {"exact_generator", g.exact_generator},
          {"eval_every", g.eval_every},
          {"eval",
           {{"samples", g.eval.samples},
            {"bins", g.eval.bins},
            {"lo", g.eval.lo},
            {"hi", g.eval.hi},
            {"coverage_threshold", g.eval.coverage_threshold},
            {"accuracy_samples", g.eval.accuracy_samples}}},
          {"schedule", write_schedule(g.schedule)},
          {"report_samples", report_samples}};
}

inline void read_ac(const ojson* j, const std::string& path, AcConfig& a, ConfigIssues& is) {
  Fields f(j, path, is);
  const AcConfig d = a;
  a.env = f.choice("env", d.env, parse_env_kind);
  a.bandit_dim = f.count("bandit_dim", d.bandit_dim);
  a.bandit_target = f.number("bandit_target", d.bandit_target);
  {
    Fields c(f.sub("chain"), join_path(path, "chain"), is);
    a.chain.rewards = c.numbers("rewards", d.chain.rewards);
    a.chain.gamma = c.number("gamma", d.chain.gamma);
    a.chain.slip = c.number("slip", d.chain.slip);
    a.chain.reward_noise = c.number("reward_noise", d.chain.reward_noise);
    a.chain.horizon = c.count("horizon", d.chain.horizon);
    a.chain.one_step = c.flag("one_step", d.chain.one_step);
    c.finish();
  }
  a.actor = f.choice("actor", d.actor, parse_actor_kind);
  a.actor_hidden = f.counts("actor_hidden", d.actor_hidden);
  a.critic_hidden = f.counts("critic_hidden", d.critic_hidden);
  a.activation = f.choice("activation", d.activation, parse_activation);
  a.batch = f.count("batch", d.batch);
  a.exploration = f.number("exploration", d.exploration);
  a.init_log_scale = f.number("init_log_scale", d.init_log_scale);
  a.eval_every = f.count("eval_every", d.eval_every);
  a.schedule = read_schedule(f.sub("schedule"), join_path(path, "schedule"), d.schedule, is);
  f.finish();
}

inline ojson write_ac(const AcConfig& a) {
  return {{"env", to_string(a.env)},
          {"bandit_dim", a.bandit_dim},
          {"bandit_target", a.bandit_target},
          {"chain",
           {{"rewards", a.chain.rewards},
            {"gamma", a.chain.gamma},
            {"slip", a.chain.slip},
            {"reward_noise", a.chain.reward_noise},
            {"horizon", a.chain.horizon},
            {"one_step", a.chain.one_step}}},
          {"actor", to_string(a.actor)},
          {"actor_hidden", a.actor_hidden},
          {"critic_hidden", a.critic_hidden},
          {"activation", to_string(a.activation)},
          {"batch", a.batch},
          {"exploration", a.exploration},
          {"init_log_scale", a.init_log_scale},
          {"eval_every", a.eval_every},
          {"schedule", write_schedule(a.schedule)}};
}

inline void read_bridge(const ojson* j, const std::string& path, BridgeConfig& b, ConfigIssues& is) {
  Fields f(j, path, is);
  const BridgeConfig d = b;
  b.scaling = f.choice("scaling", d.scaling, parse_scaling_mode);
  b.blind = f.flag("blind", d.blind);
  b.critic_loss = f.choice("critic_loss", d.critic_loss, parse_divergence);
  b.mask_real = f.flag("mask_real", d.mask_real);
  b.balanced = f.flag("balanced", d.balanced);
  f.finish();
}

inline ojson write_bridge(const BridgeConfig& b) {
  return {{"scaling", to_string(b.scaling)},
          {"blind", b.blind},
          {"critic_loss", to_string(b.critic_loss)},
          {"mask_real", b.mask_real},
          {"balanced", b.balanced}};
}

inline StabilizerConfig read_stabilizers(const ojson* j, const std::string& path, ConfigIssues& is) {
  Fields f(j, path, is);
  StabilizerConfig s;
  if (const ojson* v = f.sub("freeze")) {
    Fields g(v, join_path(path, "freeze"), is);
    FreezeController c;
    c.metric = g.text("metric", c.metric);
    c.lower = g.number("lower", c.lower);
    c.upper = g.number("upper", c.upper);
    g.finish();
    s.freeze = c;
  }
  if (const ojson* v = f.sub("label_smoothing")) {
    Fields g(v, join_path(path, "label_smoothing"), is);
    LabelSmoothing l{0.1, true};
    l.epsilon = g.number("epsilon", l.epsilon);
    l.smooth_fake = g.flag("smooth_fake", l.smooth_fake);
    g.finish();
    s.label_smoothing = l;
  }
  if (const ojson* v = f.sub("historical_averaging")) {
    Fields g(v, join_path(path, "historical_averaging"), is);
    HistoryConfig h{1.0, 1.0};
    h.outer = g.opt_number("outer", h.outer);
    h.inner = g.opt_number("inner", h.inner);
    g.finish();
    s.historical_averaging = h;
  }
  if (const ojson* v = f.sub("minibatch_discrimination")) {
    Fields g(v, join_path(path, "minibatch_discrimination"), is);
    MinibatchConfig m;
    m.kernels = g.count("kernels", m.kernels);
    m.kernel_dim = g.count("kernel_dim", m.kernel_dim);
    g.finish();
    s.minibatch_discrimination = m;
  }
  {
    Fields g(f.sub("batch_norm"), join_path(path, "batch_norm"), is);
    s.batch_norm_outer = g.flag("outer", false);
    s.batch_norm_inner = g.flag("inner", false);
    g.finish();
  }
  if (const ojson* v = f.sub("target_network")) {
    Fields g(v, join_path(path, "target_network"), is);
    s.target_tau = g.number("tau", 0.01);
    g.finish();
  }
  if (const ojson* v = f.sub("replay")) {
    Fields g(v, join_path(path, "replay"), is);
    ReplayConfig r;
    r.capacity = g.count("capacity", r.capacity);
    r.rho = g.opt_number("rho");
    g.finish();
    s.replay = r;
  }
  if (const ojson* v = f.sub("entropy")) {
    Fields g(v, join_path(path, "entropy"), is);
    s.entropy_beta = g.number("beta", 0.01);
    g.finish();
  }
  if (const ojson* v = f.sub("compatible")) {
    Fields g(v, join_path(path, "compatible"), is);
    s.compatible_samples = g.count("samples", 2000);
    g.finish();
  }
  f.finish();
  return s;
}

inline ojson write_opt(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

inline ojson write_stabilizers(const StabilizerConfig& s) {
  ojson j;
  j["freeze"] = s.freeze ? ojson{{"metric", s.freeze->metric}, {"lower", s.freeze->lower}, {"upper", s.freeze->upper}}
                         : ojson(nullptr);
  j["label_smoothing"] = s.label_smoothing ? ojson{{"epsilon", s.label_smoothing->epsilon},
                                                   {"smooth_fake", s.label_smoothing->smooth_fake}}
                                           : ojson(nullptr);
  j["historical_averaging"] =
      s.historical_averaging
          ? ojson{{"outer", write_opt(s.historical_averaging->outer)}, {"inner", write_opt(s.historical_averaging->inner)}}
          : ojson(nullptr);
  j["minibatch_discrimination"] = s.minibatch_discrimination
                                      ? ojson{{"kernels", s.minibatch_discrimination->kernels},
                                              {"kernel_dim", s.minibatch_discrimination->kernel_dim}}
                                      : ojson(nullptr);
  j["batch_norm"] = {{"outer", s.batch_norm_outer}, {"inner", s.batch_norm_inner}};
  j["target_network"] = s.target_tau ? ojson{{"tau", *s.target_tau}} : ojson(nullptr);
  j["replay"] = s.replay ? ojson{{"capacity", s.replay->capacity}, {"rho", write_opt(s.replay->rho)}} : ojson(nullptr);
  j["entropy"] = s.entropy_beta ? ojson{{"beta", *s.entropy_beta}} : ojson(nullptr);
  j["compatible"] = s.compatible_samples ? ojson{{"samples", *s.compatible_samples}} : ojson(nullptr);
  return j;
}

inline Problem parse_problem(const std::string& s) {
  if (s == "gan") return Problem::gan;
  if (s == "ac") return Problem::ac;
  throw ConfigError("unknown ablation problem '" + s + "'");
}

/// Problem-level checks for one stabilized configuration.
inline void check_problem(const RunConfig& c, Problem p, const StabilizerConfig& st, const std::string& path,
                          ConfigIssues& is) {
  for (const auto& m : stabilizer_conflicts(st, p)) is.add(path, m);
  if (p == Problem::gan) {
    if (st.replay && !st.replay->rho) is.add(path, "GAN sample replay needs a mixing fraction rho");
    GanConfig g = c.gan;
    apply_stabilizers(st, g);
    check(is, join_path(path, "gan"), [&] { g.validate(); });
  } else {
    if (st.replay && st.replay->rho) is.add(path, "transition replay takes no rho");
    AcConfig a = c.ac;
    apply_stabilizers(st, a);
    check(is, join_path(path, "ac"), [&] { a.validate(); });
  }
  if (st.freeze) check(is, join_path(path, "freeze"), [&] { st.freeze->validate(); });
}

}  // namespace detail

/// Parses and validates a configuration document, listing every problem.
inline RunConfig parse_run_config(const ojson& j) {
  using detail::Fields;
  ConfigIssues is;
  RunConfig c;
  Fields f(&j, "", is);
  if (!j.is_object()) is.raise();
  const std::string format = f.text("format", "");
  if (format != kConfigFormat) f.bad("format", "expected \"" + std::string(kConfigFormat) + "\"");
  if (!f.has("kind")) f.bad("kind", "missing");
  c.kind = f.choice("kind", ExperimentKind::gan, parse_experiment_kind);
  if (!f.has("seed")) f.bad("seed", "missing (every run needs an explicit seed)");
  c.seed = f.count("seed", 0);
  c.out = f.text("out", "");

  const bool bridge_like = c.kind == ExperimentKind::bridge || c.kind == ExperimentKind::equivalence;
  if (bridge_like) c.gan = BridgeConfig::defaults();
  detail::read_gan(f.sub("gan"), "gan", c.gan, c.report_samples, is);
  detail::read_ac(f.sub("ac"), "ac", c.ac, is);
  c.stabilizers = detail::read_stabilizers(f.sub("stabilizers"), "stabilizers", is);
  c.bridge = c.kind == ExperimentKind::equivalence ? BridgeConfig::matching(c.gan) : BridgeConfig{};
  detail::read_bridge(f.sub("bridge"), "bridge", c.bridge, is);
  {
    Fields e(f.sub("equivalence"), "equivalence", is);
    c.equivalence_rounds = e.count("rounds", c.equivalence_rounds);
    c.tolerance = e.number("tolerance", c.tolerance);
    e.finish();
  }
  {
    Fields g(f.sub("gradcheck"), "gradcheck", is);
    c.gradcheck_points = g.count("points", c.gradcheck_points);
    c.gradcheck_tolerance = g.number("tolerance", c.gradcheck_tolerance);
    g.finish();
  }
  {
    Fields a(f.sub("ablate"), "ablate", is);
    if (const ojson* ps = a.sub("problems")) {
      c.ablate.problems.clear();
      if (!ps->is_array()) a.bad("problems", "expected an array of problem names");
      else
        for (const auto& p : *ps) {
          try {
            c.ablate.problems.push_back(detail::parse_problem(p.is_string() ? p.get<std::string>() : ""));
          } catch (const ConfigError& e) {
            a.bad("problems", e.what());
          }
        }
    }
    if (const ojson* ss = a.sub("stabilizer_sets")) {
      c.ablate.sets.clear();
      if (!ss->is_array()) a.bad("stabilizer_sets", "expected an array");
      else
        for (std::size_t i = 0; i < ss->size(); ++i) {
          const std::string path = "ablate.stabilizer_sets[" + std::to_string(i) + "]";
          Fields s(&(*ss)[i], path, is);
          StabilizerSet set;
          set.name = s.text("name", "");
          if (set.name.empty()) s.bad("name", "missing");
          set.stabilizers = detail::read_stabilizers(s.sub("stabilizers"), detail::join_path(path, "stabilizers"), is);
          s.finish();
          c.ablate.sets.push_back(std::move(set));
        }
    }
    if (const ojson* sd = a.sub("seeds")) {
      if (!sd->is_array()) a.bad("seeds", "expected an array of seeds");
      else
        for (const auto& s : *sd) {
          if (!detail::is_count(s)) a.bad("seeds", "expected non-negative integer seeds");
          else c.ablate.seeds.push_back(s.get<std::uint64_t>());
        }
    }
    c.ablate.threads = a.count("threads", c.ablate.threads);
    a.finish();
  }
  f.finish();
  if (c.ablate.seeds.empty()) c.ablate.seeds = {c.seed};

  // Semantic checks of the parts this kind uses.
  switch (c.kind) {
    case ExperimentKind::gan: detail::check_problem(c, Problem::gan, c.stabilizers, "stabilizers", is); break;
    case ExperimentKind::ac: detail::check_problem(c, Problem::ac, c.stabilizers, "stabilizers", is); break;
    case ExperimentKind::bridge:
      if (c.stabilizers.target_tau) is.add("stabilizers", "target_networks is n/a for bridge runs");
      detail::check(is, "bridge", [&] { c.bridge_run().validate(); });
      break;
    case ExperimentKind::equivalence:
      if (!c.stabilizers.active().empty()) is.add("stabilizers", "the lockstep check runs without stabilizers");
      if (!(c.tolerance > 0.0)) is.add("equivalence.tolerance", "must be positive");
      if (c.equivalence_rounds < 1) is.add("equivalence.rounds", "must be at least 1");
      detail::check(is, "bridge", [&] { c.bridge_run().validate(); });
      detail::check(is, "gan", [&] { c.gan.validate(); });
      break;
    case ExperimentKind::gradcheck:
      if (c.gradcheck_points < 1) is.add("gradcheck.points", "must be at least 1");
      if (!(c.gradcheck_tolerance > 0.0)) is.add("gradcheck.tolerance", "must be positive");
      break;
    case ExperimentKind::ablate: {
      if (c.ablate.problems.empty()) is.add("ablate.problems", "must not be empty");
      if (c.ablate.sets.empty()) is.add("ablate.stabilizer_sets", "must not be empty");
      if (c.ablate.threads < 1) is.add("ablate.threads", "must be at least 1");
      std::set<std::string> names;
      for (std::size_t i = 0; i < c.ablate.sets.size(); ++i) {
        const auto& set = c.ablate.sets[i];
        const std::string path = "ablate.stabilizer_sets[" + std::to_string(i) + "]";
        if (!names.insert(set.name).second) is.add(path, "duplicate set name '" + set.name + "'");
        for (Problem p : c.ablate.problems) {
          // Inapplicable cells are skipped at run time; everything else must be valid.
          if (!stabilizer_conflicts(set.stabilizers, p).empty()) continue;
          detail::check_problem(c, p, set.stabilizers, path + "/" + to_string(p), is);
        }
      }
      break;
    }
  }
  is.raise();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

/// Normalized form: every field, defaults included, in a fixed order.
inline ojson to_json(const RunConfig& c) {
  ojson j;
  j["format"] = kConfigFormat;
  j["kind"] = to_string(c.kind);
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["gan"] = detail::write_gan(c.gan, c.report_samples);
  j["ac"] = detail::write_ac(c.ac);
  j["bridge"] = detail::write_bridge(c.bridge);
  j["stabilizers"] = detail::write_stabilizers(c.stabilizers);
  j["equivalence"] = {{"rounds", c.equivalence_rounds}, {"tolerance", c.tolerance}};
  j["gradcheck"] = {{"points", c.gradcheck_points}, {"tolerance", c.gradcheck_tolerance}};
  ojson sets = ojson::array();
  for (const auto& s : c.ablate.sets)
    sets.push_back({{"name", s.name}, {"stabilizers", detail::write_stabilizers(s.stabilizers)}});
  ojson problems = ojson::array();
  for (Problem p : c.ablate.problems) problems.push_back(to_string(p));
  j["ablate"] = {{"problems", problems}, {"stabilizer_sets", sets}, {"seeds", c.ablate.seeds},
                 {"threads", c.ablate.threads}};
  return j;
}

inline std::string config_echo(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace advlab
