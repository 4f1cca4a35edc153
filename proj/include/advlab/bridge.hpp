#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/bilevel.hpp"
#include "advlab/gan.hpp"
#include "advlab/layers.hpp"
#include "advlab/rl.hpp"
#include "advlab/run.hpp"

namespace advlab {

// A GAN is an actor-critic learner on a one-step MDP: the environment shows
// either a data sample (reward 1) or the actor's action (reward 0), the
// critic predicts the reward of what it is shown, and the actor never sees
// the environment. Four changes to plain DPG make the two updates coincide:
// a blind actor, a cross-entropy critic, a 1/(1−Q) or 1/Q action-gradient
// scale, and no actor update from real-branch episodes.

enum class ScalingMode { none, minimax, non_saturating };

inline const char* to_string(ScalingMode m) {
  switch (m) {
    case ScalingMode::none: return "none";
    case ScalingMode::minimax: return "minimax";
    case ScalingMode::non_saturating: return "non_saturating";
  }
  return "?";
}

inline ScalingMode parse_scaling_mode(const std::string& s) {
  if (s == "none") return ScalingMode::none;
  if (s == "minimax") return ScalingMode::minimax;
  if (s == "non_saturating") return ScalingMode::non_saturating;
  throw ConfigError("unknown scaling mode '" + s + "'");
}

inline ScalingMode scaling_for(GanLossKind k) {
  return k == GanLossKind::minimax ? ScalingMode::minimax : ScalingMode::non_saturating;
}

/// ∂𝒟/∂Q magnitude for the cross-entropy divergence; the reciprocals share
/// the tape's log floor.
inline double scaling_factor(double q, ScalingMode mode) {
  switch (mode) {
    case ScalingMode::none: return 1.0;
    case ScalingMode::minimax: return clamped_log_slope(1.0 - q);
    case ScalingMode::non_saturating: return clamped_log_slope(q);
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Environment

enum class Branch { real, fake };

struct GanMdpStep {
  std::vector<double> shown;
  double reward = 0.0;
  Branch branch = Branch::fake;
};

/// Horizon-1, stateless. Randomness comes from the caller.
struct GanMdp {
  ToyDistribution data = ToyDistribution::mixture({-2.0, 2.0}, 0.25);
  double p_real = 0.5;

  void validate() const {
    data.validate();
    if (!(p_real >= 0.0 && p_real <= 1.0)) throw ConfigError("coin probability must lie in [0, 1]");
  }

  /// Fair coin unless `forced`; the real branch never reads the action.
  GanMdpStep step(std::span<const double> action, Rng& rng, std::optional<Branch> forced = {}) const {
    if (action.size() != data.dim()) throw UsageError("action does not have the sample dimension");
    const Branch b = forced ? *forced : (rng.bernoulli(p_real) ? Branch::real : Branch::fake);
    if (b == Branch::real) {
      const Tensor x = sample_toy(data, 1, rng);
      return {{x.data().begin(), x.data().end()}, 1.0, Branch::real};
    }
    return {{action.begin(), action.end()}, 0.0, Branch::fake};
  }
};

// ---------------------------------------------------------------------------
// Actor-side modifications

struct ActionGradient {
  Tensor grad;  // [n, d]: c_i · ∇_a Q(a_i)
  Tensor q;     // [n, 1]
};

/// Critic action-gradient with the per-sample scale c_i of `mode`. The
/// critic's parameters are untouched.
inline ActionGradient scaled_actor_gradient(Mlp& critic, const Tensor& actions, ScalingMode mode) {
  Tape t;
  Var a = t.input("a");
  Var q = critic.build(t, a, BatchNormMode::train);
  t.evaluate({{"a", actions}});
  const Tensor& qv = t.value(q);
  std::vector<double> seed(qv.size());
  for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = scaling_factor(qv[i], mode);
  const ParamStore nothing;
  t.backward_seeded(q, seed, {&nothing});
  const auto g = t.gradient(a);
  return {Tensor(actions.shape(), std::vector<double>(g.begin(), g.end())), qv};
}

/// Zeroes the gradient rows of real-branch episodes (reward 1). Returns the
/// number of rows left to average over.
inline std::size_t masked_actor_update(std::span<const double> rewards, Tensor& action_grads) {
  if (rewards.size() != action_grads.rows()) throw UsageError("one reward per gradient row");
  const std::size_t d = action_grads.cols();
  std::size_t kept = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (rewards[i] == 1.0) std::fill_n(action_grads.values().begin() + static_cast<std::ptrdiff_t>(i * d), d, 0.0);
    else ++kept;
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Configuration

struct BridgeConfig {
  /// Networks, data, batch and schedule; the actor is the generator network
  /// and the critic the discriminator network.
  GanConfig gan = defaults();
  ScalingMode scaling = ScalingMode::non_saturating;
  bool blind = true;  // a sighted actor also reads a data sample drawn at reset
  Divergence critic_loss = Divergence::cross_entropy;
  bool mask_real = true;
  /// Derandomised coin: every step plays exactly `batch` real and `batch`
  /// fake episodes, reals first.
  bool balanced = false;

  static GanConfig defaults() {
    GanConfig g;
    g.noise_dim = 2;
    g.generator_hidden = {16, 16};
    g.discriminator_hidden = {16, 16};
    g.schedule = {.inner_steps = 1,
                  .outer_steps = 1,
                  .outer_lr = 0.05,
                  .inner_lr = 0.05,
                  .rounds = 100,
                  .mode = UpdateMode::alternating,
                  .optimizer = OptimizerKind::sgd};
    g.eval_every = 100;
    g.eval.samples = 10000;
    g.eval.accuracy_samples = 2000;
    return g;
  }

  /// The unmodified-GAN counterpart of `g`: matched scaling, balanced episodes.
  static BridgeConfig matching(const GanConfig& g) {
    BridgeConfig b;
    b.gan = g;
    b.scaling = scaling_for(g.loss);
    b.balanced = true;
    return b;
  }

  MlpSpec actor_spec() const {
    MlpSpec s = gan.generator_spec();
    if (!blind) s.inputs += gan.data.dim();
    return s;
  }
  MlpSpec critic_spec() const { return gan.discriminator_spec(); }

  void validate() const {
    gan.validate();
    if (gan.smoothing.epsilon != 0.0) throw ConfigError("bridge rewards are hard 0/1 labels; smoothing has no counterpart");
    if (gan.generator_batch_norm || gan.discriminator_batch_norm || gan.mbd_kernels > 0)
      throw ConfigError("batch normalization and minibatch features couple episodes of a stateless MDP");
    if (gan.replay) throw ConfigError("sample replay does not apply to the bridge learner");
  }
};

// ---------------------------------------------------------------------------
// Learner

/// Blind (or sighted) actor plus critic on the GAN MDP.
class BridgeLearner {
 public:
  struct Episode {
    std::vector<double> input;  // noise, then the observation when sighted
    std::vector<double> shown;
    double reward = 0.0;
  };

  BridgeLearner(const BridgeConfig& cfg, Rng& init, Rng side)
      : cfg_(cfg), env_{cfg.gan.data, 0.5}, actor_(cfg.actor_spec(), init), critic_(cfg.critic_spec(), init),
        side_(side) {
    cfg_.validate();
  }

  BridgeLearner(const BridgeLearner&) = delete;
  BridgeLearner& operator=(const BridgeLearner&) = delete;

  const BridgeConfig& config() const { return cfg_; }
  const GanMdp& env() const { return env_; }
  Mlp& actor() { return actor_; }
  Mlp& critic() { return critic_; }

  /// Actions for a batch of actor inputs.
  Tensor act(const Tensor& inputs) { return actor_.forward(inputs, BatchNormMode::train); }

  /// One step's worth of episodes. Balanced plans draw the GAN trainer's
  /// quantities from `rng` in its order (critic phase: real samples, then
  /// fake noise; actor phase: fake noise) and everything else from the side
  /// stream.
  std::vector<Episode> play(Rng& rng, bool critic_phase) {
    const std::size_t B = cfg_.gan.batch, nd = cfg_.gan.noise_dim, d = cfg_.gan.data.dim();
    std::vector<Episode> eps;
    std::vector<Branch> branch;
    auto input_from = [&](Rng& noise, Rng& obs) {
      std::vector<double> in(nd);
      for (double& v : in) v = noise.normal();
      if (!cfg_.blind) {
        const Tensor o = sample_toy(env_.data, 1, obs);
        in.insert(in.end(), o.data().begin(), o.data().end());
      }
      return in;
    };
    const std::vector<double> placeholder(d, 0.0);
    if (cfg_.balanced) {
      for (std::size_t i = 0; i < B; ++i) {
        Episode e{input_from(side_, side_), {}, 1.0};
        e.shown = env_.step(placeholder, critic_phase ? rng : side_, Branch::real).shown;
        eps.push_back(std::move(e));
        branch.push_back(Branch::real);
      }
      for (std::size_t i = 0; i < B; ++i) {
        eps.push_back({input_from(rng, side_), {}, 0.0});
        branch.push_back(Branch::fake);
      }
    } else {
      for (std::size_t i = 0; i < 2 * B; ++i) {
        const Branch b = rng.bernoulli(env_.p_real) ? Branch::real : Branch::fake;
        Episode e{input_from(rng, rng), {}, b == Branch::real ? 1.0 : 0.0};
        if (b == Branch::real) e.shown = env_.step(placeholder, rng, Branch::real).shown;
        eps.push_back(std::move(e));
        branch.push_back(b);
      }
    }
    // Fake branches show the action itself.
    std::vector<std::size_t> fake;
    for (std::size_t i = 0; i < eps.size(); ++i)
      if (branch[i] == Branch::fake) fake.push_back(i);
    if (!fake.empty()) {
      if (cfg_.gan.exact_generator) {
        const Tensor x = sample_toy(env_.data, fake.size(), rng);
        for (std::size_t k = 0; k < fake.size(); ++k)
          eps[fake[k]].shown.assign(x.data().begin() + static_cast<std::ptrdiff_t>(k * d),
                                    x.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
      } else {
        const Tensor a = act(inputs_of(eps, fake));
        for (std::size_t k = 0; k < fake.size(); ++k)
          eps[fake[k]].shown = env_.step(a.data().subspan(k * d, d), rng, Branch::fake).shown;
      }
    }
    return eps;
  }

  /// Σ over branches of the mean divergence between Q(shown) and the reward;
  /// gradient lands on the critic.
  double critic_step(const std::vector<Episode>& eps) {
    std::vector<std::size_t> real, fake;
    for (std::size_t i = 0; i < eps.size(); ++i) (eps[i].reward == 1.0 ? real : fake).push_back(i);
    Tape t;
    Bindings in;
    std::optional<Var> loss;
    auto term = [&](const std::vector<std::size_t>& rows, const std::string& name, double y) {
      if (rows.empty()) return;
      const std::size_t d = eps[rows.front()].shown.size();
      Tensor w({rows.size(), d});
      for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy(eps[rows[k]].shown.begin(), eps[rows[k]].shown.end(),
                  w.values().begin() + static_cast<std::ptrdiff_t>(k * d));
      in.emplace(name, std::move(w));
      in.emplace(name + "_y", Tensor({rows.size(), 1}, y));
      Var q = critic_.build(t, t.input(name), BatchNormMode::train);
      Var yv = t.input(name + "_y");
      Var l = cfg_.critic_loss == Divergence::cross_entropy ? t.bce(q, yv) : t.mean(t.square(t.sub(yv, q)));
      loss = loss ? t.add(*loss, l) : l;
    };
    term(real, "real", 1.0);
    term(fake, "fake", 0.0);
    if (!loss) throw UsageError("critic step needs at least one episode");
    t.evaluate(in);
    t.backward(*loss, {&critic_.params()});
    return t.value(*loss).item();
  }

  /// DPG through the critic with the configured scale; real-branch episodes
  /// are masked out unless masking is disabled. Returns the matching
  /// generator-style objective over the contributing episodes.
  double actor_step(const std::vector<Episode>& eps) {
    if (cfg_.gan.exact_generator) {
      actor_.params().zero_grad();
      return 0.0;
    }
    std::vector<std::size_t> all(eps.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Tape t;
    Var a = actor_.build(t, t.input("z"), BatchNormMode::train);
    t.evaluate({{"z", inputs_of(eps, all)}});
    ActionGradient g = scaled_actor_gradient(critic_, t.value(a), cfg_.scaling);
    std::vector<double> rewards(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) rewards[i] = eps[i].reward;
    const std::size_t kept = cfg_.mask_real ? masked_actor_update(rewards, g.grad) : eps.size();
    if (kept == 0) {
      actor_.params().zero_grad();
      return 0.0;
    }
    const double inv = 1.0 / static_cast<double>(kept);
    std::vector<double> seed(g.grad.size());
    for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = -g.grad[i] * inv;
    t.backward_seeded(a, seed, {&actor_.params()});
    double obj = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (cfg_.mask_real && rewards[i] == 1.0) continue;
      const double q = g.q[i];
      switch (cfg_.scaling) {
        case ScalingMode::none: obj -= q; break;
        case ScalingMode::minimax: obj += clamped_log(1.0 - q); break;
        case ScalingMode::non_saturating: obj -= clamped_log(q); break;
      }
    }
    return obj * inv;
  }

  /// Fresh samples from the actor (or the data law in exact mode).
  Tensor sample(std::size_t n, Rng& rng) {
    if (cfg_.gan.exact_generator) return sample_toy(env_.data, n, rng);
    const std::size_t nd = cfg_.gan.noise_dim;
    Tensor in = standard_normal(n, nd, rng);
    if (!cfg_.blind) {
      const std::size_t d = env_.data.dim();
      const Tensor o = sample_toy(env_.data, n, rng);
      Tensor both({n, nd + d});
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(in.data().begin() + static_cast<std::ptrdiff_t>(i * nd), nd,
                    both.values().begin() + static_cast<std::ptrdiff_t>(i * (nd + d)));
        std::copy_n(o.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                    both.values().begin() + static_cast<std::ptrdiff_t>(i * (nd + d) + nd));
      }
      in = std::move(both);
    }
    return actor_.forward(in, BatchNormMode::infer);
  }

  Tensor value(const Tensor& x) { return critic_.forward(x, BatchNormMode::infer); }

 private:
  static Tensor inputs_of(const std::vector<Episode>& eps, const std::vector<std::size_t>& rows) {
    const std::size_t k = eps[rows.front()].input.size();
    Tensor t({rows.size(), k});
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(eps[rows[r]].input.begin(), eps[rows[r]].input.end(),
                t.values().begin() + static_cast<std::ptrdiff_t>(r * k));
    return t;
  }

  BridgeConfig cfg_;
  GanMdp env_;
  Mlp actor_;
  Mlp critic_;
  Rng side_;
};

/// Critic (outer) and actor (inner) objectives under the bilevel engine.
inline BilevelProblem bridge_problem(BridgeLearner& learner) {
  BilevelProblem p;
  p.outer = &learner.critic().params();
  p.inner = &learner.actor().params();
  p.outer_objective = [&learner](Rng& rng) { return learner.critic_step(learner.play(rng, true)); };
  p.inner_objective = [&learner](Rng& rng) { return learner.actor_step(learner.play(rng, false)); };
  return p;
}

// ---------------------------------------------------------------------------
// Probe

struct ProbeReport {
  double mean = 0.0;       // over the 50/50 batch
  double real_mean = 0.0;
  double fake_mean = 0.0;
};

/// Mean critic value over n real and n generated samples.
inline ProbeReport critic_value_probe(BridgeLearner& learner, std::size_t n, Rng& rng) {
  if (n < 1) throw ConfigError("probe needs at least one sample per half");
  const Tensor real = sample_toy(learner.env().data, n, rng);
  const Tensor fake = learner.sample(n, rng);
  auto mean = [](const Tensor& v) {
    double s = 0.0;
    for (double x : v.data()) s += x;
    return s / static_cast<double>(v.size());
  };
  ProbeReport r;
  r.real_mean = mean(learner.value(real));
  r.fake_mean = mean(learner.value(fake));
  r.mean = 0.5 * (r.real_mean + r.fake_mean);
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct BridgeRun {
  RunRecord record;
  std::unique_ptr<BridgeLearner> learner;
  EvalReport final_report;
  ProbeReport probe;
};

namespace detail {

struct BridgeSeeds {
  Rng init, eval, side;
  std::uint64_t train = 0;
};

// Mirrors the GAN trainer's derivation so a blind learner starts from the
// same parameters and training stream as train_gan with the same seed.
inline BridgeSeeds bridge_seeds(std::uint64_t seed) {
  Rng root(seed);
  BridgeSeeds s{root.split(), root.split(), Rng(0), 0};
  s.train = root.next_u64();
  s.side = root.split();
  return s;
}

inline EvalReport evaluate_bridge(BridgeLearner& learner, const EvalConfig& ec, Rng& rng) {
  return evaluate_sampler(
      learner.env().data, ec, rng, [&](std::size_t n, Rng& r) { return learner.sample(n, r); },
      [&](const Tensor& x) { return learner.value(x); });
}

}  // namespace detail

/// Modified actor-critic on the GAN MDP under the bilevel engine.
inline BridgeRun train_bridge_ac(const BridgeConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  cfg.validate();
  auto seeds = detail::bridge_seeds(seed);
  BridgeRun run;
  run.record.kind = "bridge";
  run.learner = std::make_unique<BridgeLearner>(cfg, seeds.init, seeds.side);
  BridgeLearner& learner = *run.learner;

  BilevelDescent engine(bridge_problem(learner), cfg.gan.schedule, cfg.gan.stabilizers, seeds.train);
  Stopwatch clock;
  RoundRecord last;
  const std::size_t rounds = cfg.gan.schedule.rounds;
  while (engine.round() < rounds) {
    last = engine.step_round();
    MetricRow row{last.round, 0.0, {{"critic_loss", last.outer_loss}, {"actor_loss", last.inner_loss}}};
    row.metrics.insert(row.metrics.end(), last.metrics.begin(), last.metrics.end());
    if (cfg.gan.stabilizers.freeze) {
      row.metrics.emplace_back("critic_updated", last.gate.update_outer ? 1.0 : 0.0);
      row.metrics.emplace_back("actor_updated", last.gate.update_inner ? 1.0 : 0.0);
    }
    const bool final_round = engine.round() == rounds;
    if (final_round || engine.round() % cfg.gan.eval_every == 0) {
      run.final_report = detail::evaluate_bridge(learner, cfg.gan.eval, seeds.eval);
      run.probe = critic_value_probe(learner, cfg.gan.eval.accuracy_samples, seeds.eval);
      auto em = run.final_report.as_metrics();
      row.metrics.insert(row.metrics.end(), em.begin(), em.end());
      row.metrics.emplace_back("probe_value", run.probe.mean);
    }
    row.wall_ms = clock.elapsed_ms();
    emit_row(run.record, sink, std::move(row));
  }
  run.record.summary = {{"critic_loss", last.outer_loss}, {"actor_loss", last.inner_loss}};
  auto em = run.final_report.as_metrics();
  run.record.summary.insert(run.record.summary.end(), em.begin(), em.end());
  run.record.summary.emplace_back("probe_value", run.probe.mean);
  return run;
}

// ---------------------------------------------------------------------------
// Lockstep equivalence

struct EquivalenceRow {
  std::size_t round = 0;
  double divergence = 0.0;
  bool pass = true;
};

struct EquivalenceReport {
  std::vector<EquivalenceRow> rows;
  double max_divergence = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::optional<std::size_t> first_failure;
};

namespace detail {

// ‖a − b‖ / ‖a‖ over a pair of stores. For a sighted actor the observation
// columns of the first layer are skipped.
inline double relative_divergence(const ParamStore& ref, const ParamStore& other, std::size_t first_cols = 0) {
  if (ref.size() != other.size()) throw ConfigError("parameter stores differ in tensor count");
  double diff = 0.0, norm = 0.0;
  auto it = other.begin();
  for (const auto& e : ref) {
    const auto& a = e.tensor;
    const auto& b = it->tensor;
    if (e.name != it->name) throw ConfigError("parameter layout mismatch at '" + e.name + "'");
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        norm += a[i] * a[i];
      }
    } else {
      if (first_cols == 0 || a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() || a.cols() != first_cols)
        throw ConfigError("parameter layout mismatch at '" + e.name + "'");
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < first_cols; ++c) {
          const double x = a.at(r, c), y = b.at(r, c);
          diff += (x - y) * (x - y);
          norm += x * x;
        }
    }
    ++it;
  }
  return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300);
}

inline void check_arms_match(const GanConfig& g, const BridgeConfig& b) {
  MlpSpec actor = b.actor_spec();
  if (!b.blind) actor.inputs -= b.gan.data.dim();
  if (!(actor == g.generator_spec()) || !(b.critic_spec() == g.discriminator_spec()))
    throw ConfigError("the two arms need identical network architectures");
  const auto& s = g.schedule;
  const auto& t = b.gan.schedule;
  if (g.batch != b.gan.batch || g.noise_dim != b.gan.noise_dim || g.data.means != b.gan.data.means ||
      g.data.scales != b.gan.data.scales || g.data.weights != b.gan.data.weights)
    throw ConfigError("the two arms need the same data, batch and noise");
  if (s.inner_steps != t.inner_steps || s.outer_steps != t.outer_steps || s.outer_lr != t.outer_lr ||
      s.inner_lr != t.inner_lr || s.mode != t.mode || s.optimizer != t.optimizer || s.beta1 != t.beta1 ||
      s.beta2 != t.beta2 || s.final_lr_scale != t.final_lr_scale)
    throw ConfigError("the two arms need the same update schedule");
  if (g.smoothing.epsilon != 0.0 || g.replay || g.exact_generator || g.stabilizers.freeze ||
      g.stabilizers.outer_history || g.stabilizers.inner_history)
    throw ConfigError("the GAN arm must run without smoothing, replay, exact sampling or stabilizers");
}

}  // namespace detail

/// Runs the GAN trainer and the bridge learner in lockstep from identical
/// parameters and a shared randomness plan, comparing all parameters after
/// every round.
inline EquivalenceReport equivalence_check(const GanConfig& gan_arm, const BridgeConfig& bridge_arm, std::uint64_t seed,
                                           std::size_t rounds, double tolerance) {
  if (rounds < 1) throw ConfigError("equivalence check needs at least one round");
  GanConfig gc = gan_arm;
  gc.schedule.rounds = rounds;
  BridgeConfig bc = bridge_arm;
  bc.gan.schedule.rounds = rounds;
  bc.balanced = true;
  gc.validate();
  bc.validate();
  detail::check_arms_match(gc, bc);

  auto seeds = detail::bridge_seeds(seed);
  Rng init_copy = seeds.init;
  GanModel model(gc, seeds.init);
  BridgeLearner learner(bc, init_copy, seeds.side);
  learner.critic().assign(model.discriminator());
  const std::size_t nd = gc.noise_dim;
  if (bc.blind) {
    learner.actor().assign(model.generator());
  } else {
    // Shared weights everywhere except the observation columns, which keep
    // their own initialisation.
    auto dst = learner.actor().params().begin();
    for (const auto& e : model.generator().params()) {
      const auto& src = e.tensor;
      if (src.shape() == dst->tensor.shape()) {
        std::copy(src.data().begin(), src.data().end(), dst->tensor.values().begin());
      } else {
        for (std::size_t r = 0; r < src.rows(); ++r)
          for (std::size_t c = 0; c < nd; ++c) dst->tensor.at(r, c) = src.at(r, c);
      }
      ++dst;
    }
  }

  std::optional<ReplayBuffer<std::vector<double>>> unused;
  BilevelDescent gan(detail::gan_problem(model, gc, unused), gc.schedule, gc.stabilizers, seeds.train);
  BilevelDescent ac(bridge_problem(learner), bc.gan.schedule, bc.gan.stabilizers, seeds.train);

  EquivalenceReport rep;
  rep.tolerance = tolerance;
  for (std::size_t r = 0; r < rounds; ++r) {
    gan.step_round();
    ac.step_round();
    const double dv = std::max(detail::relative_divergence(model.generator().params(), learner.actor().params(),
                                                           bc.blind ? 0 : nd),
                               detail::relative_divergence(model.discriminator().params(), learner.critic().params()));
    const bool ok = dv < tolerance;
    rep.rows.push_back({r, dv, ok});
    rep.max_divergence = std::max(rep.max_divergence, dv);
    if (!ok && !rep.first_failure) rep.first_failure = r;
    rep.passed = rep.passed && ok;
  }
  return rep;
}

/// Columns round, max_rel_divergence, pass.
inline void write_equivalence_csv(const std::string& path, const EquivalenceReport& rep) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out.precision(17);
  out << "round,max_rel_divergence,pass\n";
  for (const auto& r : rep.rows) out << r.round << "," << r.divergence << "," << (r.pass ? 1 : 0) << "\n";
}

/// The matched check plus each modification disabled on its own.
struct BridgeAblation {
  std::string name;
  EquivalenceReport report;
};

inline std::vector<BridgeAblation> bridge_ablations(const GanConfig& gan_arm, std::uint64_t seed, std::size_t rounds,
                                                    double tolerance) {
  std::vector<BridgeAblation> out;
  auto run = [&](const std::string& name, BridgeConfig b) {
    out.push_back({name, equivalence_check(gan_arm, b, seed, rounds, tolerance)});
  };
  const BridgeConfig base = BridgeConfig::matching(gan_arm);
  run("matched", base);
  BridgeConfig b = base;
  b.blind = false;
  run("sighted_actor", b);
  b = base;
  b.critic_loss = Divergence::squared;
  run("squared_critic", b);
  b = base;
  b.scaling = ScalingMode::none;
  run("no_scaling", b);
  b = base;
  b.mask_real = false;
  run("no_masking", b);
  return out;
}

}  // namespace advlab
