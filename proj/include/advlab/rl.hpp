#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "advlab/bilevel.hpp"
#include "advlab/error.hpp"
#include "advlab/layers.hpp"
#include "advlab/random.hpp"
#include "advlab/replay.hpp"
#include "advlab/run.hpp"
#include "advlab/tape.hpp"

namespace advlab {

// Q(s,a) = E[Σ_{k≥0} γ^k r_{t+k}], so the bootstrap target is r + γ·Q(s′, a′).

// ---------------------------------------------------------------------------
// Environments

struct StepResult {
  std::vector<double> next_state;
  double reward = 0.0;
  bool terminal = false;
};

/// Pure step machine: all randomness comes from the caller's generator.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual std::size_t state_dim() const = 0;
  /// Number of discrete actions, or 0 for a continuous box.
  virtual std::size_t num_actions() const = 0;
  /// Continuous action dimension (1 for discrete actions, stored as an index).
  virtual std::size_t action_dim() const = 0;
  virtual double gamma() const = 0;
  virtual std::size_t horizon() const = 0;
  virtual std::vector<double> reset(Rng& rng) const = 0;
  virtual StepResult step(const std::vector<double>& s, const std::vector<double>& a, Rng& rng) const = 0;
};

/// One-step continuous bandit with reward −‖a − a*‖².
class QuadraticBandit final : public Environment {
 public:
  QuadraticBandit(std::size_t dim = 1, double target = 1.5) : dim_(dim), target_(target) {
    if (dim < 1 || dim > 2) throw ConfigError("bandit dimension must be 1 or 2");
  }
  std::string name() const override { return "bandit"; }
  std::size_t state_dim() const override { return 1; }
  std::size_t num_actions() const override { return 0; }
  std::size_t action_dim() const override { return dim_; }
  double gamma() const override { return 0.0; }
  std::size_t horizon() const override { return 1; }
  double target() const { return target_; }

  std::vector<double> reset(Rng&) const override { return {0.0}; }
  StepResult step(const std::vector<double>&, const std::vector<double>& a, Rng&) const override {
    return {{0.0}, reward(a), true};
  }
  double reward(const std::vector<double>& a) const {
    if (a.size() != dim_) throw UsageError("bandit action has the wrong dimension");
    double r = 0.0;
    for (double v : a) r -= (v - target_) * (v - target_);
    return r;
  }

 private:
  std::size_t dim_;
  double target_;
};

/// Finite MDP in explicit tabular form, for dynamic-programming oracles.
struct TabularMdp {
  std::size_t states = 0;
  std::size_t actions = 0;
  std::vector<double> transition;  // P[s][a][s'] flattened
  std::vector<double> reward;      // R(s)
  std::vector<double> initial;     // p0(s)
  double gamma = 0.9;

  double p(std::size_t s, std::size_t a, std::size_t s2) const { return transition[(s * actions + a) * states + s2]; }
};

struct ChainSpec {
  std::vector<double> rewards{0.5, 0.0, 0.0, 0.0, 1.0};
  double gamma = 0.6;
  double slip = 0.0;          // probability the chosen move is reversed
  double reward_noise = 0.0;  // std of additive Gaussian reward noise
  std::size_t horizon = 20;   // truncation; never marks a transition terminal
  bool one_step = false;      // every transition is terminal

  friend bool operator==(const ChainSpec&, const ChainSpec&) = default;
};

/// Chain of n states, action 0 moves left, 1 moves right (clamped at the
/// ends). The reward is R(s) of the state acted in; episodes start uniformly.
class ChainMdp final : public Environment {
 public:
  explicit ChainMdp(ChainSpec spec) : spec_(std::move(spec)) {
    if (spec_.rewards.size() < 2 || spec_.rewards.size() > 5) throw ConfigError("chain needs 2 to 5 states");
    if (!(spec_.gamma >= 0.0 && spec_.gamma < 1.0)) throw ConfigError("chain discount must lie in [0, 1)");
    if (!(spec_.slip >= 0.0 && spec_.slip <= 1.0)) throw ConfigError("slip probability must lie in [0, 1]");
    if (!(spec_.reward_noise >= 0.0)) throw ConfigError("reward noise must be non-negative");
    if (spec_.horizon < 1) throw ConfigError("horizon must be at least 1");
  }
  std::string name() const override { return "chain"; }
  std::size_t state_dim() const override { return 1; }
  std::size_t num_actions() const override { return 2; }
  std::size_t action_dim() const override { return 1; }
  double gamma() const override { return spec_.gamma; }
  std::size_t horizon() const override { return spec_.one_step ? 1 : spec_.horizon; }
  std::size_t states() const { return spec_.rewards.size(); }
  const ChainSpec& spec() const { return spec_; }

  std::vector<double> reset(Rng& rng) const override { return {static_cast<double>(rng.index(states()))}; }

  StepResult step(const std::vector<double>& s, const std::vector<double>& a, Rng& rng) const override {
    const auto si = index_of(s.at(0), states(), "state");
    auto ai = index_of(a.at(0), 2, "action");
    double r = spec_.rewards[si];
    if (spec_.reward_noise > 0.0) r += spec_.reward_noise * rng.normal();
    if (spec_.slip > 0.0 && rng.bernoulli(spec_.slip)) ai = 1 - ai;
    return {{static_cast<double>(move(si, ai))}, r, spec_.one_step};
  }

  std::size_t move(std::size_t s, std::size_t a) const {
    if (a == 0) return s == 0 ? 0 : s - 1;
    return std::min(s + 1, states() - 1);
  }

  TabularMdp tabular() const {
    const std::size_t n = states();
    TabularMdp m{n, 2, std::vector<double>(n * 2 * n, 0.0), spec_.rewards, std::vector<double>(n, 1.0 / n),
                 spec_.one_step ? 0.0 : spec_.gamma};
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t a = 0; a < 2; ++a) {
        m.transition[(s * 2 + a) * n + move(s, a)] += 1.0 - spec_.slip;
        m.transition[(s * 2 + a) * n + move(s, 1 - a)] += spec_.slip;
      }
    return m;
  }

  static std::size_t index_of(double v, std::size_t n, const char* what) {
    const auto i = static_cast<std::ptrdiff_t>(std::llround(v));
    if (i < 0 || static_cast<std::size_t>(i) >= n || static_cast<double>(i) != v)
      throw UsageError(std::string("invalid chain ") + what + " " + std::to_string(v));
    return static_cast<std::size_t>(i);
  }

 private:
  ChainSpec spec_;
};

// ---------------------------------------------------------------------------
// Dynamic-programming oracles

using Table = std::vector<std::vector<double>>;  // [state][action]

/// Optimal action values by value iteration.
inline Table value_iteration(const TabularMdp& m, double tol = 1e-14, std::size_t max_iter = 100000) {
  Table q(m.states, std::vector<double>(m.actions, 0.0));
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::vector<double> v(m.states);
    for (std::size_t s = 0; s < m.states; ++s) v[s] = *std::max_element(q[s].begin(), q[s].end());
    double delta = 0.0;
    for (std::size_t s = 0; s < m.states; ++s)
      for (std::size_t a = 0; a < m.actions; ++a) {
        double next = 0.0;
        for (std::size_t s2 = 0; s2 < m.states; ++s2) next += m.p(s, a, s2) * v[s2];
        const double nq = m.reward[s] + m.gamma * next;
        delta = std::max(delta, std::abs(nq - q[s][a]));
        q[s][a] = nq;
      }
    if (delta < tol) break;
  }
  return q;
}

inline std::vector<std::size_t> greedy_actions(const Table& q) {
  std::vector<std::size_t> out;
  for (const auto& row : q) out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  return out;
}

/// Solves A x = b in place by Gaussian elimination with partial pivoting.
inline std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (std::abs(a[piv * n + c]) < 1e-300) throw NumericError("singular linear system");
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t r = n; r-- > 0;) {
    double s = b[r];
    for (std::size_t k = r + 1; k < n; ++k) s -= a[r * n + k] * x[k];
    x[r] = s / a[r * n + r];
  }
  return x;
}

struct PolicyValues {
  std::vector<double> v;
  Table q;
  std::vector<double> visitation;  // Σ_t γ^t P(s_t = s), unnormalized
  double objective = 0.0;          // Σ_s p0(s) V(s)
};

/// Exact evaluation of a stochastic policy π[s][a].
inline PolicyValues evaluate_policy(const TabularMdp& m, const Table& pi) {
  const std::size_t n = m.states;
  std::vector<double> pp(n * n, 0.0);  // P_π[s][s']
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < m.actions; ++a)
      for (std::size_t s2 = 0; s2 < n; ++s2) pp[s * n + s2] += pi[s][a] * m.p(s, a, s2);
  std::vector<double> lhs(n * n), lhs_t(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      lhs[i * n + j] = (i == j ? 1.0 : 0.0) - m.gamma * pp[i * n + j];
      lhs_t[j * n + i] = lhs[i * n + j];
    }
  PolicyValues out;
  out.v = solve_dense(lhs, m.reward);
  out.visitation = solve_dense(lhs_t, m.initial);
  out.q.assign(n, std::vector<double>(m.actions));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < m.actions; ++a) {
      double next = 0.0;
      for (std::size_t s2 = 0; s2 < n; ++s2) next += m.p(s, a, s2) * out.v[s2];
      out.q[s][a] = m.reward[s] + m.gamma * next;
    }
  for (std::size_t s = 0; s < n; ++s) out.objective += m.initial[s] * out.v[s];
  return out;
}

inline Table softmax_table(const Table& logits) {
  Table pi = logits;
  for (auto& row : pi) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  return pi;
}

/// ∇_θ J for a tabular softmax policy with logits θ[s][a], by enumeration:
/// ∂J/∂θ[s][a] = d(s)·π(a|s)·(Q(s,a) − V(s)).
inline Table exact_policy_gradient(const TabularMdp& m, const Table& logits) {
  const Table pi = softmax_table(logits);
  const PolicyValues pv = evaluate_policy(m, pi);
  Table g(m.states, std::vector<double>(m.actions));
  for (std::size_t s = 0; s < m.states; ++s)
    for (std::size_t a = 0; a < m.actions; ++a) g[s][a] = pv.visitation[s] * pi[s][a] * (pv.q[s][a] - pv.v[s]);
  return g;
}

// ---------------------------------------------------------------------------
// Transitions, replay, target networks

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool terminal = false;
};

using TransitionReplay = ReplayBuffer<Transition>;

inline void replay_push(TransitionReplay& buffer, Transition t) { buffer.push(std::move(t)); }

inline std::vector<Transition> replay_sample(const TransitionReplay& buffer, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return buffer.sample(n, rng);
}

/// θ_target ← τ·θ_live + (1−τ)·θ_target, tensor by tensor.
inline void target_update(ParamStore& target, const ParamStore& live, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("target blend factor must lie in (0, 1]");
  target.check_same_layout(live);
  auto it = live.begin();
  for (auto& e : target) {
    auto dst = e.tensor.data();
    auto src = it->tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau == 1.0 ? src[i] : tau * src[i] + (1.0 - tau) * dst[i];
    ++it;
  }
}

// ---------------------------------------------------------------------------
// Critics

enum class CriticFeatures { raw, quadratic, one_hot };

inline const char* to_string(CriticFeatures f) {
  switch (f) {
    case CriticFeatures::raw: return "raw";
    case CriticFeatures::quadratic: return "quadratic";
    case CriticFeatures::one_hot: return "one_hot";
  }
  return "?";
}

enum class Divergence { squared, cross_entropy };

inline const char* to_string(Divergence d) { return d == Divergence::squared ? "squared" : "cross_entropy"; }

inline Divergence parse_divergence(const std::string& s) {
  if (s == "squared") return Divergence::squared;
  if (s == "cross_entropy") return Divergence::cross_entropy;
  throw ConfigError("unknown critic divergence '" + s + "'");
}

struct CriticSpec {
  std::size_t state_dim = 1;
  std::size_t action_dim = 1;
  /// raw: Q = net([s, a]); quadratic: Q = net([s, a, a²]); one_hot: tabular
  /// Q[s][a] over `states` × `actions` indices.
  CriticFeatures features = CriticFeatures::raw;
  std::size_t states = 0;
  std::size_t actions = 0;
  std::vector<std::size_t> hidden{};
  Activation activation = Activation::relu;
  Activation output = Activation::linear;
  bool batch_norm = false;

  friend bool operator==(const CriticSpec&, const CriticSpec&) = default;
};

class Critic {
 public:
  Critic(CriticSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.features == CriticFeatures::one_hot) {
      if (spec_.states < 1 || spec_.actions < 1) throw ConfigError("tabular critic needs state and action counts");
      table_.add("q", Tensor({spec_.states, spec_.actions}));
      return;
    }
    const std::size_t in =
        spec_.state_dim + spec_.action_dim * (spec_.features == CriticFeatures::quadratic ? 2 : 1);
    net_ = Mlp({.inputs = in,
                .hidden = spec_.hidden,
                .outputs = 1,
                .activation = spec_.activation,
                .output_activation = spec_.output,
                .batch_norm = spec_.batch_norm},
               rng);
  }

  Critic(const Critic&) = delete;
  Critic& operator=(const Critic&) = delete;

  const CriticSpec& spec() const { return spec_; }
  bool tabular() const { return spec_.features == CriticFeatures::one_hot; }
  ParamStore& params() { return tabular() ? table_ : net_.params(); }
  const ParamStore& params() const { return tabular() ? table_ : net_.params(); }

  /// Q(s, a) as an [B, 1] node. For the tabular critic `s` and `a` are
  /// one-hot rows (see encode()).
  Var build(Tape& t, Var s, Var a, BatchNormMode mode = BatchNormMode::train) {
    switch (spec_.features) {
      case CriticFeatures::raw: return net_.build(t, t.concat_cols(s, a), mode);
      case CriticFeatures::quadratic: return net_.build(t, t.concat_cols(t.concat_cols(s, a), t.square(a)), mode);
      case CriticFeatures::one_hot: {
        Var rows = t.matmul(s, t.param(table_, "q"));
        Var picked = t.mul(rows, a);
        return t.matmul(picked, t.constant(Tensor({spec_.actions, 1}, 1.0)));
      }
    }
    throw UsageError("unknown critic features");
  }

  /// Converts [B,1] index columns to one-hot rows for the tabular critic;
  /// identity otherwise.
  std::pair<Tensor, Tensor> encode(const Tensor& states, const Tensor& actions) const {
    if (!tabular()) return {states, actions};
    return {one_hot(states, spec_.states), one_hot(actions, spec_.actions)};
  }

  /// Q(s, a) without recording gradients.
  Tensor values(const Tensor& states, const Tensor& actions) {
    auto [s, a] = encode(states, actions);
    Tape t;
    Var q = build(t, t.input("s"), t.input("a"), BatchNormMode::infer);
    t.evaluate({{"s", s}, {"a", a}});
    return t.value(q);
  }

  /// Q table for the tabular critic.
  Table table() const {
    if (!tabular()) throw UsageError("only the tabular critic has a Q table");
    const Tensor& q = table_.get("q");
    Table out(spec_.states, std::vector<double>(spec_.actions));
    for (std::size_t s = 0; s < spec_.states; ++s)
      for (std::size_t a = 0; a < spec_.actions; ++a) out[s][a] = q.at(s, a);
    return out;
  }

  void assign(const Critic& other) {
    if (!(other.spec_ == spec_)) throw ConfigError("critic architectures differ");
    if (tabular()) table_.assign_values(other.table_);
    else net_.assign(other.net_);
  }

  static Tensor one_hot(const Tensor& idx, std::size_t n) {
    Tensor out({idx.rows(), n});
    for (std::size_t i = 0; i < idx.rows(); ++i) out.values()[i * n + ChainMdp::index_of(idx[i * idx.cols()], n, "index")] = 1.0;
    return out;
  }

 private:
  CriticSpec spec_;
  Mlp net_;
  ParamStore table_;
};

/// Shadow copy of a critic blended toward the live one.
class TargetNetwork {
 public:
  TargetNetwork(const Critic& live, double tau, Rng& rng) : shadow_(live.spec(), rng), tau_(tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("target blend factor must lie in (0, 1]");
    shadow_.assign(live);
  }
  void update(const Critic& live) { target_update(shadow_.params(), live.params(), tau_); }
  Critic& critic() { return shadow_; }
  double tau() const { return tau_; }

 private:
  Critic shadow_;
  double tau_;
};

// ---------------------------------------------------------------------------
// Actors

enum class ActorKind { deterministic, gaussian, softmax };

inline const char* to_string(ActorKind k) {
  switch (k) {
    case ActorKind::deterministic: return "deterministic";
    case ActorKind::gaussian: return "gaussian";
    case ActorKind::softmax: return "softmax";
  }
  return "?";
}

inline ActorKind parse_actor_kind(const std::string& s) {
  if (s == "deterministic") return ActorKind::deterministic;
  if (s == "gaussian") return ActorKind::gaussian;
  if (s == "softmax") return ActorKind::softmax;
  throw ConfigError("unknown actor kind '" + s + "'");
}

struct ActorSpec {
  ActorKind kind = ActorKind::deterministic;
  std::size_t state_dim = 1;
  std::size_t action_dim = 1;
  /// Tabular softmax policy extents.
  std::size_t states = 0;
  std::size_t actions = 0;
  std::vector<std::size_t> hidden{};
  Activation activation = Activation::relu;
  bool batch_norm = false;
  double init_log_scale = -1.0;  // Gaussian kind
};

/// Mean and log-scale heads of a Gaussian actor.
struct GaussianHeads {
  Var mean;
  Var log_scale;
};

class Actor {
 public:
  Actor(ActorSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.kind == ActorKind::softmax) {
      if (spec_.states < 1 || spec_.actions < 2) throw ConfigError("softmax actor needs states and >= 2 actions");
      table_.add("logits", Tensor({spec_.states, spec_.actions}));
      return;
    }
    const std::size_t d = spec_.action_dim;
    net_ = Mlp({.inputs = spec_.state_dim,
                .hidden = spec_.hidden,
                .outputs = spec_.kind == ActorKind::gaussian ? 2 * d : d,
                .activation = spec_.activation,
                .output_activation = Activation::linear,
                .batch_norm = spec_.batch_norm},
               rng);
    if (spec_.kind == ActorKind::gaussian) {
      auto& b = net_.params().get("l" + std::to_string(spec_.hidden.size()) + ".b");
      for (std::size_t j = d; j < 2 * d; ++j) b.values()[j] = spec_.init_log_scale;
    }
  }

  Actor(const Actor&) = delete;
  Actor& operator=(const Actor&) = delete;

  const ActorSpec& spec() const { return spec_; }
  ActorKind kind() const { return spec_.kind; }
  ParamStore& params() { return spec_.kind == ActorKind::softmax ? table_ : net_.params(); }
  const ParamStore& params() const { return spec_.kind == ActorKind::softmax ? table_ : net_.params(); }

  /// Deterministic action μ(s).
  Var build_deterministic(Tape& t, Var s, BatchNormMode mode = BatchNormMode::train) {
    require(ActorKind::deterministic);
    return net_.build(t, s, mode);
  }

  GaussianHeads build_gaussian(Tape& t, Var s, BatchNormMode mode = BatchNormMode::train) {
    require(ActorKind::gaussian);
    Var out = net_.build(t, s, mode);
    const std::size_t d = spec_.action_dim;
    return {t.slice_cols(out, 0, d), t.slice_cols(out, d, 2 * d)};
  }

  /// μ + exp(log σ)·ξ.
  static Var reparameterize(Tape& t, const GaussianHeads& h, Var xi) {
    return t.add(h.mean, t.mul(t.exp(h.log_scale), xi));
  }

  /// π(·|s) rows from one-hot states.
  Var build_probs(Tape& t, Var s_one_hot) {
    require(ActorKind::softmax);
    return t.softmax_rows(t.matmul(s_one_hot, t.param(table_, "logits")));
  }

  Table probabilities() const {
    require(ActorKind::softmax);
    const Tensor& l = table_.get("logits");
    Table logits(spec_.states, std::vector<double>(spec_.actions));
    for (std::size_t s = 0; s < spec_.states; ++s)
      for (std::size_t a = 0; a < spec_.actions; ++a) logits[s][a] = l.at(s, a);
    return softmax_table(logits);
  }

  Table logits() const {
    require(ActorKind::softmax);
    const Tensor& l = table_.get("logits");
    Table out(spec_.states, std::vector<double>(spec_.actions));
    for (std::size_t s = 0; s < spec_.states; ++s)
      for (std::size_t a = 0; a < spec_.actions; ++a) out[s][a] = l.at(s, a);
    return out;
  }

  /// Greedy/mean action for a batch of states, without exploration.
  Tensor mean_action(const Tensor& states) {
    Tape t;
    Var s = t.input("s");
    Var out;
    if (spec_.kind == ActorKind::softmax) {
      Tensor a({states.rows(), 1});
      const Table pi = probabilities();
      for (std::size_t i = 0; i < states.rows(); ++i) {
        const auto& row = pi[ChainMdp::index_of(states[i], spec_.states, "state")];
        a.values()[i] = static_cast<double>(std::max_element(row.begin(), row.end()) - row.begin());
      }
      return a;
    }
    out = spec_.kind == ActorKind::deterministic ? build_deterministic(t, s, BatchNormMode::infer)
                                                 : build_gaussian(t, s, BatchNormMode::infer).mean;
    t.evaluate({{"s", states}});
    return t.value(out);
  }

  /// Per-row log σ of a Gaussian actor.
  Tensor log_scale(const Tensor& states) {
    Tape t;
    Var ls = build_gaussian(t, t.input("s"), BatchNormMode::infer).log_scale;
    t.evaluate({{"s", states}});
    return t.value(ls);
  }

  /// Behaviour action: μ(s) + exploration·ξ, a Gaussian sample, or a sampled
  /// discrete action.
  Tensor act(const Tensor& states, Rng& rng, double exploration) {
    if (spec_.kind == ActorKind::softmax) {
      const Table pi = probabilities();
      Tensor a({states.rows(), 1});
      for (std::size_t i = 0; i < states.rows(); ++i) {
        const auto& row = pi[ChainMdp::index_of(states[i], spec_.states, "state")];
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t pick = row.size() - 1;
        for (std::size_t k = 0; k < row.size(); ++k) {
          acc += row[k];
          if (u < acc) {
            pick = k;
            break;
          }
        }
        a.values()[i] = static_cast<double>(pick);
      }
      return a;
    }
    Tensor mean = mean_action(states);
    if (spec_.kind == ActorKind::deterministic) {
      for (double& v : mean.values()) v += exploration * rng.normal();
      return mean;
    }
    const Tensor ls = log_scale(states);
    for (std::size_t i = 0; i < mean.size(); ++i) mean.values()[i] += std::exp(ls[i]) * rng.normal();
    return mean;
  }

 private:
  void require(ActorKind k) const {
    if (spec_.kind != k) throw UsageError(std::string("operation needs a ") + to_string(k) + " actor");
  }

  ActorSpec spec_;
  Mlp net_;
  ParamStore table_;
};

// ---------------------------------------------------------------------------
// Targets and updates

namespace detail {
inline Tensor stack_rows(const std::vector<Transition>& batch, std::vector<double> Transition::*field) {
  const std::size_t d = (batch.front().*field).size();
  Tensor t({batch.size(), d});
  for (std::size_t i = 0; i < batch.size(); ++i)
    std::copy((batch[i].*field).begin(), (batch[i].*field).end(), t.values().begin() + static_cast<std::ptrdiff_t>(i * d));
  return t;
}
}  // namespace detail

/// r + γ·Q_boot(s′, a′) for each transition; the bootstrap term is dropped on
/// terminal transitions. a′ is μ(s′) for a deterministic actor, a sample for a
/// Gaussian actor, and the expectation over π(·|s′) for a softmax actor.
/// Computed off-tape, so no gradient ever flows through the target.
inline std::vector<double> td_targets(const std::vector<Transition>& batch, Critic& bootstrap, Actor& actor,
                                      double gamma, Rng* rng = nullptr) {
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) y[i] = batch[i].reward;
  if (gamma == 0.0 || batch.empty()) return y;
  const Tensor next = detail::stack_rows(batch, &Transition::next_state);
  if (actor.kind() == ActorKind::softmax) {
    if (!bootstrap.tabular()) throw ConfigError("softmax actors need the tabular critic");
    const Table q = bootstrap.table();
    const Table pi = actor.probabilities();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch[i].terminal) continue;
      const auto s = ChainMdp::index_of(next[i], q.size(), "state");
      double ev = 0.0;
      for (std::size_t a = 0; a < q[s].size(); ++a) ev += pi[s][a] * q[s][a];
      y[i] += gamma * ev;
    }
    return y;
  }
  Tensor a2 = actor.kind() == ActorKind::gaussian && rng ? actor.act(next, *rng, 0.0) : actor.mean_action(next);
  const Tensor q = bootstrap.values(next, a2);
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (!batch[i].terminal) y[i] += gamma * q[i];
  return y;
}

inline double td_target(const Transition& tr, Critic& bootstrap, Actor& actor, double gamma, Rng* rng = nullptr) {
  return td_targets({tr}, bootstrap, actor, gamma, rng).front();
}

struct CriticStep {
  double loss = 0.0;
  double mean_abs_td = 0.0;
};

/// Divergence between Q(s,a) and fixed targets; gradients land on the critic
/// only. Cross-entropy needs targets in [0,1] and a sigmoid-output critic.
inline CriticStep critic_update(Critic& critic, const Tensor& states, const Tensor& actions,
                                const std::vector<double>& targets, Divergence kind) {
  if (targets.empty() || targets.size() != states.rows() || targets.size() != actions.rows())
    throw UsageError("critic batch sizes disagree");
  if (kind == Divergence::cross_entropy) {
    for (double y : targets)
      if (!(y >= 0.0 && y <= 1.0)) throw UsageError("cross-entropy critic targets must lie in [0, 1]");
    if (critic.spec().output != Activation::sigmoid)
      throw UsageError("cross-entropy critic needs probability outputs");
  }
  auto [s, a] = critic.encode(states, actions);
  Tape t;
  Var q = critic.build(t, t.input("s"), t.input("a"));
  Var y = t.input("y");
  Var loss = kind == Divergence::squared ? t.mean(t.square(t.sub(y, q))) : t.bce(q, y);
  const std::size_t n = targets.size();
  t.evaluate({{"s", s}, {"a", a}, {"y", Tensor({n, 1}, targets)}});
  t.backward(loss, {&critic.params()});
  CriticStep out{t.value(loss).item(), 0.0};
  const Tensor& qv = t.value(q);
  for (std::size_t i = 0; i < n; ++i) out.mean_abs_td += std::abs(targets[i] - qv[i]);
  out.mean_abs_td /= static_cast<double>(n);
  return out;
}

/// −mean Q(s, μ(s)) with gradients on the actor only.
inline double actor_update_dpg(Actor& actor, Critic& critic, const Tensor& states) {
  Tape t;
  Var s = t.input("s");
  Var q = critic.build(t, s, actor.build_deterministic(t, s));
  Var loss = t.neg(t.mean(q));
  t.evaluate({{"s", states}});
  t.backward(loss, {&actor.params()});
  return t.value(loss).item();
}

/// −mean Q(s, μ(s) + σ(s)·ξ) − β·H, gradients on the actor only.
inline double actor_update_svg0(Actor& actor, Critic& critic, const Tensor& states, const Tensor& noise,
                                double entropy_weight = 0.0) {
  Tape t;
  Var s = t.input("s");
  GaussianHeads h = actor.build_gaussian(t, s);
  Var q = critic.build(t, s, Actor::reparameterize(t, h, t.input("xi")));
  Var loss = t.neg(t.mean(q));
  if (entropy_weight != 0.0) {
    Var ent = t.scale(t.sum(t.add_scalar(h.log_scale, 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e))),
                      1.0 / static_cast<double>(states.rows()));
    loss = t.sub(loss, t.scale(ent, entropy_weight));
  }
  t.evaluate({{"s", states}, {"xi", noise}});
  t.backward(loss, {&actor.params()});
  return t.value(loss).item();
}

/// −mean_s Σ_a π(a|s)·Q(s,a) − β·H(π(·|s)) for a softmax actor against a fixed Q table.
inline double actor_update_softmax(Actor& actor, const Table& q, const Tensor& states, double entropy_weight = 0.0) {
  const Tensor s1 = Critic::one_hot(states, actor.spec().states);
  Tensor qrows({states.rows(), actor.spec().actions});
  for (std::size_t i = 0; i < states.rows(); ++i) {
    const auto& row = q.at(ChainMdp::index_of(states[i], q.size(), "state"));
    std::copy(row.begin(), row.end(), qrows.values().begin() + static_cast<std::ptrdiff_t>(i * row.size()));
  }
  Tape t;
  Var p = actor.build_probs(t, t.input("s"));
  const double inv_n = 1.0 / static_cast<double>(states.rows());
  Var loss = t.neg(t.scale(t.sum(t.mul(p, t.input("q"))), inv_n));
  if (entropy_weight != 0.0) {
    Var ent = t.scale(t.neg(t.sum(t.mul(p, t.log(p)))), inv_n);
    loss = t.sub(loss, t.scale(ent, entropy_weight));
  }
  t.evaluate({{"s", s1}, {"q", qrows}});
  t.backward(loss, {&actor.params()});
  return t.value(loss).item();
}

/// Mean policy entropy over a batch of states: closed form for the Gaussian
/// kind, Shannon entropy for the softmax kind.
inline double entropy_bonus(Actor& actor, const Tensor& states) {
  switch (actor.kind()) {
    case ActorKind::deterministic:
      throw ConfigError("entropy is undefined for a deterministic actor");
    case ActorKind::gaussian: {
      const Tensor ls = actor.log_scale(states);
      const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
      double h = 0.0;
      for (double v : ls.data()) h += c + v;
      return h / static_cast<double>(states.rows());
    }
    case ActorKind::softmax: {
      const Table pi = actor.probabilities();
      double h = 0.0;
      for (std::size_t i = 0; i < states.rows(); ++i)
        for (double p : pi[ChainMdp::index_of(states[i], pi.size(), "state")])
          if (p > 0.0) h -= p * std::log(p);
      return h / static_cast<double>(states.rows());
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Compatible critic

struct CompatibleFit {
  std::vector<double> w;
  bool ridge = false;
};

/// Least-squares fit of advantages onto features φ (rows of `features`).
/// Falls back to ridge 1e-6 when the normal equations are singular.
inline CompatibleFit compatible_critic_fit(const std::vector<std::vector<double>>& features,
                                           const std::vector<double>& advantages, double ridge = 1e-6) {
  if (features.empty() || features.size() != advantages.size()) throw UsageError("compatible fit needs matching samples");
  const std::size_t k = features.front().size();
  const double inv_n = 1.0 / static_cast<double>(features.size());
  std::vector<double> g(k * k, 0.0), c(k, 0.0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& f = features[i];
    for (std::size_t r = 0; r < k; ++r) {
      c[r] += f[r] * advantages[i] * inv_n;
      for (std::size_t q = 0; q < k; ++q) g[r * k + q] += f[r] * f[q] * inv_n;
    }
  }
  auto cholesky_solve = [k](std::vector<double> a, const std::vector<double>& b) -> std::optional<std::vector<double>> {
    double scale = 0.0;
    for (std::size_t i = 0; i < k; ++i) scale = std::max(scale, std::abs(a[i * k + i]));
    const double tiny = 1e-12 * std::max(scale, 1e-300);
    for (std::size_t j = 0; j < k; ++j) {
      double d = a[j * k + j];
      for (std::size_t p = 0; p < j; ++p) d -= a[j * k + p] * a[j * k + p];
      if (!(d > tiny)) return std::nullopt;
      a[j * k + j] = std::sqrt(d);
      for (std::size_t i = j + 1; i < k; ++i) {
        double v = a[i * k + j];
        for (std::size_t p = 0; p < j; ++p) v -= a[i * k + p] * a[j * k + p];
        a[i * k + j] = v / a[j * k + j];
      }
    }
    std::vector<double> y(k), x(k);
    for (std::size_t i = 0; i < k; ++i) {
      double v = b[i];
      for (std::size_t p = 0; p < i; ++p) v -= a[i * k + p] * y[p];
      y[i] = v / a[i * k + i];
    }
    for (std::size_t i = k; i-- > 0;) {
      double v = y[i];
      for (std::size_t p = i + 1; p < k; ++p) v -= a[p * k + i] * x[p];
      x[i] = v / a[i * k + i];
    }
    return x;
  };
  if (auto w = cholesky_solve(g, c)) return {*w, false};
  for (std::size_t i = 0; i < k; ++i) g[i * k + i] += ridge;
  auto w = cholesky_solve(g, c);
  if (!w) throw NumericError("compatible critic normal equations are not positive definite");
  return {*w, true};
}

/// ∇_θ log π(a|s) for a tabular softmax policy, flattened over θ[s][a].
inline std::vector<double> softmax_score(const Table& pi, std::size_t s, std::size_t a) {
  const std::size_t m = pi.front().size();
  std::vector<double> f(pi.size() * m, 0.0);
  for (std::size_t b = 0; b < m; ++b) f[s * m + b] = (b == a ? 1.0 : 0.0) - pi[s][b];
  return f;
}

struct CompatibleEstimate {
  std::vector<double> gradient;        // flattened over θ[s][a]
  std::vector<double> standard_error;  // per component
  bool ridge = false;
  std::size_t samples = 0;
};

/// Policy-gradient estimate (1/(1−γ))·mean φ(φᵀw) from `samples` on-policy
/// draws: s from the normalized discounted visitation, a ∼ π(·|s), and a
/// Monte-Carlo return truncated once γ^t < 1e-12. Advantages subtract the
/// per-state mean return.
inline CompatibleEstimate compatible_policy_gradient(const ChainMdp& env, const Table& logits, std::size_t samples,
                                                     Rng& rng) {
  const TabularMdp m = env.tabular();
  const double gamma = m.gamma;
  const Table pi = softmax_table(logits);
  auto draw_action = [&](std::size_t s) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t a = 0; a < m.actions; ++a) {
      acc += pi[s][a];
      if (u < acc) return a;
    }
    return m.actions - 1;
  };
  auto step = [&](std::size_t s, std::size_t a) {
    StepResult r = env.step({static_cast<double>(s)}, {static_cast<double>(a)}, rng);
    return std::pair{static_cast<std::size_t>(r.next_state[0]), r.reward};
  };
  std::size_t truncate = 1;
  while (std::pow(gamma, static_cast<double>(truncate)) >= 1e-12 && truncate < 10000) ++truncate;

  std::vector<std::size_t> states(samples), actions(samples);
  std::vector<double> returns(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    std::size_t s = static_cast<std::size_t>(env.reset(rng)[0]);
    while (rng.uniform() < gamma) s = step(s, draw_action(s)).first;
    const std::size_t a = draw_action(s);
    states[i] = s;
    actions[i] = a;
    double g = 0.0, disc = 1.0;
    std::size_t cur = s, act = a;
    for (std::size_t t = 0; t < truncate; ++t) {
      auto [next, r] = step(cur, act);
      g += disc * r;
      disc *= gamma;
      cur = next;
      act = draw_action(cur);
    }
    returns[i] = g;
  }
  std::vector<double> sum(m.states, 0.0), cnt(m.states, 0.0);
  for (std::size_t i = 0; i < samples; ++i) {
    sum[states[i]] += returns[i];
    cnt[states[i]] += 1.0;
  }
  std::vector<std::vector<double>> phi(samples);
  std::vector<double> adv(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    phi[i] = softmax_score(pi, states[i], actions[i]);
    adv[i] = returns[i] - sum[states[i]] / cnt[states[i]];
  }
  const CompatibleFit fit = compatible_critic_fit(phi, adv);
  const std::size_t k = fit.w.size();
  CompatibleEstimate est;
  est.ridge = fit.ridge;
  est.samples = samples;
  est.gradient.assign(k, 0.0);
  std::vector<double> mean_pa(k, 0.0), sq_pa(k, 0.0);
  const double inv_n = 1.0 / static_cast<double>(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    double proj = 0.0;
    for (std::size_t j = 0; j < k; ++j) proj += phi[i][j] * fit.w[j];
    for (std::size_t j = 0; j < k; ++j) {
      est.gradient[j] += phi[i][j] * proj * inv_n / (1.0 - gamma);
      const double pa = phi[i][j] * adv[i];
      mean_pa[j] += pa * inv_n;
      sq_pa[j] += pa * pa * inv_n;
    }
  }
  est.standard_error.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double var = std::max(sq_pa[j] - mean_pa[j] * mean_pa[j], 0.0);
    est.standard_error[j] = std::sqrt(var * inv_n) / (1.0 - gamma);
  }
  return est;
}

// ---------------------------------------------------------------------------
// Actor-critic training

enum class EnvKind { bandit, chain };

inline const char* to_string(EnvKind k) { return k == EnvKind::bandit ? "bandit" : "chain"; }

inline EnvKind parse_env_kind(const std::string& s) {
  if (s == "bandit") return EnvKind::bandit;
  if (s == "chain") return EnvKind::chain;
  throw ConfigError("unknown environment '" + s + "'");
}

struct AcConfig {
  EnvKind env = EnvKind::bandit;
  std::size_t bandit_dim = 1;
  double bandit_target = 1.5;
  ChainSpec chain{};
  ActorKind actor = ActorKind::deterministic;
  std::vector<std::size_t> actor_hidden{};
  std::vector<std::size_t> critic_hidden{};
  Activation activation = Activation::relu;
  Divergence divergence = Divergence::squared;
  UpdateSchedule schedule{.inner_steps = 1,
                          .outer_steps = 1,
                          .outer_lr = 0.2,
                          .inner_lr = 0.01,
                          .rounds = 5000,
                          .mode = UpdateMode::alternating,
                          .optimizer = OptimizerKind::adam};
  std::size_t batch = 32;
  double exploration = 0.1;  // action noise scale of a deterministic actor
  std::optional<std::size_t> replay_capacity{};
  std::optional<double> target_tau{};
  double entropy = 0.0;
  bool actor_batch_norm = false;
  bool critic_batch_norm = false;
  /// Softmax actor follows the compatible-critic policy-gradient estimate.
  bool compatible = false;
  std::size_t compatible_samples = 2000;
  double init_log_scale = -1.0;
  BilevelStabilizers stabilizers{};
  std::size_t eval_every = 500;

  void validate() const {
    schedule.validate();
    if (batch < 1) throw ConfigError("batch size must be positive");
    if (!(exploration >= 0.0)) throw ConfigError("exploration scale must be non-negative");
    if (!(entropy >= 0.0)) throw ConfigError("entropy weight must be non-negative");
    if (eval_every < 1) throw ConfigError("evaluation cadence must be at least 1");
    if (replay_capacity && *replay_capacity < 1) throw ConfigError("replay capacity must be positive");
    if (target_tau && !(*target_tau > 0.0 && *target_tau <= 1.0))
      throw ConfigError("target blend factor must lie in (0, 1]");
    if (divergence == Divergence::cross_entropy)
      throw ConfigError("cross-entropy critics are reserved for the GAN MDP");
    if (env == EnvKind::chain) {
      ChainMdp check(chain);
      if (actor != ActorKind::softmax) throw ConfigError("the chain environment needs a softmax actor");
      if (actor_batch_norm || critic_batch_norm)
        throw ConfigError("batch normalization does not apply to tabular networks");
    } else {
      QuadraticBandit check(bandit_dim, bandit_target);
      if (actor == ActorKind::softmax) throw ConfigError("the bandit needs a continuous actor");
      if (actor_batch_norm && actor_hidden.empty()) throw ConfigError("batch normalization needs actor hidden layers");
      if (critic_batch_norm && critic_hidden.empty())
        throw ConfigError("batch normalization needs critic hidden layers");
    }
    if (entropy > 0.0 && actor == ActorKind::deterministic)
      throw ConfigError("entropy regularization needs a stochastic actor");
    if (compatible && actor != ActorKind::softmax) throw ConfigError("compatible critics need a softmax actor");
    if (compatible && compatible_samples < 2) throw ConfigError("compatible critic needs at least two samples");
    for (auto w : actor_hidden)
      if (w == 0 || w > 64) throw ConfigError("hidden widths must lie in [1, 64]");
    for (auto w : critic_hidden)
      if (w == 0 || w > 64) throw ConfigError("hidden widths must lie in [1, 64]");
  }
};

struct AcRun {
  RunRecord record;
  std::unique_ptr<Environment> env;
  std::unique_ptr<Critic> critic;
  std::unique_ptr<Actor> actor;
  std::unique_ptr<TargetNetwork> target;
};

inline std::unique_ptr<Environment> make_environment(const AcConfig& cfg) {
  if (cfg.env == EnvKind::chain) return std::make_unique<ChainMdp>(cfg.chain);
  return std::make_unique<QuadraticBandit>(cfg.bandit_dim, cfg.bandit_target);
}

/// Environment-specific quality metrics of the current actor and critic.
inline Metrics evaluate_ac(const AcConfig& cfg, Environment& env, Actor& actor, Critic& critic) {
  Metrics m;
  if (cfg.env == EnvKind::chain) {
    const auto& chain = dynamic_cast<const ChainMdp&>(env);
    const TabularMdp tab = chain.tabular();
    const Table pi = actor.probabilities();
    const PolicyValues pv = evaluate_policy(tab, pi);
    const Table qstar = value_iteration(tab);
    const auto best = greedy_actions(qstar);
    const auto mine = greedy_actions(pi);
    const Table q = critic.table();
    double match = 0.0, q_err = 0.0, q_star_err = 0.0;
    for (std::size_t s = 0; s < tab.states; ++s) {
      match += best[s] == mine[s] ? 1.0 : 0.0;
      for (std::size_t a = 0; a < tab.actions; ++a) {
        q_err = std::max(q_err, std::abs(q[s][a] - pv.q[s][a]));
        q_star_err = std::max(q_star_err, std::abs(q[s][a] - qstar[s][a]));
      }
    }
    m = {{"return", pv.objective},
         {"greedy_match", match / static_cast<double>(tab.states)},
         {"q_error", q_err},
         {"q_star_error", q_star_err}};
    return m;
  }
  const auto& bandit = dynamic_cast<const QuadraticBandit&>(env);
  const Tensor s0({1, 1}, 0.0);
  const Tensor mu = actor.mean_action(s0);
  std::vector<double> a(mu.data().begin(), mu.data().end());
  for (std::size_t j = 0; j < a.size(); ++j) m.emplace_back("action_" + std::to_string(j), a[j]);
  if (actor.kind() == ActorKind::gaussian) {
    const Tensor ls = actor.log_scale(s0);
    for (std::size_t j = 0; j < ls.size(); ++j) m.emplace_back("sigma_" + std::to_string(j), std::exp(ls[j]));
  }
  m.emplace_back("value", bandit.reward(a));
  // Largest critic error over a grid spanning ±1 around the policy action,
  // one coordinate at a time.
  const std::size_t grid = 21, d = a.size();
  Tensor states({grid * d, 1}, 0.0), actions({grid * d, d});
  std::vector<double> rewards;
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t g = 0; g < grid; ++g) {
      std::vector<double> pt = a;
      pt[j] += -1.0 + 2.0 * static_cast<double>(g) / static_cast<double>(grid - 1);
      std::copy(pt.begin(), pt.end(), actions.values().begin() + static_cast<std::ptrdiff_t>((j * grid + g) * d));
      rewards.push_back(bandit.reward(pt));
    }
  const Tensor q = critic.values(states, actions);
  double err = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) err = std::max(err, std::abs(q[i] - rewards[i]));
  m.emplace_back("critic_error", err);
  return m;
}

/// Actor-critic under the bilevel engine: critic = outer side (Bellman
/// residual F), actor = inner side (f = −Q). Each critic step collects one
/// transition from each of `batch` parallel environment copies.
inline AcRun train_ac(const AcConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  cfg.validate();
  Rng root(seed);
  Rng init = root.split();
  const std::uint64_t train_seed = root.next_u64();

  AcRun run;
  run.record.kind = "ac";
  run.env = make_environment(cfg);
  Environment& env = *run.env;
  const bool chain = cfg.env == EnvKind::chain;
  const std::size_t n_states = chain ? dynamic_cast<const ChainMdp&>(env).states() : 0;

  CriticSpec cs{.state_dim = env.state_dim(),
                .action_dim = env.action_dim(),
                .features = chain ? CriticFeatures::one_hot
                                  : (cfg.critic_hidden.empty() ? CriticFeatures::quadratic : CriticFeatures::raw),
                .states = n_states,
                .actions = env.num_actions(),
                .hidden = cfg.critic_hidden,
                .activation = cfg.activation,
                .output = Activation::linear,
                .batch_norm = cfg.critic_batch_norm};
  ActorSpec as{.kind = cfg.actor,
               .state_dim = env.state_dim(),
               .action_dim = env.action_dim(),
               .states = n_states,
               .actions = env.num_actions(),
               .hidden = cfg.actor_hidden,
               .activation = cfg.activation,
               .batch_norm = cfg.actor_batch_norm,
               .init_log_scale = cfg.init_log_scale};
  run.critic = std::make_unique<Critic>(cs, init);
  run.actor = std::make_unique<Actor>(as, init);
  if (cfg.target_tau) run.target = std::make_unique<TargetNetwork>(*run.critic, *cfg.target_tau, init);
  Critic& critic = *run.critic;
  Actor& actor = *run.actor;

  std::optional<TransitionReplay> replay;
  if (cfg.replay_capacity) replay.emplace(*cfg.replay_capacity);

  const std::size_t B = cfg.batch;
  std::vector<std::vector<double>> slot_state(B);
  std::vector<std::size_t> slot_t(B, 0);
  bool slots_ready = false;
  double last_td = 0.0, last_reward = 0.0;

  auto slot_states = [&](Rng& rng) {
    if (!slots_ready) {
      for (auto& s : slot_state) s = env.reset(rng);
      slots_ready = true;
    }
    Tensor t({B, env.state_dim()});
    for (std::size_t i = 0; i < B; ++i)
      std::copy(slot_state[i].begin(), slot_state[i].end(),
                t.values().begin() + static_cast<std::ptrdiff_t>(i * env.state_dim()));
    return t;
  };

  BilevelProblem p;
  p.outer = &critic.params();
  p.inner = &actor.params();
  p.outer_objective = [&](Rng& rng) {
    const Tensor states = slot_states(rng);
    const Tensor actions = actor.act(states, rng, cfg.exploration);
    std::vector<Transition> fresh;
    double reward_sum = 0.0;
    const std::size_t ad = actions.cols();
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<double> a(actions.data().begin() + static_cast<std::ptrdiff_t>(i * ad),
                            actions.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * ad));
      StepResult r = env.step(slot_state[i], a, rng);
      reward_sum += r.reward;
      fresh.push_back({slot_state[i], a, r.reward, r.next_state, r.terminal});
      if (r.terminal || ++slot_t[i] >= env.horizon()) {
        slot_state[i] = env.reset(rng);
        slot_t[i] = 0;
      } else {
        slot_state[i] = r.next_state;
      }
    }
    last_reward = reward_sum / static_cast<double>(B);
    std::vector<Transition> batch;
    if (replay) {
      for (auto& t : fresh) replay->push(t);
      batch = replay->sample(B, rng);
    } else {
      batch = std::move(fresh);
    }
    Critic& boot = run.target ? run.target->critic() : critic;
    const auto y = td_targets(batch, boot, actor, env.gamma(), &rng);
    const auto step = critic_update(critic, detail::stack_rows(batch, &Transition::state),
                                    detail::stack_rows(batch, &Transition::action), y, cfg.divergence);
    last_td = step.mean_abs_td;
    return step.loss;
  };
  p.inner_objective = [&](Rng& rng) {
    Tensor states;
    if (replay && !replay->empty()) {
      auto sample = replay->sample(B, rng);
      states = detail::stack_rows(sample, &Transition::state);
    } else {
      states = slot_states(rng);
    }
    switch (cfg.actor) {
      case ActorKind::deterministic: return actor_update_dpg(actor, critic, states);
      case ActorKind::gaussian:
        return actor_update_svg0(actor, critic, states, standard_normal(B, env.action_dim(), rng), cfg.entropy);
      case ActorKind::softmax: break;
    }
    if (!cfg.compatible) return actor_update_softmax(actor, critic.table(), states, cfg.entropy);
    const auto est = compatible_policy_gradient(dynamic_cast<const ChainMdp&>(env), actor.logits(),
                                                cfg.compatible_samples, rng);
    auto g = actor.params().get("logits").grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = -est.gradient[i];
    return -evaluate_policy(dynamic_cast<const ChainMdp&>(env).tabular(), actor.probabilities()).objective;
  };
  p.annotate = [&](std::size_t, Metrics& m) {
    m.emplace_back("td_error", last_td);
    m.emplace_back("reward", last_reward);
  };
  p.after_step = [&](Side side) {
    if (side == Side::outer && run.target) run.target->update(critic);
  };

  BilevelDescent engine(std::move(p), cfg.schedule, cfg.stabilizers, train_seed);
  Stopwatch clock;
  RoundRecord last;
  while (engine.round() < cfg.schedule.rounds) {
    last = engine.step_round();
    MetricRow row{last.round, 0.0, {{"critic_loss", last.outer_loss}, {"actor_loss", last.inner_loss}}};
    row.metrics.insert(row.metrics.end(), last.metrics.begin(), last.metrics.end());
    row.metrics.emplace_back("actor_norm", actor.params().norm());
    row.metrics.emplace_back("critic_norm", critic.params().norm());
    if (cfg.stabilizers.freeze) {
      row.metrics.emplace_back("critic_updated", last.gate.update_outer ? 1.0 : 0.0);
      row.metrics.emplace_back("actor_updated", last.gate.update_inner ? 1.0 : 0.0);
    }
    const bool final_round = engine.round() == cfg.schedule.rounds;
    if (final_round || engine.round() % cfg.eval_every == 0) {
      auto em = evaluate_ac(cfg, env, actor, critic);
      row.metrics.insert(row.metrics.end(), em.begin(), em.end());
      if (final_round) run.record.summary = em;
    }
    for (const auto& [k, v] : row.metrics)
      if (!std::isfinite(v)) throw NumericAbort(last.round, Side::outer, "metric '" + k + "' is not finite");
    row.wall_ms = clock.elapsed_ms();
    emit_row(run.record, sink, std::move(row));
  }
  run.record.summary.insert(run.record.summary.begin(),
                            {{"critic_loss", last.outer_loss}, {"actor_loss", last.inner_loss}, {"td_error", last_td}});
  return run;
}

// ---------------------------------------------------------------------------
// Traces

struct TraceRow {
  std::size_t episode = 0;
  std::size_t t = 0;
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
};

/// Rolls out the actor's behaviour policy for whole episodes.
inline std::vector<TraceRow> rollout(Environment& env, Actor& actor, std::size_t episodes, double exploration,
                                     Rng& rng) {
  std::vector<TraceRow> rows;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::vector<double> s = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon(); ++t) {
      const Tensor a = actor.act(Tensor({1, s.size()}, s), rng, exploration);
      std::vector<double> av(a.data().begin(), a.data().end());
      StepResult r = env.step(s, av, rng);
      rows.push_back({e, t, s, av, r.reward});
      if (r.terminal) break;
      s = r.next_state;
    }
  }
  return rows;
}

/// CSV with columns episode, t, s0.., a0.., r.
inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out.precision(17);
  out << "episode,t";
  const std::size_t sd = rows.empty() ? 0 : rows.front().state.size();
  const std::size_t ad = rows.empty() ? 0 : rows.front().action.size();
  for (std::size_t j = 0; j < sd; ++j) out << ",s" << j;
  for (std::size_t j = 0; j < ad; ++j) out << ",a" << j;
  out << ",r\n";
  for (const auto& r : rows) {
    out << r.episode << "," << r.t;
    for (double v : r.state) out << "," << v;
    for (double v : r.action) out << "," << v;
    out << "," << r.reward << "\n";
  }
}

}  // namespace advlab
