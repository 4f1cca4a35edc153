#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/optimizer.hpp"
#include "advlab/random.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

// Two-player descent on
//   x* = argmin_x F(x, y*(x)),   y*(x) = argmin_y f(x, y)
// where x is the outer parameter set and y the inner one. In a GAN the
// discriminator plays x and the generator y; in actor-critic the critic plays
// x and the actor y.

enum class Side { outer, inner };

inline const char* to_string(Side s) { return s == Side::outer ? "outer" : "inner"; }

enum class UpdateMode { alternating, simultaneous };

inline const char* to_string(UpdateMode m) { return m == UpdateMode::alternating ? "alternating" : "simultaneous"; }

inline UpdateMode parse_update_mode(const std::string& s) {
  if (s == "alternating") return UpdateMode::alternating;
  if (s == "simultaneous") return UpdateMode::simultaneous;
  throw ConfigError("unknown update mode '" + s + "'");
}

using Metrics = std::vector<std::pair<std::string, double>>;

inline std::optional<double> find_metric(const Metrics& m, const std::string& name) {
  for (const auto& [k, v] : m)
    if (k == name) return v;
  return std::nullopt;
}

/// Evaluates one side's objective at the current parameters, writes its
/// gradient into that side's accumulators and returns the loss.
using Objective = std::function<double(Rng&)>;

/// Produces the named minibatch an objective tape consumes.
using DataSource = std::function<Bindings(Rng&)>;

struct BilevelProblem {
  ParamStore* outer = nullptr;  // x
  ParamStore* inner = nullptr;  // y
  Objective outer_objective;    // F(x, y), differentiated in x
  Objective inner_objective;    // f(x, y), differentiated in y
  /// Optional hook adding problem-specific metrics at the end of each round.
  std::function<void(std::size_t round, Metrics&)> annotate;
  /// Optional hook run after each optimizer step of a side.
  std::function<void(Side)> after_step;
};

/// Objective backed by a recorded tape: binds a fresh minibatch, evaluates,
/// and back-propagates into `wrt` only.
inline Objective tape_objective(std::shared_ptr<Tape> tape, Var loss, ParamStore& wrt, DataSource data) {
  return [tape = std::move(tape), loss, store = &wrt, data = std::move(data)](Rng& rng) {
    tape->evaluate(data ? data(rng) : Bindings{});
    tape->backward(loss, {store});
    return tape->value(loss).item();
  };
}

struct UpdateSchedule {
  std::size_t inner_steps = 1;
  std::size_t outer_steps = 1;
  double outer_lr = 0.01;
  double inner_lr = 0.01;
  std::size_t rounds = 1;
  UpdateMode mode = UpdateMode::alternating;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double beta1 = 0.9;  // Adam moment decay rates
  double beta2 = 0.999;
  /// Learning rates decay linearly from their base value to this fraction
  /// of it over the scheduled rounds; 1 keeps them constant.
  double final_lr_scale = 1.0;

  double lr_scale(std::size_t round) const {
    if (final_lr_scale == 1.0 || rounds <= 1) return 1.0;
    const double progress = static_cast<double>(round) / static_cast<double>(rounds - 1);
    return 1.0 - (1.0 - final_lr_scale) * progress;
  }

  void validate() const {
    if (inner_steps < 1 || outer_steps < 1) throw ConfigError("schedule step counts must be at least 1");
    if (!(outer_lr >= 0.0) || !(inner_lr >= 0.0)) throw ConfigError("schedule learning rates must be non-negative");
    if (rounds < 1) throw ConfigError("schedule needs at least one round");
    if (mode == UpdateMode::simultaneous && inner_steps != outer_steps)
      throw ConfigError("simultaneous mode needs equal inner and outer step counts");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("Adam decay rates must lie in [0, 1)");
    if (!(final_lr_scale >= 0.0 && final_lr_scale <= 1.0))
      throw ConfigError("final learning-rate scale must lie in [0, 1]");
  }

  OptimizerSettings settings(Side side) const {
    return {.kind = optimizer,
            .learning_rate = side == Side::outer ? outer_lr : inner_lr,
            .beta1 = beta1,
            .beta2 = beta2};
  }
};

/// Stateless threshold gate on a monitored metric.
///
/// metric > upper freezes the inner side, metric < lower freezes the outer
/// side, otherwise both update. For GANs the default metric is the
/// discriminator loss; for actor-critic it is the mean |TD error|.
struct FreezeController {
  /// "outer_loss", "inner_loss", or the name of a round metric.
  std::string metric = "outer_loss";
  double lower = 0.1;
  double upper = 2.0;
  bool outer_frozen = false;
  bool inner_frozen = false;

  void validate() const {
    if (!(lower <= upper)) throw ConfigError("freeze thresholds need lower <= upper");
  }
};

struct FreezeDecision {
  bool update_outer = true;
  bool update_inner = true;
  friend bool operator==(const FreezeDecision&, const FreezeDecision&) = default;
};

inline FreezeDecision freeze_gate(FreezeController& c, double metric) {
  c.outer_frozen = metric < c.lower;
  c.inner_frozen = metric > c.upper;
  return {!c.outer_frozen, !c.inner_frozen};
}

struct HistoricalPenalty {
  double penalty = 0.0;
  /// 2λ(θ − θ̄), one vector per tensor; empty during warm-up.
  std::vector<std::vector<double>> gradient;
};

/// Equally weighted running mean of a parameter set plus a quadratic drag
/// λ·Σ‖θ − θ̄‖² toward it.
class HistoryAverager {
 public:
  HistoryAverager() = default;
  explicit HistoryAverager(double lambda) : lambda_(lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("historical averaging weight must be non-negative");
  }

  double lambda() const { return lambda_; }
  std::size_t count() const { return count_; }
  const std::vector<std::vector<double>>& mean() const { return mean_; }

  /// Folds θ into the running mean.
  void observe(const ParamStore& params) {
    if (count_ == 0) {
      mean_.clear();
      for (const auto& e : params) mean_.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
      count_ = 1;
      return;
    }
    check_layout(params);
    ++count_;
    const double w = 1.0 / static_cast<double>(count_);
    std::size_t t = 0;
    for (const auto& e : params) {
      auto v = e.tensor.data();
      for (std::size_t i = 0; i < v.size(); ++i) mean_[t][i] += w * (v[i] - mean_[t][i]);
      ++t;
    }
  }

 private:
  friend HistoricalPenalty historical_penalty(HistoryAverager&, ParamStore&);

  void check_layout(const ParamStore& params) const {
    if (params.size() != mean_.size()) throw ConfigError("historical average tracks a different parameter set");
    std::size_t t = 0;
    for (const auto& e : params)
      if (e.tensor.size() != mean_[t++].size())
        throw ConfigError("historical average shape mismatch at '" + e.name + "'");
  }

  double lambda_ = 0.0;
  std::size_t count_ = 0;
  std::vector<std::vector<double>> mean_;
};


/// Penalty at the current parameters, with its gradient added into the
/// parameters' accumulators; the running mean then absorbs θ. With no
/// history yet the penalty and gradient are zero.
inline HistoricalPenalty historical_penalty(HistoryAverager& avg, ParamStore& params) {
  HistoricalPenalty out;
  if (avg.count_ > 0) {
    avg.check_layout(params);
    std::size_t t = 0;
    for (auto& e : params) {
      auto v = e.tensor.data();
      std::vector<double> g(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = v[i] - avg.mean_[t][i];
        out.penalty += avg.lambda_ * d * d;
        g[i] = 2.0 * avg.lambda_ * d;
      }
      if (e.tensor.trainable()) {
        auto acc = e.tensor.grad();
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
      out.gradient.push_back(std::move(g));
      ++t;
    }
  }
  avg.observe(params);
  return out;
}

/// Configuration of the stabilizers the engine applies itself.
struct BilevelStabilizers {
  std::optional<FreezeController> freeze{};
  /// Historical-averaging weights per side; nullopt disables.
  std::optional<double> outer_history{};
  std::optional<double> inner_history{};
};

/// Thrown when an objective returns a non-finite loss.
class NumericAbort : public NumericError {
 public:
  NumericAbort(std::size_t round, Side side, const std::string& detail)
      : NumericError("numeric abort in round " + std::to_string(round) + " on the " + to_string(side) +
                     " side: " + detail),
        round_(round),
        side_(side) {}
  std::size_t round() const { return round_; }
  Side side() const { return side_; }

 private:
  std::size_t round_;
  Side side_;
};

struct RoundRecord {
  std::size_t round = 0;
  double outer_loss = 0.0;
  double inner_loss = 0.0;
  FreezeDecision gate;
  Metrics metrics;
  std::optional<ParamStore> outer_snapshot;
  std::optional<ParamStore> inner_snapshot;
};

/// Stepwise two-timescale descent. One round = k_inner steps on y against f
/// with x fixed, then k_outer steps on x against F with y fixed (alternating),
/// or k joint steps with both gradients taken at the same snapshot
/// (simultaneous).
class BilevelDescent {
 public:
  BilevelDescent(BilevelProblem problem, UpdateSchedule schedule, BilevelStabilizers stab, std::uint64_t seed)
      : problem_(std::move(problem)),
        schedule_(schedule),
        stab_(std::move(stab)),
        rng_(seed),
        outer_opt_(schedule.settings(Side::outer)),
        inner_opt_(schedule.settings(Side::inner)) {
    if (!problem_.outer || !problem_.inner) throw ConfigError("bilevel problem needs both parameter sets");
    if (!problem_.outer_objective || !problem_.inner_objective)
      throw ConfigError("bilevel problem needs both objectives");
    schedule_.validate();
    std::set<const Tensor*> seen;
    for (const auto& e : *problem_.outer) seen.insert(&e.tensor);
    for (const auto& e : *problem_.inner)
      if (seen.contains(&e.tensor)) throw ConfigError("outer and inner parameter sets overlap at '" + e.name + "'");
    if (stab_.freeze) stab_.freeze->validate();
    if (stab_.outer_history) outer_avg_.emplace(*stab_.outer_history);
    if (stab_.inner_history) inner_avg_.emplace(*stab_.inner_history);
  }

  BilevelDescent(const BilevelDescent&) = delete;
  BilevelDescent& operator=(const BilevelDescent&) = delete;

  RoundRecord step_round(bool snapshot = false) {
    RoundRecord rec;
    rec.round = round_;
    if (schedule_.final_lr_scale != 1.0) {
      const double f = schedule_.lr_scale(round_);
      outer_opt_.set_learning_rate(schedule_.outer_lr * f);
      inner_opt_.set_learning_rate(schedule_.inner_lr * f);
    }
    if (stab_.freeze && last_metric_) rec.gate = freeze_gate(*stab_.freeze, *last_metric_);

    if (schedule_.mode == UpdateMode::alternating) {
      for (std::size_t k = 0; k < schedule_.inner_steps; ++k)
        rec.inner_loss = side_step(Side::inner, rec.gate.update_inner, rec.metrics);
      for (std::size_t k = 0; k < schedule_.outer_steps; ++k)
        rec.outer_loss = side_step(Side::outer, rec.gate.update_outer, rec.metrics);
    } else {
      for (std::size_t k = 0; k < schedule_.inner_steps; ++k) {
        rec.inner_loss = checked(Side::inner, problem_.inner_objective(rng_));
        rec.outer_loss = checked(Side::outer, problem_.outer_objective(rng_));
        if (rec.gate.update_inner) apply(Side::inner, rec.metrics);
        if (rec.gate.update_outer) apply(Side::outer, rec.metrics);
      }
    }

    if (problem_.annotate) problem_.annotate(round_, rec.metrics);
    if (stab_.freeze) {
      const auto& name = stab_.freeze->metric;
      if (name == "outer_loss") last_metric_ = rec.outer_loss;
      else if (name == "inner_loss") last_metric_ = rec.inner_loss;
      else if (auto v = find_metric(rec.metrics, name)) last_metric_ = *v;
      else throw ConfigError("freeze metric '" + name + "' is not produced by this problem");
    }
    if (snapshot) {
      rec.outer_snapshot = *problem_.outer;
      rec.inner_snapshot = *problem_.inner;
    }
    ++round_;
    return rec;
  }

  /// Runs the remaining rounds. Snapshots are kept every `snapshot_every`
  /// rounds (0 = never); `on_round` sees each record as it is produced.
  std::vector<RoundRecord> run(std::size_t snapshot_every = 0,
                               const std::function<void(const RoundRecord&)>& on_round = {}) {
    std::vector<RoundRecord> out;
    while (round_ < schedule_.rounds) {
      const bool snap = snapshot_every > 0 && (round_ % snapshot_every == 0 || round_ + 1 == schedule_.rounds);
      out.push_back(step_round(snap));
      if (on_round) on_round(out.back());
    }
    return out;
  }

  std::size_t round() const { return round_; }
  Rng& rng() { return rng_; }
  const UpdateSchedule& schedule() const { return schedule_; }
  Optimizer& optimizer(Side s) { return s == Side::outer ? outer_opt_ : inner_opt_; }

 private:
  double checked(Side side, double loss) const {
    if (!std::isfinite(loss)) throw NumericAbort(round_, side, "loss is " + std::to_string(loss));
    return loss;
  }

  double side_step(Side side, bool update, Metrics& metrics) {
    const double loss =
        checked(side, side == Side::outer ? problem_.outer_objective(rng_) : problem_.inner_objective(rng_));
    if (update) apply(side, metrics);
    return loss;
  }

  void apply(Side side, Metrics& metrics) {
    ParamStore& params = side == Side::outer ? *problem_.outer : *problem_.inner;
    auto& avg = side == Side::outer ? outer_avg_ : inner_avg_;
    if (avg) {
      const auto pen = historical_penalty(*avg, params);
      metrics.emplace_back(std::string(to_string(side)) + "_history_penalty", pen.penalty);
    }
    (side == Side::outer ? outer_opt_ : inner_opt_).step(params);
    if (problem_.after_step) problem_.after_step(side);
  }

  BilevelProblem problem_;
  UpdateSchedule schedule_;
  BilevelStabilizers stab_;
  Rng rng_;
  Optimizer outer_opt_;
  Optimizer inner_opt_;
  std::optional<HistoryAverager> outer_avg_;
  std::optional<HistoryAverager> inner_avg_;
  std::optional<double> last_metric_;
  std::size_t round_ = 0;
};

/// Runs a full schedule and returns the per-round trajectory.
inline std::vector<RoundRecord> alternating_descent(BilevelProblem problem, const UpdateSchedule& schedule,
                                                    BilevelStabilizers stab, std::uint64_t seed,
                                                    std::size_t snapshot_every = 0) {
  BilevelDescent engine(std::move(problem), schedule, std::move(stab), seed);
  return engine.run(snapshot_every);
}

}  // namespace advlab
