#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "advlab/bilevel.hpp"

namespace advlab {
namespace {

ParamStore scalar_store(const std::string& name, double v) {
  ParamStore s;
  s.add(name, Tensor::scalar(v));
  return s;
}

double& val(ParamStore& s, const std::string& name) { return s.get(name).values()[0]; }
double& grad(ParamStore& s, const std::string& name) { return s.get(name).grad()[0]; }

// F = x*y for the outer player, f = -x*y for the inner one.
BilevelProblem bilinear(ParamStore& xs, ParamStore& ys) {
  BilevelProblem p;
  p.outer = &xs;
  p.inner = &ys;
  p.outer_objective = [&](Rng&) {
    grad(xs, "x") = val(ys, "y");
    return val(xs, "x") * val(ys, "y");
  };
  p.inner_objective = [&](Rng&) {
    grad(ys, "y") = -val(xs, "x");
    return -val(xs, "x") * val(ys, "y");
  };
  return p;
}

double norm2(double x, double y) { return std::sqrt(x * x + y * y); }

TEST(Bilevel, QuadraticInnerTracksThenOuterConverges) {
  auto xs = scalar_store("x", 0.0);
  auto ys = scalar_store("y", 0.0);
  BilevelProblem p;
  p.outer = &xs;
  p.inner = &ys;
  p.outer_objective = [&](Rng&) {
    const double d = val(xs, "x") - val(ys, "y");
    grad(xs, "x") = 2.0 * d;
    return d * d;
  };
  p.inner_objective = [&](Rng&) {
    const double d = val(ys, "y") - 4.0;
    grad(ys, "y") = 2.0 * d;
    return d * d;
  };
  UpdateSchedule s{.inner_steps = 25, .outer_steps = 1, .outer_lr = 0.1, .inner_lr = 0.1, .rounds = 100};
  auto traj = alternating_descent(p, s, {}, 1);
  ASSERT_EQ(traj.size(), 100u);
  EXPECT_NEAR(val(ys, "y"), 4.0, 1e-3);
  EXPECT_NEAR(val(xs, "x"), 4.0, 1e-3);
  EXPECT_LT(traj.back().outer_loss, 1e-6);
}

TEST(Bilevel, SimultaneousBilinearNormGrowsBySqrtOnePlusEtaSquared) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 0.5);
  const double eta = 0.1;
  BilevelDescent engine(bilinear(xs, ys),
                        {.outer_lr = eta, .inner_lr = eta, .rounds = 200, .mode = UpdateMode::simultaneous}, {}, 3);
  double prev = norm2(1.0, 0.5);
  for (int r = 0; r < 200; ++r) {
    engine.step_round();
    const double now = norm2(val(xs, "x"), val(ys, "y"));
    EXPECT_NEAR(now / prev, std::sqrt(1.0 + eta * eta), 1e-12);
    prev = now;
  }
}

TEST(Bilevel, AlternatingBilinearStaysBounded) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 0.5);
  BilevelDescent engine(bilinear(xs, ys), {.outer_lr = 0.1, .inner_lr = 0.1, .rounds = 2000}, {}, 3);
  double worst = 0.0;
  engine.run(0, [&](const RoundRecord&) { worst = std::max(worst, norm2(val(xs, "x"), val(ys, "y"))); });
  EXPECT_LT(worst, 1.5 * norm2(1.0, 0.5));
}

// Plain recursion of simultaneous descent on the bilinear game with a
// historical-average drag on both players, written without the engine.
struct AveragedSim {
  double x, y, mx = 0, my = 0;
  int count = 0;
  double eta, lambda;
  void step() {
    double gx = y, gy = -x;
    if (count > 0) {
      gy += 2 * lambda * (y - my);
      gx += 2 * lambda * (x - mx);
    }
    ++count;
    if (count == 1) {
      mx = x;
      my = y;
    } else {
      mx += (x - mx) / count;
      my += (y - my) / count;
    }
    x -= eta * gx;
    y -= eta * gy;
  }
};

TEST(Bilevel, HistoricalAveragingDampsBilinearGameAndMatchesRecursion) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 0.5);
  const double eta = 0.1;
  BilevelStabilizers stab{.outer_history = 1.0, .inner_history = 1.0};
  BilevelDescent engine(bilinear(xs, ys),
                        {.outer_lr = eta, .inner_lr = eta, .rounds = 500, .mode = UpdateMode::simultaneous}, stab, 3);
  AveragedSim sim{.x = 1.0, .y = 0.5, .eta = eta, .lambda = 1.0};
  double norm50 = 0.0;
  for (int r = 1; r <= 500; ++r) {
    engine.step_round();
    sim.step();
    ASSERT_NEAR(val(xs, "x"), sim.x, 1e-9) << "round " << r;
    ASSERT_NEAR(val(ys, "y"), sim.y, 1e-9) << "round " << r;
    if (r == 50) norm50 = norm2(val(xs, "x"), val(ys, "y"));
  }
  EXPECT_LT(norm2(val(xs, "x"), val(ys, "y")), norm50);
}

TEST(Bilevel, FreezeGateThresholds) {
  FreezeController c;
  EXPECT_EQ(freeze_gate(c, 2.5), (FreezeDecision{true, false}));
  EXPECT_TRUE(c.inner_frozen);
  EXPECT_EQ(freeze_gate(c, 0.05), (FreezeDecision{false, true}));
  EXPECT_TRUE(c.outer_frozen);
  EXPECT_FALSE(c.inner_frozen);
  EXPECT_EQ(freeze_gate(c, 1.0), (FreezeDecision{true, true}));
  EXPECT_EQ(freeze_gate(c, 0.1), (FreezeDecision{true, true}));
  EXPECT_EQ(freeze_gate(c, 2.0), (FreezeDecision{true, true}));
  c.lower = 3.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Bilevel, FrozenSideIsBitIdentical) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 0.5);
  // Any loss exceeds the upper threshold, so the inner side freezes after round 0.
  BilevelStabilizers stab{.freeze = FreezeController{.metric = "outer_loss", .lower = -1e9, .upper = -1e8}};
  BilevelDescent engine(bilinear(xs, ys), {.outer_lr = 0.1, .inner_lr = 0.1, .rounds = 50}, stab, 3);
  auto first = engine.step_round(true);
  EXPECT_TRUE(first.gate.update_inner);
  const ParamStore frozen = *first.inner_snapshot;
  for (const auto& rec : engine.run()) {
    EXPECT_FALSE(rec.gate.update_inner);
    EXPECT_TRUE(rec.gate.update_outer);
  }
  EXPECT_TRUE(ys == frozen);
  EXPECT_NE(val(xs, "x"), first.outer_snapshot->get("x").values()[0]);
}

TEST(Bilevel, FreezeOnUnknownMetricIsConfigError) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 0.5);
  BilevelStabilizers stab{.freeze = FreezeController{.metric = "td_error"}};
  BilevelDescent engine(bilinear(xs, ys), {.rounds = 2}, stab, 3);
  EXPECT_THROW(engine.step_round(), ConfigError);
}

TEST(Bilevel, HistoricalPenaltyValues) {
  ParamStore s;
  s.add("w", Tensor({2}, std::vector<double>{0.0, 0.0}));
  HistoryAverager avg(0.5);
  s.zero_grad();
  auto warm = historical_penalty(avg, s);
  EXPECT_EQ(warm.penalty, 0.0);
  EXPECT_TRUE(warm.gradient.empty());
  EXPECT_EQ(s.get("w").grad()[0], 0.0);
  EXPECT_EQ(avg.count(), 1u);

  s.get("w").values()[0] = 1.0;
  s.get("w").values()[1] = 2.0;
  s.zero_grad();
  auto pen = historical_penalty(avg, s);
  EXPECT_DOUBLE_EQ(pen.penalty, 0.5 * (1.0 + 4.0));
  EXPECT_DOUBLE_EQ(pen.gradient[0][0], 1.0);
  EXPECT_DOUBLE_EQ(pen.gradient[0][1], 2.0);
  EXPECT_DOUBLE_EQ(s.get("w").grad()[1], 2.0);
  // Running mean of {0,0} and {1,2}.
  EXPECT_DOUBLE_EQ(avg.mean()[0][0], 0.5);
  EXPECT_DOUBLE_EQ(avg.mean()[0][1], 1.0);

  ParamStore other;
  other.add("w", Tensor({3}));
  EXPECT_THROW(historical_penalty(avg, other), ConfigError);
  EXPECT_THROW(HistoryAverager(-1.0), ConfigError);
}

TEST(Bilevel, HistoricalPenaltyGradientMatchesFiniteDifference) {
  Rng rng(11);
  ParamStore s;
  s.add("a", Tensor({3}));
  s.add("b", Tensor({2, 2}));
  HistoryAverager avg(0.7);
  for (int k = 0; k < 5; ++k) {
    for (auto& e : s)
      for (double& v : e.tensor.values()) v = rng.normal();
    avg.observe(s);
  }
  for (auto& e : s)
    for (double& v : e.tensor.values()) v = rng.normal();

  auto penalty_at = [&](const ParamStore& p) {
    double total = 0.0;
    std::size_t t = 0;
    for (const auto& e : p) {
      for (std::size_t i = 0; i < e.tensor.size(); ++i) {
        const double d = e.tensor.data()[i] - avg.mean()[t][i];
        total += avg.lambda() * d * d;
      }
      ++t;
    }
    return total;
  };
  const double h = 1e-5;
  HistoryAverager copy = avg;
  s.zero_grad();
  auto pen = historical_penalty(copy, s);
  EXPECT_NEAR(pen.penalty, penalty_at(s), 1e-12);
  std::size_t t = 0;
  for (auto& e : s) {
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      double& v = e.tensor.values()[i];
      const double orig = v;
      v = orig + h;
      const double up = penalty_at(s);
      v = orig - h;
      const double down = penalty_at(s);
      v = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(pen.gradient[t][i], fd, 1e-6);
      // The drag points from the average toward the current value.
      EXPECT_GE(pen.gradient[t][i] * (v - avg.mean()[t][i]), 0.0);
    }
    ++t;
  }
}

// Noisy least squares so both sides consume randomness.
std::vector<RoundRecord> noisy_run(std::uint64_t seed, ParamStore& xs, ParamStore& ys) {
  BilevelProblem p;
  p.outer = &xs;
  p.inner = &ys;
  p.outer_objective = [&](Rng& rng) {
    const double d = val(xs, "x") - val(ys, "y") + 0.1 * rng.normal();
    grad(xs, "x") = 2 * d;
    return d * d;
  };
  p.inner_objective = [&](Rng& rng) {
    const double d = val(ys, "y") - 1.0 + 0.1 * rng.normal();
    grad(ys, "y") = 2 * d;
    return d * d;
  };
  return alternating_descent(p, {.inner_steps = 3, .outer_lr = 0.05, .inner_lr = 0.05, .rounds = 300},
                             {.inner_history = 0.1}, seed, 100);
}

TEST(Bilevel, SameSeedIsBitReproducible) {
  auto x1 = scalar_store("x", 0.0), y1 = scalar_store("y", 0.0);
  auto x2 = scalar_store("x", 0.0), y2 = scalar_store("y", 0.0);
  auto a = noisy_run(5, x1, y1);
  auto b = noisy_run(5, x2, y2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].outer_loss, b[i].outer_loss);
    EXPECT_EQ(a[i].inner_loss, b[i].inner_loss);
  }
  EXPECT_TRUE(x1 == x2);
  EXPECT_TRUE(y1 == y2);
  auto x3 = scalar_store("x", 0.0), y3 = scalar_store("y", 0.0);
  noisy_run(6, x3, y3);
  EXPECT_FALSE(x1 == x3);
  // Rounds 0, 100, 200 and the final round 299.
  std::size_t snaps = 0;
  for (const auto& r : a) snaps += r.outer_snapshot.has_value();
  EXPECT_EQ(snaps, 4u);
  EXPECT_TRUE(a.back().outer_snapshot.has_value());
}

TEST(Bilevel, NonFiniteLossAbortsWithRoundAndSide) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 1.0);
  BilevelProblem p = bilinear(xs, ys);
  int calls = 0;
  p.outer_objective = [&](Rng&) {
    grad(xs, "x") = 0.0;
    return ++calls == 4 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  };
  BilevelDescent engine(p, {.rounds = 10}, {}, 1);
  try {
    engine.run();
    FAIL() << "expected abort";
  } catch (const NumericAbort& e) {
    EXPECT_EQ(e.round(), 3u);
    EXPECT_EQ(e.side(), Side::outer);
    EXPECT_NE(std::string(e.what()).find("outer"), std::string::npos);
  }
}

TEST(Bilevel, RejectsOverlappingOrIncompleteProblems) {
  auto xs = scalar_store("x", 1.0);
  auto ys = scalar_store("y", 1.0);
  BilevelProblem p = bilinear(xs, ys);
  p.inner = &xs;
  EXPECT_THROW(BilevelDescent(p, {}, {}, 1), ConfigError);
  BilevelProblem q = bilinear(xs, ys);
  q.inner_objective = nullptr;
  EXPECT_THROW(BilevelDescent(q, {}, {}, 1), ConfigError);
  EXPECT_THROW(BilevelDescent(bilinear(xs, ys), {.inner_steps = 0}, {}, 1), ConfigError);
  EXPECT_THROW(BilevelDescent(bilinear(xs, ys), {.inner_steps = 2, .mode = UpdateMode::simultaneous}, {}, 1),
               ConfigError);
  EXPECT_THROW(parse_update_mode("sometimes"), ConfigError);
}

TEST(Bilevel, TapeObjectiveDifferentiatesOnlyItsSide) {
  ParamStore xs, ys;
  xs.add("x", Tensor::scalar(0.0));
  ys.add("y", Tensor::scalar(0.0));
  auto outer_tape = std::make_shared<Tape>();
  Var d = outer_tape->sub(outer_tape->param(xs, "x"), outer_tape->param(ys, "y"));
  Var outer_loss = outer_tape->mean(outer_tape->square(d));
  auto inner_tape = std::make_shared<Tape>();
  Var target = inner_tape->input("target");
  Var e = inner_tape->sub(inner_tape->param(ys, "y"), target);
  Var inner_loss = inner_tape->mean(inner_tape->square(e));

  BilevelProblem p;
  p.outer = &xs;
  p.inner = &ys;
  p.outer_objective = tape_objective(outer_tape, outer_loss, xs, nullptr);
  p.inner_objective = tape_objective(inner_tape, inner_loss, ys, [](Rng&) {
    Bindings b;
    b.emplace("target", Tensor::scalar(4.0));
    return b;
  });
  alternating_descent(p, {.inner_steps = 25, .outer_lr = 0.1, .inner_lr = 0.1, .rounds = 100}, {}, 1);
  EXPECT_NEAR(ys.get("y").item(), 4.0, 1e-3);
  EXPECT_NEAR(xs.get("x").item(), 4.0, 1e-3);
}

}  // namespace
}  // namespace advlab

namespace advlab {
namespace {

TEST(Bilevel, GateIsStatelessAcrossCalls) {
  FreezeController c;
  EXPECT_EQ(freeze_gate(c, 5.0), (FreezeDecision{true, false}));
  EXPECT_EQ(freeze_gate(c, 1.0), (FreezeDecision{true, true}));
  EXPECT_FALSE(c.inner_frozen);
}

TEST(Bilevel, ScalarPenaltyArithmetic) {
  ParamStore s;
  s.add("t", Tensor::scalar(1.0));
  HistoryAverager avg(1.0);
  avg.observe(s);
  s.zero_grad();
  auto at_mean = historical_penalty(avg, s);
  EXPECT_EQ(at_mean.penalty, 0.0);
  EXPECT_EQ(at_mean.gradient[0][0], 0.0);

  HistoryAverager fresh(1.0);
  fresh.observe(s);
  s.get("t").values()[0] = 3.0;
  s.zero_grad();
  auto pen = historical_penalty(fresh, s);
  EXPECT_EQ(pen.penalty, 4.0);
  EXPECT_EQ(pen.gradient[0][0], 4.0);
  EXPECT_EQ(s.get("t").grad()[0], 4.0);
}

}  // namespace
}  // namespace advlab
