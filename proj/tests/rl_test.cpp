#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "advlab/gradcheck.hpp"
#include "advlab/rl.hpp"
#include "test_support.hpp"

namespace advlab {
namespace {

using testing::random_tensor;

void fill(Tensor& t, std::initializer_list<double> v) {
  ASSERT_EQ(t.size(), v.size());
  std::copy(v.begin(), v.end(), t.values().begin());
}

std::vector<double> grads(const ParamStore& p) {
  std::vector<double> out;
  for (const auto& e : p)
    if (e.tensor.trainable()) out.insert(out.end(), e.tensor.grad().begin(), e.tensor.grad().end());
  return out;
}

// Softmax actor whose logits pick `greedy` with probability 1 - O(e^-60).
std::unique_ptr<Actor> greedy_softmax(const std::vector<std::size_t>& greedy, Rng& rng) {
  auto actor = std::make_unique<Actor>(
      ActorSpec{.kind = ActorKind::softmax, .states = greedy.size(), .actions = 2}, rng);
  auto& l = actor->params().get("logits");
  for (std::size_t s = 0; s < greedy.size(); ++s) {
    l.values()[s * 2 + greedy[s]] = 30.0;
    l.values()[s * 2 + 1 - greedy[s]] = -30.0;
  }
  return actor;
}

std::unique_ptr<Critic> tabular_critic(std::size_t states, Rng& rng) {
  return std::make_unique<Critic>(
      CriticSpec{.features = CriticFeatures::one_hot, .states = states, .actions = 2}, rng);
}

// Q(s, a) = w_a·a + w_aa·a² + c for the stateless bandit critic.
std::unique_ptr<Critic> quadratic_critic(double w_a, double w_aa, double c, Rng& rng) {
  auto critic = std::make_unique<Critic>(CriticSpec{.features = CriticFeatures::quadratic}, rng);
  fill(critic->params().get("l0.W"), {0.0, w_a, w_aa});
  fill(critic->params().get("l0.b"), {c});
  return critic;
}

// ---------------------------------------------------------------------------
// Oracles

TEST(ChainOracle, OptimalPolicyByHand) {
  // Left-end reward 0.5 is worth 1.25 forever, the right end 2.5; from state
  // 1 going left is worth 0.75 and going right 0.54, so only states 0 and 1
  // prefer the left end.
  ChainMdp chain(ChainSpec{});
  const Table q = value_iteration(chain.tabular());
  EXPECT_EQ(greedy_actions(q), (std::vector<std::size_t>{0, 0, 1, 1, 1}));
  EXPECT_NEAR(q[0][0], 1.25, 1e-12);
  EXPECT_NEAR(q[1][0], 0.75, 1e-12);
  EXPECT_NEAR(q[4][1], 2.5, 1e-12);
}

TEST(ChainOracle, ExactGradientMatchesFiniteDifferenceOfObjective) {
  ChainMdp chain(ChainSpec{.rewards = {0.0, 1.0}, .gamma = 0.5, .slip = 0.2});
  const TabularMdp m = chain.tabular();
  const Table logits{{0.3, -0.2}, {-0.5, 0.4}};
  const Table g = exact_policy_gradient(m, logits);
  const double h = 1e-6;
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a = 0; a < 2; ++a) {
      Table up = logits, dn = logits;
      up[s][a] += h;
      dn[s][a] -= h;
      const double fd = (evaluate_policy(m, softmax_table(up)).objective -
                         evaluate_policy(m, softmax_table(dn)).objective) / (2 * h);
      EXPECT_NEAR(g[s][a], fd, 1e-8) << s << "," << a;
    }
}

// ---------------------------------------------------------------------------
// TD targets and critic updates

TEST(TdTarget, ZeroDiscountIgnoresBootstrap) {
  Rng rng(1);
  auto critic = tabular_critic(3, rng);
  critic->params().get("q").values()[5] = 100.0;
  auto actor = greedy_softmax({1, 1, 1}, rng);
  Transition tr{{1.0}, {1.0}, 0.25, {2.0}, false};
  EXPECT_EQ(td_target(tr, *critic, *actor, 0.0), 0.25);
}

TEST(TdTarget, TerminalDropsBootstrap) {
  Rng rng(1);
  auto critic = tabular_critic(3, rng);
  for (double& v : critic->params().get("q").values()) v = 7.0;
  auto actor = greedy_softmax({1, 1, 1}, rng);
  EXPECT_EQ(td_target({{0.0}, {0.0}, 1.0, {1.0}, true}, *critic, *actor, 0.9), 1.0);
  EXPECT_NEAR(td_target({{0.0}, {0.0}, 1.0, {1.0}, false}, *critic, *actor, 0.9), 1.0 + 0.9 * 7.0, 1e-12);
}

TEST(TdTarget, BellmanFixedPointOnThreeStateChain) {
  ChainMdp chain(ChainSpec{.rewards = {0.2, 0.0, 1.0}, .gamma = 0.8});
  const Table qstar = value_iteration(chain.tabular());
  Rng rng(3);
  auto critic = tabular_critic(3, rng);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t a = 0; a < 2; ++a) critic->params().get("q").values()[s * 2 + a] = qstar[s][a];
  auto actor = greedy_softmax(greedy_actions(qstar), rng);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t a = 0; a < 2; ++a) {
      StepResult r = chain.step({double(s)}, {double(a)}, rng);
      const double y = td_target({{double(s)}, {double(a)}, r.reward, r.next_state, false}, *critic, *actor, 0.8);
      EXPECT_NEAR(y, qstar[s][a], 1e-10) << s << "," << a;
    }
}

TEST(CriticUpdate, SquaredLossVanishesAtTargets) {
  Rng rng(4);
  auto critic = quadratic_critic(1.0, -0.5, 0.25, rng);
  Tensor s({3, 1}), a({3, 1}, std::vector<double>{-1.0, 0.0, 2.0});
  const Tensor q = critic->values(s, a);
  const auto step = critic_update(*critic, s, a, {q[0], q[1], q[2]}, Divergence::squared);
  EXPECT_NEAR(step.loss, 0.0, 1e-30);
  for (double g : grads(critic->params())) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(CriticUpdate, CrossEntropyAtHalf) {
  Rng rng(5);
  Critic critic(CriticSpec{.output = Activation::sigmoid}, rng);
  for (auto& e : critic.params())
    for (double& v : e.tensor.values()) v = 0.0;
  Tensor s({1, 1}), a({1, 1}, 0.3);
  const auto step = critic_update(critic, s, a, {1.0}, Divergence::cross_entropy);
  EXPECT_NEAR(step.loss, std::numbers::ln2, 1e-12);
  EXPECT_THROW(critic_update(critic, s, a, {1.5}, Divergence::cross_entropy), UsageError);
  EXPECT_THROW(critic_update(critic, s, a, {-0.1}, Divergence::cross_entropy), UsageError);
  Critic linear(CriticSpec{}, rng);
  EXPECT_THROW(critic_update(linear, s, a, {0.5}, Divergence::cross_entropy), UsageError);
  EXPECT_THROW(critic_update(critic, s, a, {}, Divergence::squared), UsageError);
}

// Uniform (s, a) data, bootstrap through the optimal greedy policy: the
// tabular critic must land on the value-iteration Q*.
TEST(CriticUpdate, ChainCriticConvergesToOptimalValues) {
  ChainMdp chain(ChainSpec{});
  const Table qstar = value_iteration(chain.tabular());
  Rng rng(6);
  auto critic = tabular_critic(5, rng);
  auto actor = greedy_softmax(greedy_actions(qstar), rng);
  Optimizer opt({.kind = OptimizerKind::sgd, .learning_rate = 1.0});
  const std::size_t batch = 32;
  for (int it = 0; it < 5000; ++it) {
    std::vector<Transition> b;
    for (std::size_t i = 0; i < batch; ++i) {
      const double s = double(rng.index(5)), a = double(rng.index(2));
      StepResult r = chain.step({s}, {a}, rng);
      b.push_back({{s}, {a}, r.reward, r.next_state, false});
    }
    const auto y = td_targets(b, *critic, *actor, chain.gamma());
    critic_update(*critic, detail::stack_rows(b, &Transition::state), detail::stack_rows(b, &Transition::action), y,
                  Divergence::squared);
    opt.step(critic->params());
  }
  const Table q = critic->table();
  double err = 0.0;
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t a = 0; a < 2; ++a) err = std::max(err, std::abs(q[s][a] - qstar[s][a]));
  EXPECT_LT(err, 1e-2);
}

// The bootstrap path carries no gradient: the critic gradient equals the
// finite difference of the loss with targets held fixed, and perturbing the
// bootstrap network after the targets are formed changes nothing.
TEST(CriticUpdate, SemiGradientByPerturbation) {
  Rng rng(7);
  CriticSpec spec{.hidden = {4}, .activation = Activation::tanh};
  Critic live(spec, rng);
  TargetNetwork target(live, 0.5, rng);
  Actor actor(ActorSpec{.hidden = {3}, .activation = Activation::tanh}, rng);
  std::vector<Transition> b;
  for (int i = 0; i < 6; ++i)
    b.push_back({{rng.normal()}, {rng.normal()}, rng.normal(), {rng.normal()}, false});
  const Tensor s = detail::stack_rows(b, &Transition::state), a = detail::stack_rows(b, &Transition::action);

  const auto y = td_targets(b, live, actor, 0.9);
  critic_update(live, s, a, y, Divergence::squared);
  const auto g = grads(live.params());
  auto loss_at = [&] {
    const Tensor q = live.values(s, a);
    double l = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) l += (y[i] - q[i]) * (y[i] - q[i]);
    return l / double(y.size());
  };
  std::size_t k = 0;
  for (auto& e : live.params())
    for (double& v : e.tensor.values()) {
      const double keep = v, h = 1e-6;
      v = keep + h;
      const double up = loss_at();
      v = keep - h;
      const double dn = loss_at();
      v = keep;
      EXPECT_LT(relative_error(g[k++], (up - dn) / (2 * h), 1e-6), 1e-6) << e.name;
    }

  const auto yt = td_targets(b, target.critic(), actor, 0.9);
  critic_update(live, s, a, yt, Divergence::squared);
  const auto g1 = grads(live.params());
  for (auto& e : target.critic().params())
    for (double& v : e.tensor.values()) v += 0.3;
  critic_update(live, s, a, yt, Divergence::squared);
  EXPECT_EQ(grads(live.params()), g1);
  for (double v : grads(target.critic().params())) EXPECT_EQ(v, 0.0);
  for (double v : grads(actor.params())) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// Actor updates

TEST(ActorDpg, QuadraticCriticSlope) {
  Rng rng(8);
  auto critic = quadratic_critic(4.0, -1.0, -4.0, rng);  // −(a − 2)²
  Actor actor(ActorSpec{}, rng);
  fill(actor.params().get("l0.W"), {0.5});
  fill(actor.params().get("l0.b"), {0.0});
  actor_update_dpg(actor, *critic, Tensor({1, 1}));
  // ∂Q/∂a = −2(0 − 2) = 4; descent on −Q moves the bias up toward 2.
  EXPECT_NEAR(actor.params().get("l0.b").grad()[0], -4.0, 1e-12);
  EXPECT_EQ(actor.params().get("l0.W").grad()[0], 0.0);
  for (double v : grads(critic->params())) EXPECT_EQ(v, 0.0);
}

TEST(ActorDpg, ConstantCriticGivesZeroGradient) {
  Rng rng(9);
  auto critic = quadratic_critic(0.0, 0.0, 3.0, rng);
  Actor actor(ActorSpec{.hidden = {4}, .activation = Activation::tanh}, rng);
  actor_update_dpg(actor, *critic, random_tensor({5, 1}, rng));
  for (double v : grads(actor.params())) EXPECT_EQ(v, 0.0);
}

TEST(ActorDpg, MatchesFiniteDifferenceOfMeanQ) {
  Rng rng(10);
  Critic critic(CriticSpec{.state_dim = 2, .action_dim = 2, .hidden = {5}, .activation = Activation::tanh}, rng);
  Actor actor(ActorSpec{.state_dim = 2, .action_dim = 2, .hidden = {4}, .activation = Activation::tanh}, rng);
  const Tensor s = random_tensor({8, 2}, rng);
  actor_update_dpg(actor, critic, s);
  const auto g = grads(actor.params());
  auto objective = [&] {
    const Tensor q = critic.values(s, actor.mean_action(s));
    double m = 0.0;
    for (double v : q.data()) m += v;
    return m / double(q.size());
  };
  std::size_t k = 0;
  for (auto& e : actor.params())
    for (double& v : e.tensor.values()) {
      const double keep = v, h = 1e-5;
      v = keep + h;
      const double up = objective();
      v = keep - h;
      const double dn = objective();
      v = keep;
      EXPECT_LT(relative_error(-g[k++], (up - dn) / (2 * h), 1e-3), 1e-5) << e.name;
    }
}

TEST(ActorSvg0, VanishingScaleMatchesDpg) {
  Rng rng(11);
  Critic critic(CriticSpec{.hidden = {5}, .activation = Activation::tanh}, rng);
  Actor gauss(ActorSpec{.kind = ActorKind::gaussian, .hidden = {3}, .activation = Activation::tanh,
                        .init_log_scale = -40.0},
              rng);
  Actor det(ActorSpec{.hidden = {3}, .activation = Activation::tanh}, rng);
  // Copy the hidden layer and the mean row of the output layer.
  for (const char* n : {"l0.W", "l0.b"}) {
    auto src = gauss.params().get(n).data();
    std::copy(src.begin(), src.end(), det.params().get(n).values().begin());
  }
  {
    auto src = gauss.params().get("l1.W").data();
    std::copy(src.begin(), src.begin() + 3, det.params().get("l1.W").values().begin());
    det.params().get("l1.b").values()[0] = gauss.params().get("l1.b").data()[0];
  }
  const Tensor s = random_tensor({6, 1}, rng);
  actor_update_svg0(gauss, critic, s, random_tensor({6, 1}, rng));
  actor_update_dpg(det, critic, s);
  for (const char* n : {"l0.W", "l0.b"}) {
    auto a = gauss.params().get(n).grad(), b = det.params().get(n).grad();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6) << n;
  }
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(gauss.params().get("l1.W").grad()[i], det.params().get("l1.W").grad()[i], 1e-6);
  EXPECT_NEAR(gauss.params().get("l1.b").grad()[0], det.params().get("l1.b").grad()[0], 1e-6);
}

TEST(ActorSvg0, ConstantCriticGivesZeroGradient) {
  Rng rng(12);
  auto critic = quadratic_critic(0.0, 0.0, -1.0, rng);
  Actor actor(ActorSpec{.kind = ActorKind::gaussian, .hidden = {4}}, rng);
  actor_update_svg0(actor, *critic, random_tensor({5, 1}, rng), random_tensor({5, 1}, rng));
  for (double v : grads(actor.params())) EXPECT_EQ(v, 0.0);
}

// Q(a) = −(a − 2)², a = μ + σξ: the mean-parameter gradient of −E Q is
// 2(μ − 2) in expectation, with per-sample spread 2σ.
TEST(ActorSvg0, MeanGradientMatchesGaussianExpectation) {
  Rng rng(13);
  auto critic = quadratic_critic(4.0, -1.0, -4.0, rng);
  Actor actor(ActorSpec{.kind = ActorKind::gaussian}, rng);
  const double mu = 0.7, sigma = 0.8;
  fill(actor.params().get("l0.W"), {0.0, 0.0});
  fill(actor.params().get("l0.b"), {mu, std::log(sigma)});
  const std::size_t n = 20000;
  actor_update_svg0(actor, *critic, Tensor({n, 1}), standard_normal(n, 1, rng));
  const double se = 2.0 * sigma / std::sqrt(double(n));
  EXPECT_NEAR(actor.params().get("l0.b").grad()[0], 2.0 * (mu - 2.0), 3.0 * se);
}

TEST(ActorSoftmax, DeterministicActorRejectsSoftmaxOps) {
  Rng rng(14);
  Actor det(ActorSpec{}, rng);
  EXPECT_THROW(det.probabilities(), UsageError);
  Tape t;
  EXPECT_THROW(det.build_gaussian(t, t.input("s")), UsageError);
}

// ---------------------------------------------------------------------------
// Target networks, replay, entropy

TEST(TargetUpdate, CopyMidpointAndGeometricDecay) {
  ParamStore live, target;
  live.add("w", Tensor({2}, std::vector<double>{2.0, -4.0}));
  target.add("w", Tensor({2}));
  target_update(target, live, 1.0);
  EXPECT_TRUE(target == live);

  ParamStore t2;
  t2.add("w", Tensor({2}));
  target_update(t2, live, 0.5);
  EXPECT_EQ(t2.get("w").data()[0], 1.0);
  EXPECT_EQ(t2.get("w").data()[1], -2.0);

  const double tau = 0.05;
  ParamStore t3;
  t3.add("w", Tensor({2}, std::vector<double>{-1.0, 3.0}));
  auto gap = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 2; ++i) s += std::pow(t3.get("w").data()[i] - live.get("w").data()[i], 2);
    return std::sqrt(s);
  };
  double prev = gap();
  const double start = prev;
  for (int k = 1; k <= 100; ++k) {
    target_update(t3, live, tau);
    const double now = gap();
    EXPECT_NEAR(now / prev, 1.0 - tau, 1e-9) << k;
    prev = now;
  }
  EXPECT_NEAR(prev, start * std::pow(1.0 - tau, 100), 1e-12);
  EXPECT_THROW(target_update(t3, live, 0.0), ConfigError);
  ParamStore other;
  other.add("v", Tensor({2}));
  EXPECT_THROW(target_update(other, live, 0.5), ConfigError);
}

TEST(TargetUpdate, NetworkShadowsCritic) {
  Rng rng(15);
  Critic live(CriticSpec{.hidden = {3}}, rng);
  TargetNetwork target(live, 1.0, rng);
  EXPECT_TRUE(target.critic().params() == live.params());
  live.params().get("l0.b").values()[0] = 9.0;
  EXPECT_FALSE(target.critic().params() == live.params());
  target.update(live);
  EXPECT_TRUE(target.critic().params() == live.params());
}

TEST(TransitionReplay, PushSampleAndDeterminism) {
  TransitionReplay buf(3);
  for (int i = 0; i < 4; ++i) replay_push(buf, {{double(i)}, {0.0}, 0.0, {0.0}, false});
  EXPECT_EQ(buf.at(0).state[0], 1.0);
  const auto a = replay_sample(buf, 20, 99), b = replay_sample(buf, 20, 99);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].state, b[i].state);
  EXPECT_THROW(replay_sample(TransitionReplay(2), 1, 1), UsageError);
}

TEST(Entropy, ClosedFormsAndDeterministicRejection) {
  Rng rng(16);
  Actor gauss(ActorSpec{.kind = ActorKind::gaussian, .init_log_scale = 0.0}, rng);
  fill(gauss.params().get("l0.W"), {0.3, 0.0});
  EXPECT_NEAR(entropy_bonus(gauss, Tensor({4, 1})), 0.5 * std::log(2 * std::numbers::pi * std::numbers::e), 1e-12);
  EXPECT_NEAR(entropy_bonus(gauss, Tensor({4, 1})), 1.4189385332, 1e-9);

  Actor soft(ActorSpec{.kind = ActorKind::softmax, .states = 2, .actions = 4}, rng);
  EXPECT_NEAR(entropy_bonus(soft, Tensor({2, 1}, std::vector<double>{0.0, 1.0})), std::log(4.0), 1e-12);

  Actor det(ActorSpec{}, rng);
  EXPECT_THROW(entropy_bonus(det, Tensor({1, 1})), ConfigError);
}

TEST(Entropy, BonusWidensFinalPolicy) {
  AcConfig cfg;
  cfg.actor = ActorKind::gaussian;
  auto plain = train_ac(cfg, 5);
  cfg.entropy = 0.1;
  auto bonus = train_ac(cfg, 5);
  const double s0 = *find_metric(plain.record.summary, "sigma_0");
  const double s1 = *find_metric(bonus.record.summary, "sigma_0");
  EXPECT_GT(s1, s0);
}

// ---------------------------------------------------------------------------
// Compatible critic

TEST(Compatible, ZeroAdvantagesGiveZeroWeights) {
  Rng rng(17);
  std::vector<std::vector<double>> phi;
  for (int i = 0; i < 50; ++i) phi.push_back({rng.normal(), rng.normal(), rng.normal()});
  const auto fit = compatible_critic_fit(phi, std::vector<double>(50, 0.0));
  EXPECT_FALSE(fit.ridge);
  for (double w : fit.w) EXPECT_EQ(w, 0.0);
}

TEST(Compatible, CollinearFeaturesTakeRidgePath) {
  std::vector<std::vector<double>> phi;
  std::vector<double> adv;
  for (int i = 0; i < 20; ++i) {
    const double x = 0.1 * i - 1.0;
    phi.push_back({x, 2.0 * x});
    adv.push_back(3.0 * x);
  }
  const auto fit = compatible_critic_fit(phi, adv);
  EXPECT_TRUE(fit.ridge);
  for (double w : fit.w) EXPECT_TRUE(std::isfinite(w));
  // Ridge picks the minimum-norm direction: w ∝ (1, 2) with w·(1,2) ≈ 3.
  EXPECT_NEAR(fit.w[0] + 2.0 * fit.w[1], 3.0, 1e-4);
  EXPECT_NEAR(fit.w[1], 2.0 * fit.w[0], 1e-4);
}

TEST(Compatible, SoftmaxScoreIsIndicatorMinusPolicy) {
  const Table pi{{0.25, 0.75}, {0.5, 0.5}};
  EXPECT_EQ(softmax_score(pi, 0, 1), (std::vector<double>{-0.25, 0.25, 0.0, 0.0}));
  EXPECT_EQ(softmax_score(pi, 1, 0), (std::vector<double>{0.0, 0.0, 0.5, -0.5}));
}

TEST(Compatible, PolicyGradientMatchesEnumeration) {
  ChainMdp chain(ChainSpec{.rewards = {0.0, 1.0}, .gamma = 0.5, .slip = 0.2});
  const Table logits{{0.3, -0.2}, {-0.5, 0.4}};
  const Table exact = exact_policy_gradient(chain.tabular(), logits);
  Rng rng(18);
  const auto est = compatible_policy_gradient(chain, logits, 100000, rng);
  ASSERT_EQ(est.gradient.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    ASSERT_GT(est.standard_error[j], 0.0);
    EXPECT_LT(std::abs(est.gradient[j] - exact[j / 2][j % 2]), 3.0 * est.standard_error[j]) << j;
  }
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainAc, BanditReachesOptimumAndRewardSurface) {
  auto run = train_ac(AcConfig{}, 1);
  ASSERT_EQ(run.record.rows.size(), 5000u);
  EXPECT_NEAR(*find_metric(run.record.summary, "action_0"), 1.5, 1e-2);
  EXPECT_LT(*find_metric(run.record.summary, "critic_error"), 5e-2);
}

TEST(TrainAc, ChainGreedyPolicyIsOptimal) {
  AcConfig cfg;
  cfg.env = EnvKind::chain;
  cfg.actor = ActorKind::softmax;
  auto run = train_ac(cfg, 2);
  const auto best = greedy_actions(value_iteration(dynamic_cast<ChainMdp&>(*run.env).tabular()));
  EXPECT_EQ(greedy_actions(run.actor->probabilities()), best);
  EXPECT_EQ(*find_metric(run.record.summary, "greedy_match"), 1.0);
}

TEST(TrainAc, CompatibleActorFindsOptimalChainPolicy) {
  AcConfig cfg;
  cfg.env = EnvKind::chain;
  cfg.actor = ActorKind::softmax;
  cfg.compatible = true;
  cfg.compatible_samples = 500;
  cfg.schedule.rounds = 300;
  cfg.schedule.inner_lr = 0.1;
  auto run = train_ac(cfg, 3);
  EXPECT_EQ(*find_metric(run.record.summary, "greedy_match"), 1.0);
}

// γ = 0 one-step episodes: the critic is a regression of Q(s, a) onto the
// reward, compared against Monte-Carlo reward means per state.
TEST(TrainAc, ZeroDiscountCriticRegressesOntoRewards) {
  AcConfig cfg;
  cfg.env = EnvKind::chain;
  cfg.actor = ActorKind::softmax;
  cfg.chain = ChainSpec{.rewards = {0.3, -0.2, 1.0}, .gamma = 0.0, .reward_noise = 0.2, .one_step = true};
  cfg.schedule.inner_lr = 0.0;  // uniform behaviour policy
  cfg.schedule.outer_lr = 0.05;
  cfg.schedule.final_lr_scale = 0.01;
  auto run = train_ac(cfg, 4);
  ChainMdp chain(cfg.chain);
  Rng mc(40);
  const Table q = run.critic->table();
  for (std::size_t s = 0; s < 3; ++s) {
    double mean = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) mean += chain.step({double(s)}, {0.0}, mc).reward / n;
    for (std::size_t a = 0; a < 2; ++a) EXPECT_NEAR(q[s][a], mean, 1e-2) << s << "," << a;
  }
}

TEST(TrainAc, SameSeedSameStream) {
  AcConfig cfg;
  cfg.schedule.rounds = 300;
  cfg.replay_capacity = 256;
  cfg.target_tau = 0.1;
  auto a = train_ac(cfg, 9), b = train_ac(cfg, 9), c = train_ac(cfg, 10);
  ASSERT_EQ(a.record.rows.size(), b.record.rows.size());
  for (std::size_t i = 0; i < a.record.rows.size(); ++i) EXPECT_EQ(a.record.rows[i].metrics, b.record.rows[i].metrics);
  EXPECT_FALSE(a.record.rows.back().metrics == c.record.rows.back().metrics);
}

TEST(TrainAc, StabilizedBanditStillConverges) {
  AcConfig cfg;
  cfg.replay_capacity = 2048;
  cfg.target_tau = 0.05;
  auto run = train_ac(cfg, 11);
  EXPECT_NEAR(*find_metric(run.record.summary, "action_0"), 1.5, 5e-2);
}

TEST(TrainAc, NetworkCriticWithBatchNormRuns) {
  AcConfig cfg;
  cfg.actor_hidden = {8};
  cfg.critic_hidden = {16};
  cfg.actor_batch_norm = cfg.critic_batch_norm = true;
  cfg.schedule.rounds = 200;
  auto run = train_ac(cfg, 12);
  EXPECT_EQ(run.record.rows.size(), 200u);
  EXPECT_TRUE(std::isfinite(*find_metric(run.record.summary, "critic_error")));
}

TEST(TrainAc, InvalidConfigurations) {
  AcConfig cfg;
  cfg.env = EnvKind::chain;  // deterministic actor on a finite action set
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  cfg = AcConfig{};
  cfg.actor = ActorKind::softmax;
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  cfg = AcConfig{};
  cfg.entropy = 0.1;
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  cfg = AcConfig{};
  cfg.divergence = Divergence::cross_entropy;
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  cfg = AcConfig{};
  cfg.target_tau = 1.5;
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  cfg = AcConfig{};
  cfg.critic_batch_norm = true;
  EXPECT_THROW(train_ac(cfg, 1), ConfigError);
  EXPECT_THROW(parse_env_kind("pendulum"), ConfigError);
  EXPECT_THROW(parse_actor_kind("beta"), ConfigError);
}

TEST(Trace, CsvColumnsAndRows) {
  ChainMdp chain(ChainSpec{.horizon = 3});
  Rng rng(19);
  Actor actor(ActorSpec{.kind = ActorKind::softmax, .states = 5, .actions = 2}, rng);
  const auto rows = rollout(chain, actor, 2, 0.0, rng);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[3].episode, 1u);
  EXPECT_EQ(rows[3].t, 0u);
  const auto path = std::filesystem::temp_directory_path() / "advlab_trace_test.csv";
  write_trace_csv(path.string(), rows);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "episode,t,s0,a0,r");
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 6u);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace advlab
