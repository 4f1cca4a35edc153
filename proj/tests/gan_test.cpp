#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "advlab/gan.hpp"

namespace advlab {
namespace {

double xent(double p, double t) { return -(t * std::log(p) + (1 - t) * std::log(1 - p)); }

TEST(GanLoss, UninformativeDiscriminatorCostsTwoLogTwo) {
  std::vector<double> half(8, 0.5);
  EXPECT_NEAR(discriminator_loss(half, half), 2 * std::log(2.0), 1e-15);
}

TEST(GanLoss, PerfectDiscriminatorCostsNearZero) {
  std::vector<double> real(4, 1.0 - 1e-12), fake(4, 1e-12);
  EXPECT_LT(discriminator_loss(real, fake), 1e-10);
  // Exactly saturated probabilities hit the log floor instead of infinity.
  std::vector<double> one{1.0}, zero{0.0};
  EXPECT_TRUE(std::isfinite(discriminator_loss(zero, one)));
}

TEST(GanLoss, SmoothedRealTerm) {
  const LabelSmoothing ls{0.1};
  std::vector<double> real{0.9}, fake{0.5};
  const double real_term = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  EXPECT_NEAR(real_term, 0.3251, 5e-5);
  EXPECT_NEAR(discriminator_loss(real, fake, ls), real_term + std::log(2.0), 1e-14);
  // One-sided smoothing leaves fake targets at 0.
  EXPECT_NEAR(discriminator_loss(real, fake, {0.1, false}), real_term + xent(0.5, 0.0), 1e-14);
}

TEST(GanLoss, SmoothingRangeIsChecked) {
  std::vector<double> p{0.5};
  EXPECT_THROW(discriminator_loss(p, p, {0.5}), ConfigError);
  EXPECT_THROW(discriminator_loss(p, p, {-0.1}), ConfigError);
  EXPECT_NO_THROW(discriminator_loss(p, p, {0.49}));
}

TEST(GanLoss, GeneratorLossExamples) {
  std::vector<double> fooled{1.0 - 1e-12}, half{0.5};
  EXPECT_LT(generator_loss(fooled, GanLossKind::non_saturating), 1e-10);
  EXPECT_NEAR(generator_loss(half, GanLossKind::minimax), std::log(0.5), 1e-15);
  std::vector<double> rejected{1e-12};
  const double mm = generator_loss(rejected, GanLossKind::minimax);
  EXPECT_LE(mm, 0.0);
  EXPECT_GT(mm, -1e-10);
}

TEST(GanLoss, LabelSmoothingMapsHardLabels) {
  const double eps = 0.1;
  Tensor labels({4}, std::vector<double>{0, 1, 1, 0});
  Tensor s = smooth_labels(labels, {eps});
  EXPECT_EQ(s[0], eps);
  EXPECT_EQ(s[1], 1.0 - eps);
  EXPECT_EQ(s[2], 1.0 - eps);
  EXPECT_EQ(s[3], eps);
  Tensor one_sided = smooth_labels(labels, {eps, false});
  EXPECT_EQ(one_sided[0], 0.0);
  EXPECT_EQ(one_sided[1], 1.0 - eps);
  EXPECT_THROW(smooth_labels(Tensor({1}, std::vector<double>{0.5}), {eps}), ConfigError);
  Tensor unchanged = smooth_labels(labels, {0.0});
  EXPECT_TRUE(unchanged == labels);
}

TEST(GanLoss, SmoothedGradientStaysFiniteNearOne) {
  Tape t;
  Var p = t.input("p");
  Var target = t.input("t");
  Var loss = t.bce(p, target);
  t.evaluate({{"p", Tensor({1, 1}, 1.0 - 1e-9)}, {"t", Tensor({1, 1}, 0.9)}});
  t.backward(loss);
  EXPECT_TRUE(std::isfinite(t.gradient(p)[0]));
}

TEST(GanLoss, TapeFormsMatchDirectEvaluation) {
  Rng rng(3);
  Tensor pr({16, 1}), pf({16, 1});
  for (double& v : pr.values()) v = 0.05 + 0.9 * rng.uniform();
  for (double& v : pf.values()) v = 0.05 + 0.9 * rng.uniform();
  const LabelSmoothing ls{0.15};
  Tape t;
  Var r = t.input("r"), f = t.input("f"), tr = t.input("tr"), tf = t.input("tf"), ones = t.input("ones"),
      zeros = t.input("zeros");
  Var d = discriminator_loss(t, r, f, tr, tf);
  Var ns = generator_loss(t, f, ones, GanLossKind::non_saturating);
  Var mm = generator_loss(t, f, zeros, GanLossKind::minimax);
  t.evaluate({{"r", pr},
              {"f", pf},
              {"tr", Tensor({16, 1}, ls.real_target())},
              {"tf", Tensor({16, 1}, ls.fake_target())},
              {"ones", Tensor({16, 1}, 1.0)},
              {"zeros", Tensor({16, 1}, 0.0)}});
  EXPECT_NEAR(t.value(d).item(), discriminator_loss(pr.data(), pf.data(), ls), 1e-13);
  EXPECT_NEAR(t.value(ns).item(), generator_loss(pf.data(), GanLossKind::non_saturating), 1e-13);
  EXPECT_NEAR(t.value(mm).item(), generator_loss(pf.data(), GanLossKind::minimax), 1e-13);
}

// ∂NS/∂a = ∂MM/∂a · (1 − D(a)) / D(a), sample by sample, through a real discriminator.
TEST(GanLoss, NonSaturatingAndMinimaxGradientRatio) {
  Rng rng(17);
  Mlp disc({.inputs = 1, .hidden = {16, 16}, .outputs = 1, .activation = Activation::leaky_relu,
            .output_activation = Activation::sigmoid},
           rng);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a({8, 1});
    for (double& v : a.values()) v = 3.0 * rng.normal();
    auto grad_of = [&](GanLossKind kind, Tensor& probs) {
      Tape t;
      Var x = t.input("a");
      Var p = disc.build(t, x, BatchNormMode::infer);
      Var loss = generator_loss(t, p, t.input("target"), kind);
      t.evaluate({{"a", a}, {"target", Tensor({8, 1}, kind == GanLossKind::non_saturating ? 1.0 : 0.0)}});
      t.backward(loss, {&disc.params()});
      probs = t.value(p);
      return std::vector<double>(t.gradient(x).begin(), t.gradient(x).end());
    };
    Tensor d;
    auto ns = grad_of(GanLossKind::non_saturating, d);
    auto mm = grad_of(GanLossKind::minimax, d);
    for (std::size_t i = 0; i < 8; ++i) {
      const double expect = mm[i] * (1 - d[i]) / d[i];
      EXPECT_NEAR(ns[i], expect, 1e-9 * std::max(1.0, std::abs(expect)));
    }
  }
}

TEST(ToyData, GaussianSampleMean) {
  auto g = ToyDistribution::gaussian(2.0, 1.0);
  Tensor x = sample_toy(g, 100000, std::uint64_t{42});
  double m = 0;
  for (double v : x.data()) m += v;
  m /= static_cast<double>(x.size());
  EXPECT_NEAR(m, 2.0, 3.0 / std::sqrt(1e5));
}

TEST(ToyData, DegenerateWeightsUseOneComponent) {
  auto d = ToyDistribution::mixture({-2.0, 2.0}, 0.25, {1.0, 0.0});
  Tensor x = sample_toy(d, 20000, std::uint64_t{1});
  for (double v : x.data()) ASSERT_LT(v, 0.0);
}

TEST(ToyData, SameSeedSameSamples) {
  auto d = ToyDistribution::ring(8, 2.0, 0.1);
  EXPECT_TRUE(sample_toy(d, 500, std::uint64_t{9}) == sample_toy(d, 500, std::uint64_t{9}));
  EXPECT_FALSE(sample_toy(d, 500, std::uint64_t{9}) == sample_toy(d, 500, std::uint64_t{10}));
  EXPECT_EQ(sample_toy(d, 3, std::uint64_t{9}).shape(), (Shape{3, 2}));
}

TEST(ToyData, Validation) {
  EXPECT_THROW(ToyDistribution::mixture({-1.0, 1.0}, 0.25, {0.7, 0.7}), ConfigError);
  EXPECT_THROW(ToyDistribution::mixture({-1.0, 1.0}, 0.0), ConfigError);
  EXPECT_THROW(ToyDistribution::mixture({-1.0, 1.0}, 0.1, {1.2, -0.2}), ConfigError);
  EXPECT_THROW(sample_toy(ToyDistribution::gaussian(0, 1), 0, std::uint64_t{1}), ConfigError);
}

TEST(Eval, HistogramKlMatchesHandComputation) {
  Tensor p({4, 1}, std::vector<double>{0.5, 0.5, 0.5, 1.5});
  Tensor q({2, 1}, std::vector<double>{1.5, 1.5});
  // Counts (3,1) and (0,2) smoothed to (4,2)/6 and (1,3)/4.
  const double expect = 4.0 / 6 * std::log((4.0 / 6) / 0.25) + 2.0 / 6 * std::log((2.0 / 6) / 0.75);
  EXPECT_NEAR(histogram_kl(p, q, 2, 0.0, 2.0), expect, 1e-15);
  EXPECT_EQ(histogram_kl(p, p, 2, 0.0, 2.0), 0.0);
  // Out-of-range samples fall into the edge bins.
  Tensor far({2, 1}, std::vector<double>{-10.0, 10.0});
  Tensor edge({2, 1}, std::vector<double>{0.1, 1.9});
  EXPECT_EQ(histogram_kl(far, edge, 2, 0.0, 2.0), 0.0);
}

TEST(Eval, HistogramKlOfSameLawIsSmall) {
  auto d = ToyDistribution::mixture({-2.0, 2.0}, 0.25);
  const double kl = histogram_kl(sample_toy(d, 50000, std::uint64_t{1}), sample_toy(d, 50000, std::uint64_t{2}), 64,
                                 -6.0, 6.0);
  EXPECT_GE(kl, 0.0);
  EXPECT_LT(kl, 0.01);
}

TEST(Eval, CoverageOfTrueSamplerAndConstantGenerator) {
  auto ring = ToyDistribution::ring(8, 2.0, 0.05);
  EXPECT_EQ(mode_coverage(sample_toy(ring, 20000, std::uint64_t{3}), ring, 0.25), 1.0);
  Tensor constant({1000, 2});
  for (std::size_t i = 0; i < 1000; ++i) {
    constant.values()[2 * i] = ring.means[3][0];
    constant.values()[2 * i + 1] = ring.means[3][1];
  }
  std::vector<double> shares;
  EXPECT_DOUBLE_EQ(mode_coverage(constant, ring, 0.25, &shares), 1.0 / 8);
  EXPECT_EQ(shares[3], 1.0);
  // Degenerate components are not counted.
  auto lopsided = ToyDistribution::mixture({-2.0, 2.0}, 0.25, {1.0, 0.0});
  EXPECT_EQ(mode_coverage(sample_toy(lopsided, 1000, std::uint64_t{1}), lopsided, 0.25), 1.0);
}

TEST(Eval, AccuracyCountsTiesAsHalf) {
  Tensor real({2, 1}, std::vector<double>{0.9, 0.5});
  Tensor fake({2, 1}, std::vector<double>{0.1, 0.7});
  EXPECT_DOUBLE_EQ(discriminator_accuracy(real, fake), 2.5 / 4);
}

GanConfig small_config(std::size_t rounds) {
  GanConfig c;
  c.smoothing.epsilon = 0.1;
  c.schedule.rounds = rounds;
  c.eval_every = 100;
  c.eval.samples = 5000;
  c.eval.accuracy_samples = 1000;
  return c;
}

TEST(TrainGan, SameSeedReproducesMetrics) {
  auto a = train_gan(small_config(200), 7);
  auto b = train_gan(small_config(200), 7);
  ASSERT_EQ(a.record.rows.size(), 200u);
  ASSERT_EQ(a.record.rows.size(), b.record.rows.size());
  for (std::size_t i = 0; i < a.record.rows.size(); ++i) EXPECT_EQ(a.record.rows[i].metrics, b.record.rows[i].metrics);
  EXPECT_TRUE(a.model->generator().params() == b.model->generator().params());
  auto c = train_gan(small_config(200), 8);
  EXPECT_FALSE(a.record.rows.back().metrics == c.record.rows.back().metrics);
}

TEST(TrainGan, EvaluationCadence) {
  auto run = train_gan(small_config(250), 7);
  std::size_t evals = 0;
  for (const auto& r : run.record.rows) evals += find_metric(r.metrics, "kl").has_value();
  EXPECT_EQ(evals, 3u);  // after rounds 100, 200 and the final one
  EXPECT_TRUE(find_metric(run.record.rows.back().metrics, "coverage").has_value());
  EXPECT_TRUE(find_metric(run.record.summary, "kl").has_value());
}

TEST(TrainGan, FrozenGeneratorIsEasilyDetected) {
  auto cfg = small_config(1500);
  cfg.schedule.inner_lr = 0.0;
  auto run = train_gan(cfg, 11);
  EXPECT_GT(run.final_report.disc_accuracy, 0.95);
}

TEST(TrainGan, ExactSamplerHoldsDiscriminatorAtChance) {
  auto cfg = small_config(3000);
  cfg.exact_generator = true;
  cfg.eval.accuracy_samples = 10000;
  auto run = train_gan(cfg, 13);
  EXPECT_NEAR(run.final_report.disc_accuracy, 0.5, 0.05);
  EXPECT_EQ(run.final_report.coverage, 1.0);
}

TEST(TrainGan, BatchNormAndMinibatchFeaturesRun) {
  auto cfg = small_config(100);
  cfg.generator_batch_norm = cfg.discriminator_batch_norm = true;
  cfg.mbd_kernels = 4;
  auto run = train_gan(cfg, 3);
  EXPECT_TRUE(std::isfinite(run.record.rows.back().metrics.front().second));
  EXPECT_GE(run.final_report.coverage, 0.0);
}

TEST(TrainGan, FreezeFlagsAreLogged) {
  auto cfg = small_config(50);
  cfg.stabilizers.freeze = FreezeController{};
  auto run = train_gan(cfg, 3);
  EXPECT_TRUE(find_metric(run.record.rows.back().metrics, "g_updated").has_value());
}

TEST(TrainGan, InvalidConfigurations) {
  auto cfg = small_config(10);
  cfg.batch = 1;
  EXPECT_THROW(train_gan(cfg, 1), ConfigError);
  cfg = small_config(10);
  cfg.generator_hidden = {128};
  EXPECT_THROW(train_gan(cfg, 1), ConfigError);
  cfg = small_config(10);
  cfg.smoothing.epsilon = 0.7;
  EXPECT_THROW(train_gan(cfg, 1), ConfigError);
  cfg = small_config(10);
  cfg.replay = SampleReplayConfig{.capacity = 8, .rho = 0.5};
  EXPECT_THROW(gan_replay_experiment(cfg, 1), ConfigError);
  EXPECT_THROW(gan_replay_experiment(small_config(10), 1), ConfigError);
}

TEST(GanReplay, ZeroMixingIsBitIdenticalToBaseline) {
  auto base = train_gan(small_config(300), 21);
  auto cfg = small_config(300);
  cfg.replay = SampleReplayConfig{.capacity = 4096, .rho = 0.0};
  auto rep = gan_replay_experiment(cfg, 21);
  EXPECT_TRUE(rep.record.exploratory);
  ASSERT_EQ(base.record.rows.size(), rep.record.rows.size());
  for (std::size_t i = 0; i < base.record.rows.size(); ++i)
    ASSERT_EQ(base.record.rows[i].metrics, rep.record.rows[i].metrics) << "round " << i;
  EXPECT_TRUE(base.model->discriminator().params() == rep.model->discriminator().params());
}

TEST(GanReplay, MixedRunCompletesWithSameCadence) {
  auto cfg = small_config(300);
  cfg.replay = SampleReplayConfig{.capacity = 4096, .rho = 0.5};
  auto rep = gan_replay_experiment(cfg, 21);
  auto base = train_gan(small_config(300), 21);
  ASSERT_EQ(rep.record.rows.size(), 300u);
  for (std::size_t i = 0; i < 300; ++i) {
    EXPECT_EQ(find_metric(rep.record.rows[i].metrics, "kl").has_value(),
              find_metric(base.record.rows[i].metrics, "kl").has_value());
  }
  EXPECT_FALSE(rep.record.rows.back().metrics == base.record.rows.back().metrics);
}

TEST(GanSamples, CsvHasOneRowPerSample) {
  const auto path = std::filesystem::temp_directory_path() / "advlab_samples_test.csv";
  Tensor s({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6.5});
  write_samples_csv(path.string(), s);
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "x0,x1");
  EXPECT_EQ(lines[3], "5,6.5");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace advlab
