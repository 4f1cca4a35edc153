#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
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

// ---------------------------------------------------------------------------
// Toy data

struct ToyDistribution {
  enum class Kind { gaussian, mixture, ring };

  Kind kind = Kind::mixture;
  std::vector<std::vector<double>> means;  // one row per component
  std::vector<double> scales;
  std::vector<double> weights;

  static ToyDistribution gaussian(double mean, double scale) {
    return {Kind::gaussian, {{mean}}, {scale}, {1.0}};
  }

  static ToyDistribution mixture(std::vector<double> centers, double scale, std::vector<double> weights = {}) {
    ToyDistribution d{Kind::mixture, {}, {}, {}};
    for (double c : centers) {
      d.means.push_back({c});
      d.scales.push_back(scale);
    }
    d.weights = weights.empty() ? std::vector<double>(centers.size(), 1.0 / static_cast<double>(centers.size()))
                                : std::move(weights);
    d.validate();
    return d;
  }

  /// m equally weighted 2-D Gaussians evenly spaced on a circle.
  static ToyDistribution ring(std::size_t m, double radius, double scale) {
    ToyDistribution d{Kind::ring, {}, {}, {}};
    for (std::size_t k = 0; k < m; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(m);
      d.means.push_back({radius * std::cos(a), radius * std::sin(a)});
      d.scales.push_back(scale);
      d.weights.push_back(1.0 / static_cast<double>(m));
    }
    d.validate();
    return d;
  }

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
  std::size_t components() const { return means.size(); }

  void validate() const {
    if (means.empty()) throw ConfigError("distribution needs at least one component");
    if (scales.size() != means.size() || weights.size() != means.size())
      throw ConfigError("distribution component lists differ in length");
    const std::size_t d = dim();
    if (d < 1 || d > 2) throw ConfigError("toy data dimension must be 1 or 2");
    double total = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      if (means[k].size() != d) throw ConfigError("component means differ in dimension");
      if (!(scales[k] > 0.0)) throw ConfigError("component scales must be positive");
      if (!(weights[k] >= 0.0)) throw ConfigError("component weights must be non-negative");
      total += weights[k];
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("component weights must sum to 1");
  }
};

inline const char* to_string(ToyDistribution::Kind k) {
  switch (k) {
    case ToyDistribution::Kind::gaussian: return "gaussian";
    case ToyDistribution::Kind::mixture: return "mixture";
    case ToyDistribution::Kind::ring: return "ring";
  }
  return "?";
}

/// n i.i.d. draws as an [n, dim] tensor.
inline Tensor sample_toy(const ToyDistribution& dist, std::size_t n, Rng& rng) {
  if (n < 1) throw ConfigError("sample count must be at least 1");
  const std::size_t d = dist.dim();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = 0;
    if (dist.components() > 1) {
      const double u = rng.uniform();
      double acc = 0.0;
      k = dist.components() - 1;
      for (std::size_t j = 0; j < dist.components(); ++j) {
        acc += dist.weights[j];
        if (u < acc) {
          k = j;
          break;
        }
      }
      while (dist.weights[k] == 0.0 && k > 0) --k;  // rounding slack never lands on an empty component
    }
    for (std::size_t j = 0; j < d; ++j) out.values()[i * d + j] = dist.means[k][j] + dist.scales[k] * rng.normal();
  }
  return out;
}

inline Tensor sample_toy(const ToyDistribution& dist, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_toy(dist, n, rng);
}

// ---------------------------------------------------------------------------
// Losses

enum class GanLossKind { minimax, non_saturating };

inline const char* to_string(GanLossKind k) { return k == GanLossKind::minimax ? "minimax" : "non_saturating"; }

inline GanLossKind parse_gan_loss(const std::string& s) {
  if (s == "minimax") return GanLossKind::minimax;
  if (s == "non_saturating") return GanLossKind::non_saturating;
  throw ConfigError("unknown GAN loss '" + s + "'");
}

/// Real labels become 1−ε; fake labels become ε unless smoothing is one-sided.
struct LabelSmoothing {
  double epsilon = 0.0;
  bool smooth_fake = true;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon < 0.5)) throw ConfigError("label smoothing must lie in [0, 0.5)");
  }
  double real_target() const { return 1.0 - epsilon; }
  double fake_target() const { return smooth_fake ? epsilon : 0.0; }
};

/// Maps hard 0/1 labels to their smoothed targets.
inline Tensor smooth_labels(const Tensor& labels, const LabelSmoothing& ls) {
  ls.validate();
  Tensor out(labels.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1.0) out.values()[i] = ls.real_target();
    else if (labels[i] == 0.0) out.values()[i] = ls.fake_target();
    else throw ConfigError("labels must be 0 or 1");
  }
  return out;
}

namespace detail {
inline double mean_xent(std::span<const double> p, double target) {
  double s = 0.0;
  for (double v : p) s -= target * clamped_log(v) + (1.0 - target) * clamped_log(1.0 - v);
  return s / static_cast<double>(p.size());
}
}  // namespace detail

/// Smoothed cross-entropy of the discriminator on real and fake probabilities.
inline double discriminator_loss(std::span<const double> real, std::span<const double> fake,
                                 const LabelSmoothing& ls = {}) {
  ls.validate();
  if (real.empty() || fake.empty()) throw ConfigError("discriminator loss needs real and fake probabilities");
  return detail::mean_xent(real, ls.real_target()) + detail::mean_xent(fake, ls.fake_target());
}

inline double generator_loss(std::span<const double> fake, GanLossKind kind) {
  if (fake.empty()) throw ConfigError("generator loss needs fake probabilities");
  if (kind == GanLossKind::non_saturating) return detail::mean_xent(fake, 1.0);
  return -detail::mean_xent(fake, 0.0);
}

/// Tape form: bce(real, t_real) + bce(fake, t_fake).
inline Var discriminator_loss(Tape& t, Var p_real, Var p_fake, Var t_real, Var t_fake) {
  return t.add(t.bce(p_real, t_real), t.bce(p_fake, t_fake));
}

/// Tape form. `target` must be bound to ones (non-saturating) or zeros (minimax).
inline Var generator_loss(Tape& t, Var p_fake, Var target, GanLossKind kind) {
  Var ce = t.bce(p_fake, target);
  return kind == GanLossKind::non_saturating ? ce : t.neg(ce);
}

// ---------------------------------------------------------------------------
// Model

struct SampleReplayConfig {
  std::size_t capacity = 4096;
  double rho = 0.5;  // share of each fake minibatch drawn from the buffer

  void validate(std::size_t batch) const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("replay mixing fraction must lie in [0, 1]");
    if (capacity < batch) throw ConfigError("replay capacity must be at least the batch size");
  }
};

struct EvalConfig {
  std::size_t samples = 50000;
  std::size_t bins = 64;
  double lo = -6.0;
  double hi = 6.0;
  double coverage_threshold = 0.25;  // of each component's expected share
  std::size_t accuracy_samples = 5000;  // per class
};

struct GanConfig {
  ToyDistribution data = ToyDistribution::mixture({-2.0, 2.0}, 0.25);
  std::size_t noise_dim = 8;
  std::vector<std::size_t> generator_hidden{32, 32};
  std::vector<std::size_t> discriminator_hidden{32, 32};
  Activation activation = Activation::leaky_relu;
  GanLossKind loss = GanLossKind::non_saturating;
  // Pilot-tuned: faster rates or beta1 = 0.9 leave the generator oscillating
  // between over-narrow modes; the linear decay lets it settle.
  UpdateSchedule schedule{.inner_steps = 1,
                          .outer_steps = 1,
                          .outer_lr = 2e-4,
                          .inner_lr = 2e-4,
                          .rounds = 20000,
                          .mode = UpdateMode::alternating,
                          .optimizer = OptimizerKind::adam,
                          .beta1 = 0.5,
                          .final_lr_scale = 0.0};
  std::size_t batch = 64;
  LabelSmoothing smoothing{};
  bool generator_batch_norm = false;
  bool discriminator_batch_norm = false;
  std::size_t mbd_kernels = 0;
  std::size_t mbd_kernel_dim = 4;
  BilevelStabilizers stabilizers{};
  std::optional<SampleReplayConfig> replay{};
  /// Replace the generator by the exact data sampler (its parameters never move).
  bool exact_generator = false;
  std::size_t eval_every = 1000;
  EvalConfig eval{};

  MlpSpec generator_spec() const {
    return {.inputs = noise_dim,
            .hidden = generator_hidden,
            .outputs = data.dim(),
            .activation = activation,
            .output_activation = Activation::linear,
            .batch_norm = generator_batch_norm};
  }
  MlpSpec discriminator_spec() const {
    return {.inputs = data.dim(),
            .hidden = discriminator_hidden,
            .outputs = 1,
            .activation = activation,
            .output_activation = Activation::sigmoid,
            .batch_norm = discriminator_batch_norm,
            .mbd_kernels = mbd_kernels,
            .mbd_kernel_dim = mbd_kernels > 0 ? mbd_kernel_dim : 0};
  }

  void validate() const {
    data.validate();
    smoothing.validate();
    schedule.validate();
    if (noise_dim < 1) throw ConfigError("noise dimension must be positive");
    if (batch < 2) throw ConfigError("batch size must be at least 2");
    if (generator_hidden.size() > 2 || discriminator_hidden.size() > 2)
      throw ConfigError("networks are limited to three dense layers");
    for (auto w : generator_hidden)
      if (w > 64) throw ConfigError("hidden widths are limited to 64 units");
    for (auto w : discriminator_hidden)
      if (w > 64) throw ConfigError("hidden widths are limited to 64 units");
    if (replay) replay->validate(batch);
    if (eval_every < 1) throw ConfigError("evaluation cadence must be at least 1");
    if (eval.samples < 1 || eval.bins < 2 || !(eval.lo < eval.hi)) throw ConfigError("invalid evaluation protocol");
  }
};

/// Generator and discriminator with their recorded tapes.
class GanModel {
 public:
  GanModel(const GanConfig& cfg, Rng& init)
      : cfg_(cfg), gen_(cfg.generator_spec(), init), disc_(cfg.discriminator_spec(), init) {
    {
      Var z = gen_tape_.input("z");
      gen_out_ = gen_.build(gen_tape_, z, BatchNormMode::train);
      Var ze = gen_eval_tape_.input("z");
      gen_eval_out_ = gen_.build(gen_eval_tape_, ze, BatchNormMode::infer);
    }
    {
      Var x = disc_eval_tape_.input("x");
      disc_eval_out_ = disc_.build(disc_eval_tape_, x, BatchNormMode::infer);
    }
    {
      Tape& t = d_tape_;
      d_real_ = disc_.build(t, t.input("real"), BatchNormMode::train);
      d_fake_ = disc_.build(t, t.input("fake"), BatchNormMode::train);
      d_loss_ = discriminator_loss(t, d_real_, d_fake_, t.input("t_real"), t.input("t_fake"));
    }
    {
      Tape& t = g_tape_;
      Var x = gen_.build(t, t.input("z"), BatchNormMode::train);
      g_prob_ = disc_.build(t, x, BatchNormMode::train);
      g_loss_ = generator_loss(t, g_prob_, t.input("target"), cfg.loss);
    }
  }

  GanModel(const GanModel&) = delete;
  GanModel& operator=(const GanModel&) = delete;

  Mlp& generator() { return gen_; }
  Mlp& discriminator() { return disc_; }
  const GanConfig& config() const { return cfg_; }

  /// G(z) in training mode.
  Tensor generate(const Tensor& z) {
    gen_tape_.evaluate({{"z", z}});
    return gen_tape_.value(gen_out_);
  }

  Tensor generate_eval(const Tensor& z) {
    gen_eval_tape_.evaluate({{"z", z}});
    return gen_eval_tape_.value(gen_eval_out_);
  }

  /// D(x) in inference mode, in chunks of the training batch size so
  /// minibatch features see batches of the size they were trained on.
  Tensor discriminate(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols(), b = cfg_.batch;
    Tensor out({n, 1});
    for (std::size_t start = 0; start < n;) {
      std::size_t len = std::min(b, n - start);
      if (n - start - len == 1) ++len;  // never leave a single-row tail
      Tensor chunk({len, d}, std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(start * d),
                                                 x.data().begin() + static_cast<std::ptrdiff_t>((start + len) * d)));
      disc_eval_tape_.evaluate({{"x", chunk}});
      const auto p = disc_eval_tape_.value(disc_eval_out_).data();
      std::copy(p.begin(), p.end(), out.values().begin() + static_cast<std::ptrdiff_t>(start));
      start += len;
    }
    return out;
  }

  /// Loss F at (real, fake) with its gradient written into the discriminator.
  double discriminator_gradient(const Tensor& real, const Tensor& fake) {
    d_tape_.evaluate({{"real", real},
                      {"fake", fake},
                      {"t_real", Tensor({real.rows(), 1}, cfg_.smoothing.real_target())},
                      {"t_fake", Tensor({fake.rows(), 1}, cfg_.smoothing.fake_target())}});
    d_tape_.backward(d_loss_, {&disc_.params()});
    return d_tape_.value(d_loss_).item();
  }

  /// Generator loss at noise z with its gradient written into the generator.
  double generator_gradient(const Tensor& z) {
    const double target = cfg_.loss == GanLossKind::non_saturating ? 1.0 : 0.0;
    g_tape_.evaluate({{"z", z}, {"target", Tensor({z.rows(), 1}, target)}});
    g_tape_.backward(g_loss_, {&gen_.params()});
    return g_tape_.value(g_loss_).item();
  }

  /// Generator loss for fixed fake samples; no gradient.
  double generator_loss_on(const Tensor& fake) {
    const Tensor p = discriminate(fake);
    return generator_loss(p.data(), cfg_.loss);
  }

  Tape& discriminator_tape() { return d_tape_; }
  Tape& generator_tape() { return g_tape_; }
  Var discriminator_loss_var() const { return d_loss_; }
  Var generator_loss_var() const { return g_loss_; }

 private:
  GanConfig cfg_;
  Mlp gen_;
  Mlp disc_;
  Tape gen_tape_, gen_eval_tape_, disc_eval_tape_, d_tape_, g_tape_;
  Var gen_out_{}, gen_eval_out_{}, disc_eval_out_{};
  Var d_real_{}, d_fake_{}, d_loss_{}, g_prob_{}, g_loss_{};
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double kl = 0.0;
  double coverage = 0.0;
  double disc_accuracy = 0.0;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<double> mode_share;

  Metrics as_metrics() const {
    Metrics m{{"kl", kl}, {"coverage", coverage}, {"disc_accuracy", disc_accuracy}};
    for (std::size_t j = 0; j < mean.size(); ++j) {
      m.emplace_back("gen_mean_" + std::to_string(j), mean[j]);
      m.emplace_back("gen_std_" + std::to_string(j), stddev[j]);
    }
    return m;
  }
};

namespace detail {
inline std::vector<double> histogram(const Tensor& x, std::size_t bins, double lo, double hi) {
  const std::size_t d = x.cols();
  std::size_t cells = 1;
  for (std::size_t j = 0; j < d; ++j) cells *= bins;
  std::vector<double> h(cells, 0.0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t cell = 0;
    for (std::size_t j = d; j-- > 0;) {
      const double v = x.at(i, j);
      // Samples beyond the range land in the edge bins.
      auto b = v <= lo ? 0 : static_cast<std::size_t>(std::floor((v - lo) / width));
      b = std::min(b, bins - 1);
      cell = cell * bins + b;
    }
    h[cell] += 1.0;
  }
  return h;
}
}  // namespace detail

/// KL(p‖q) in nats between add-one-smoothed histograms of two sample sets.
inline double histogram_kl(const Tensor& p_samples, const Tensor& q_samples, std::size_t bins, double lo,
                           double hi) {
  if (p_samples.cols() != q_samples.cols()) throw ConfigError("histogram KL needs samples of equal dimension");
  auto p = detail::histogram(p_samples, bins, lo, hi);
  auto q = detail::histogram(q_samples, bins, lo, hi);
  const double pn = static_cast<double>(p_samples.rows() + p.size());
  const double qn = static_cast<double>(q_samples.rows() + q.size());
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = (p[i] + 1.0) / pn, qi = (q[i] + 1.0) / qn;
    kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

/// Share of samples nearest to each component mean.
inline std::vector<double> mode_shares(const Tensor& x, const ToyDistribution& dist) {
  std::vector<double> share(dist.components(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < dist.components(); ++k) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) {
        const double diff = x.at(i, j) - dist.means[k][j];
        d2 += diff * diff;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = k;
      }
    }
    share[best] += 1.0;
  }
  for (double& s : share) s /= static_cast<double>(x.rows());
  return share;
}

/// Fraction of components (with positive weight) whose share reaches
/// threshold × their weight.
inline double mode_coverage(const Tensor& x, const ToyDistribution& dist, double threshold,
                            std::vector<double>* shares = nullptr) {
  auto share = mode_shares(x, dist);
  std::size_t live = 0, covered = 0;
  for (std::size_t k = 0; k < share.size(); ++k) {
    if (dist.weights[k] <= 0.0) continue;
    ++live;
    if (share[k] >= threshold * dist.weights[k]) ++covered;
  }
  if (shares) *shares = std::move(share);
  return static_cast<double>(covered) / static_cast<double>(live);
}

/// Accuracy of thresholding D at 0.5; exact ties count half.
inline double discriminator_accuracy(const Tensor& p_real, const Tensor& p_fake) {
  double correct = 0.0;
  for (double p : p_real.data()) correct += p > 0.5 ? 1.0 : p == 0.5 ? 0.5 : 0.0;
  for (double p : p_fake.data()) correct += p < 0.5 ? 1.0 : p == 0.5 ? 0.5 : 0.0;
  return correct / static_cast<double>(p_real.size() + p_fake.size());
}

inline void sample_moments(const Tensor& x, std::vector<double>& mean, std::vector<double>& sd) {
  const std::size_t n = x.rows(), d = x.cols();
  mean.assign(d, 0.0);
  sd.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x.at(i, j) - mean[j]) * (x.at(i, j) - mean[j]);
  for (double& s : sd) s = std::sqrt(s / static_cast<double>(n));
}

/// Draws generated samples the way the model is configured to produce them.
inline Tensor draw_generated(GanModel& model, std::size_t n, Rng& rng) {
  const auto& cfg = model.config();
  if (cfg.exact_generator) return sample_toy(cfg.data, n, rng);
  return model.generate_eval(standard_normal(n, cfg.noise_dim, rng));
}

/// The evaluation protocol for any sampler/classifier pair.
inline EvalReport evaluate_sampler(const ToyDistribution& dist, const EvalConfig& ec, Rng& rng,
                                   const std::function<Tensor(std::size_t, Rng&)>& draw,
                                   const std::function<Tensor(const Tensor&)>& classify) {
  EvalReport r;
  const Tensor data = sample_toy(dist, ec.samples, rng);
  const Tensor gen = draw(ec.samples, rng);
  r.kl = histogram_kl(data, gen, ec.bins, ec.lo, ec.hi);
  r.coverage = mode_coverage(gen, dist, ec.coverage_threshold, &r.mode_share);
  sample_moments(gen, r.mean, r.stddev);
  const Tensor real = sample_toy(dist, ec.accuracy_samples, rng);
  const Tensor fake = draw(ec.accuracy_samples, rng);
  r.disc_accuracy = discriminator_accuracy(classify(real), classify(fake));
  return r;
}

inline EvalReport evaluate_gan(GanModel& model, const EvalConfig& ec, Rng& rng) {
  return evaluate_sampler(
      model.config().data, ec, rng, [&](std::size_t n, Rng& r) { return draw_generated(model, n, r); },
      [&](const Tensor& x) { return model.discriminate(x); });
}

// ---------------------------------------------------------------------------
// Training

struct GanRun {
  RunRecord record;
  std::unique_ptr<GanModel> model;
  EvalReport final_report;
};

namespace detail {

inline Tensor take_rows(const std::vector<std::vector<double>>& rows, std::size_t d) {
  Tensor t({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.values().begin() + static_cast<std::ptrdiff_t>(i * d));
  return t;
}

/// Discriminator (outer) and generator (inner) objectives of one GAN run.
/// Each call draws its data from the engine's generator in a fixed order:
/// real batch, then fake noise for the discriminator; noise for the generator.
inline BilevelProblem gan_problem(GanModel& model, const GanConfig& cfg,
                                  std::optional<ReplayBuffer<std::vector<double>>>& buffer) {
  const bool use_replay = cfg.replay && cfg.replay->rho > 0.0;
  if (use_replay) buffer.emplace(cfg.replay->capacity);
  const std::size_t B = cfg.batch, d = cfg.data.dim();

  BilevelProblem p;
  p.outer = &model.discriminator().params();
  p.inner = &model.generator().params();
  p.outer_objective = [&model, &cfg, &buffer, use_replay, B, d](Rng& rng) {
    const Tensor real = sample_toy(cfg.data, B, rng);
    if (cfg.exact_generator) return model.discriminator_gradient(real, sample_toy(cfg.data, B, rng));
    if (!use_replay) return model.discriminator_gradient(real, model.generate(standard_normal(B, cfg.noise_dim, rng)));
    const auto want = static_cast<std::size_t>(std::llround(cfg.replay->rho * static_cast<double>(B)));
    const std::size_t from_buffer = std::min({want, buffer->size(), B - 1});
    const Tensor fresh = model.generate(standard_normal(B - from_buffer, cfg.noise_dim, rng));
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < fresh.rows(); ++i)
      rows.emplace_back(fresh.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                        fresh.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    auto old = buffer->sample(from_buffer, rng);
    for (auto& r : rows) buffer->push(r);
    rows.insert(rows.end(), old.begin(), old.end());
    return model.discriminator_gradient(real, take_rows(rows, d));
  };
  p.inner_objective = [&model, &cfg, &buffer, use_replay, B, d](Rng& rng) {
    if (cfg.exact_generator) {
      model.generator().params().zero_grad();
      return model.generator_loss_on(sample_toy(cfg.data, B, rng));
    }
    return model.generator_gradient(standard_normal(B, cfg.noise_dim, rng));
  };

  return p;
}

inline GanRun run_gan(const GanConfig& cfg, std::uint64_t seed, const RowSink& sink, bool exploratory) {
  cfg.validate();
  Rng root(seed);
  Rng init = root.split();
  Rng eval_rng = root.split();
  const std::uint64_t train_seed = root.next_u64();

  GanRun run;
  run.record.kind = "gan";
  run.record.exploratory = exploratory;
  run.model = std::make_unique<GanModel>(cfg, init);
  GanModel& model = *run.model;

  std::optional<ReplayBuffer<std::vector<double>>> buffer;
  BilevelProblem p = gan_problem(model, cfg, buffer);

  BilevelDescent engine(std::move(p), cfg.schedule, cfg.stabilizers, train_seed);
  Stopwatch clock;
  RoundRecord last;
  while (engine.round() < cfg.schedule.rounds) {
    last = engine.step_round();
    MetricRow row{last.round, 0.0, {{"d_loss", last.outer_loss}, {"g_loss", last.inner_loss}}};
    row.metrics.insert(row.metrics.end(), last.metrics.begin(), last.metrics.end());
    if (cfg.stabilizers.freeze) {
      row.metrics.emplace_back("d_updated", last.gate.update_outer ? 1.0 : 0.0);
      row.metrics.emplace_back("g_updated", last.gate.update_inner ? 1.0 : 0.0);
    }
    const bool final_round = engine.round() == cfg.schedule.rounds;
    if (final_round || engine.round() % cfg.eval_every == 0) {
      run.final_report = evaluate_gan(model, cfg.eval, eval_rng);
      auto em = run.final_report.as_metrics();
      row.metrics.insert(row.metrics.end(), em.begin(), em.end());
    }
    row.wall_ms = clock.elapsed_ms();
    emit_row(run.record, sink, std::move(row));
  }
  run.record.summary = {{"d_loss", last.outer_loss}, {"g_loss", last.inner_loss}};
  auto em = run.final_report.as_metrics();
  run.record.summary.insert(run.record.summary.end(), em.begin(), em.end());
  return run;
}

}  // namespace detail

/// Trains the GAN under the bilevel engine: discriminator = outer side,
/// generator = inner side.
inline GanRun train_gan(const GanConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  return detail::run_gan(cfg, seed, sink, false);
}

/// GAN training with a buffer of previously generated samples mixed into the
/// discriminator's fake minibatches. Exploratory: no quality bar.
inline GanRun gan_replay_experiment(const GanConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  if (!cfg.replay) throw ConfigError("replay experiment needs a sample replay configuration");
  return detail::run_gan(cfg, seed, sink, true);
}

/// One row per sample, columns x0..x{d-1}.
inline void write_samples_csv(const std::string& path, const Tensor& samples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out.precision(17);
  for (std::size_t j = 0; j < samples.cols(); ++j) out << (j ? "," : "") << "x" << j;
  out << "\n";
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    for (std::size_t j = 0; j < samples.cols(); ++j) out << (j ? "," : "") << samples.at(i, j);
    out << "\n";
  }
}

}  // namespace advlab
