#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "advlab/gan.hpp"
#include "advlab/gradcheck.hpp"
#include "advlab/layers.hpp"
#include "advlab/random.hpp"
#include "advlab/rl.hpp"
#include "advlab/tape.hpp"

namespace advlab {

/// One randomized finite-difference check; each call draws a fresh point.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(Rng&, const GradCheckOptions&)> run;
};

struct GradCheckCaseResult {
  std::string name;
  std::size_t points = 0;
  GradCheckReport report;
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Uniform magnitude in [lo, hi] with random sign; keeps points away from kinks at 0.
inline Tensor signed_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (lo + (hi - lo) * rng.uniform());
  return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Builds op(inputs...), contracts it against fixed random weights and runs gradcheck.
inline GradCheckReport check_op(Rng& rng, const GradCheckOptions& opt, std::vector<Tensor> inputs,
                                const Builder& build) {
  Tape tape;
  Bindings bind;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string name = "in" + std::to_string(i);
    vars.push_back(tape.input(name));
    bind.emplace(name, std::move(inputs[i]));
  }
  Var out = build(tape, vars);
  tape.evaluate(bind);
  Var loss = tape.sum(tape.mul(out, tape.constant(uniform_tensor(tape.value(out).shape(), rng, -1.0, 1.0))));
  return gradcheck(tape, loss, bind, opt);
}

/// Scalar loss from a possibly non-scalar node: sum(out ⊙ W) with W fixed.
inline Var contract(Tape& t, Var out, const Bindings& bind, Rng& rng) {
  t.evaluate(bind);
  return t.sum(t.mul(out, t.constant(uniform_tensor(t.value(out).shape(), rng, -1.0, 1.0))));
}

/// Redraws every parameter uniformly. Zero-initialised biases would sit
/// exactly on a relu kink whenever a whole upstream row is dead.
inline void randomize(ParamStore& s, Rng& rng, double scale = 0.8) {
  for (auto& e : s)
    for (double& v : e.tensor.values()) v = scale * (2.0 * rng.uniform() - 1.0);
}

/// Whether the evaluated tape sits clear of its non-smooth and
/// ill-conditioned regions: relu inputs and minibatch L1 coordinates at least
/// `margin` from zero, batch-norm columns with batch variance above `min_var`.
inline bool well_conditioned(const Tape& t, double margin = 1e-3, double min_var = 1e-2) {
  using Op = Tape::Op;
  for (std::uint32_t id = 0; id < t.node_count(); ++id) {
    const Var v{id};
    const Op op = t.op(v);
    if (op == Op::relu || op == Op::leaky_relu) {
      for (double x : t.value(t.inputs_of(v)[0]).data())
        if (std::abs(x) < margin) return false;
    } else if (op == Op::batchnorm) {
      const Tensor& x = t.value(t.inputs_of(v)[0]);
      const std::size_t r = x.rows(), f = x.cols();
      for (std::size_t j = 0; j < f; ++j) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < r; ++i) mu += x.at(i, j);
        mu /= static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
        if (var / static_cast<double>(r) < min_var) return false;
      }
    } else if (op == Op::minibatch_features) {
      const auto in = t.inputs_of(v);
      const Tensor& x = t.value(in[0]);
      const Tensor& m = t.value(in[1]);
      const std::size_t r = x.rows(), w = m.cols(), kernels = t.value(v).cols(), kdim = w / kernels;
      std::vector<double> proj(r * w, 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < x.cols(); ++p)
          for (std::size_t c = 0; c < w; ++c) proj[i * w + c] += x.at(i, p) * m.at(p, c);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = i + 1; j < r; ++j)
          for (std::size_t c = 0; c < kernels * kdim; ++c)
            if (std::abs(proj[i * w + c] - proj[j * w + c]) < margin) return false;
    }
  }
  return true;
}

/// gradcheck at a well-conditioned point, nothing otherwise.
inline std::optional<GradCheckReport> checked(Tape& t, Var loss, const Bindings& b, const GradCheckOptions& o) {
  t.evaluate(b);
  if (!well_conditioned(t)) return std::nullopt;
  return gradcheck(t, loss, b, o);
}

inline Tensor one_hot_rows(std::size_t rows, std::size_t n, Rng& rng) {
  Tensor t({rows, n});
  for (std::size_t i = 0; i < rows; ++i) t.values()[i * n + rng.index(n)] = 1.0;
  return t;
}

}  // namespace detail

/// Finite-difference cases for every tape primitive.
inline std::vector<GradCheckCase> primitive_gradcheck_cases() {
  using detail::check_op;
  using detail::signed_tensor;
  using detail::uniform_tensor;
  using V = const std::vector<Var>&;
  std::vector<GradCheckCase> cases;
  auto add = [&](std::string name, std::function<GradCheckReport(Rng&, const GradCheckOptions&)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };
  auto unary = [&](std::string name, double lo, double hi, bool signed_, std::function<Var(Tape&, Var)> op) {
    add(name, [=](Rng& rng, const GradCheckOptions& o) {
      Tensor x = signed_ ? signed_tensor({3, 4}, rng, lo, hi) : uniform_tensor({3, 4}, rng, lo, hi);
      return check_op(rng, o, {std::move(x)}, [&](Tape& t, V v) { return op(t, v[0]); });
    });
  };

  add("matmul", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o, {uniform_tensor({3, 4}, rng, -1, 1), uniform_tensor({4, 2}, rng, -1, 1)},
                    [](Tape& t, V v) { return t.matmul(v[0], v[1]); });
  });
  add("linear", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o,
                    {uniform_tensor({5, 3}, rng, -1, 1), uniform_tensor({2, 3}, rng, -1, 1),
                     uniform_tensor({2}, rng, -1, 1)},
                    [](Tape& t, V v) { return t.linear(v[0], v[1], v[2]); });
  });
  for (const char* op : {"add", "sub", "mul"}) {
    const std::string o(op);
    auto apply = [o](Tape& t, Var a, Var b) {
      return o == "add" ? t.add(a, b) : o == "sub" ? t.sub(a, b) : t.mul(a, b);
    };
    add(o + "_same", [apply](Rng& rng, const GradCheckOptions& opt) {
      return check_op(rng, opt, {uniform_tensor({3, 4}, rng, -1, 1), uniform_tensor({3, 4}, rng, -1, 1)},
                      [&](Tape& t, V v) { return apply(t, v[0], v[1]); });
    });
    add(o + "_row", [apply](Rng& rng, const GradCheckOptions& opt) {
      return check_op(rng, opt, {uniform_tensor({3, 4}, rng, -1, 1), uniform_tensor({4}, rng, -1, 1)},
                      [&](Tape& t, V v) { return apply(t, v[0], v[1]); });
    });
    add(o + "_scalar", [apply](Rng& rng, const GradCheckOptions& opt) {
      return check_op(rng, opt, {uniform_tensor({3, 4}, rng, -1, 1), uniform_tensor({1}, rng, -1, 1)},
                      [&](Tape& t, V v) { return apply(t, v[0], v[1]); });
    });
  }
  unary("scale", -1, 1, false, [](Tape& t, Var x) { return t.scale(x, -1.7); });
  unary("add_scalar", -1, 1, false, [](Tape& t, Var x) { return t.add_scalar(x, 0.3); });
  unary("sigmoid", -4, 4, false, [](Tape& t, Var x) { return t.sigmoid(x); });
  unary("tanh", -3, 3, false, [](Tape& t, Var x) { return t.tanh(x); });
  unary("relu", 0.01, 2, true, [](Tape& t, Var x) { return t.relu(x); });
  unary("leaky_relu", 0.01, 2, true, [](Tape& t, Var x) { return t.leaky_relu(x); });
  unary("exp", -2, 2, false, [](Tape& t, Var x) { return t.exp(x); });
  unary("log", 0.1, 3, false, [](Tape& t, Var x) { return t.log(x); });
  unary("square", -2, 2, false, [](Tape& t, Var x) { return t.square(x); });
  unary("sum", -1, 1, false, [](Tape& t, Var x) { return t.sum(x); });
  unary("mean", -1, 1, false, [](Tape& t, Var x) { return t.mean(x); });
  unary("softmax_rows", -2, 2, false, [](Tape& t, Var x) { return t.softmax_rows(x); });
  unary("slice_cols", -1, 1, false, [](Tape& t, Var x) { return t.slice_cols(x, 1, 3); });
  add("concat_cols", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o, {uniform_tensor({3, 2}, rng, -1, 1), uniform_tensor({3, 3}, rng, -1, 1)},
                    [](Tape& t, V v) { return t.concat_cols(v[0], v[1]); });
  });
  add("bce", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o, {uniform_tensor({6, 1}, rng, 0.05, 0.95), uniform_tensor({6, 1}, rng, 0, 1)},
                    [](Tape& t, V v) { return t.bce(v[0], v[1]); });
  });
  add("bce_weighted", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o,
                    {uniform_tensor({6, 1}, rng, 0.05, 0.95), uniform_tensor({6, 1}, rng, 0, 1),
                     uniform_tensor({6, 1}, rng, 0, 1)},
                    [](Tape& t, V v) { return t.bce(v[0], v[1], v[2]); });
  });
  for (BatchNormMode mode : {BatchNormMode::train, BatchNormMode::infer}) {
    add(mode == BatchNormMode::train ? "batchnorm_train" : "batchnorm_infer",
        [mode](Rng& rng, const GradCheckOptions& o) {
          auto mean = std::make_shared<Tensor>(uniform_tensor({3}, rng, -0.5, 0.5));
          auto var = std::make_shared<Tensor>(uniform_tensor({3}, rng, 0.5, 2.0));
          return check_op(rng, o,
                          {uniform_tensor({6, 3}, rng, -2, 2), uniform_tensor({3}, rng, 0.5, 1.5),
                           uniform_tensor({3}, rng, -1, 1)},
                          [&](Tape& t, V v) {
                            return t.batchnorm(v[0], v[1], v[2], mode, {mean.get(), var.get(), 0.9, 1e-5});
                          });
        });
  }
  add("minibatch_features", [](Rng& rng, const GradCheckOptions& o) {
    return check_op(rng, o, {uniform_tensor({6, 3}, rng, -1, 1), uniform_tensor({3, 4}, rng, -1, 1)},
                    [](Tape& t, V v) { return t.minibatch_features(v[0], v[1], 2); });
  });
  return cases;
}

/// Finite-difference cases for the composed networks, freshly drawn at every
/// point. Parameters and continuous inputs are both checked. Points too close
/// to a kink for the difference step are redrawn (see well_conditioned).
inline std::vector<GradCheckCase> model_gradcheck_cases() {
  using detail::checked;
  using detail::contract;
  using detail::randomize;
  using detail::uniform_tensor;
  using Attempt = std::optional<GradCheckReport>;
  std::vector<GradCheckCase> cases;
  auto add = [&](std::string name, std::function<Attempt(Rng&, const GradCheckOptions&)> fn) {
    cases.push_back({std::move(name), [fn](Rng& rng, const GradCheckOptions& o) {
                       for (int tries = 0; tries < 1000; ++tries)
                         if (auto r = fn(rng, o)) return *r;
                       throw NumericError("no well-conditioned gradcheck point found");
                     }});
  };

  auto gan_cfg = [](bool bn, std::size_t mbd) {
    GanConfig g;
    g.noise_dim = 3;
    g.generator_hidden = {6, 5};
    g.discriminator_hidden = {6, 5};
    g.discriminator_batch_norm = bn;
    g.mbd_kernels = mbd;
    g.mbd_kernel_dim = 3;
    return g;
  };

  add("generator", [gan_cfg](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Mlp gen(gan_cfg(false, 0).generator_spec(), rng);
    randomize(gen.params(), rng);
    Tape t;
    Var out = gen.build(t, t.input("z"), BatchNormMode::train);
    Bindings b{{"z", uniform_tensor({6, 3}, rng, -2, 2)}};
    return checked(t, contract(t, out, b, rng), b, o);
  });
  for (GanLossKind k : {GanLossKind::non_saturating, GanLossKind::minimax}) {
    add(std::string("generator_loss_") + to_string(k), [gan_cfg, k](Rng& rng, const GradCheckOptions& o) -> Attempt {
      const GanConfig g = gan_cfg(false, 0);
      Mlp gen(g.generator_spec(), rng);
      Mlp disc(g.discriminator_spec(), rng);
      randomize(gen.params(), rng);
      randomize(disc.params(), rng);
      Tape t;
      Var p = disc.build(t, gen.build(t, t.input("z"), BatchNormMode::train), BatchNormMode::train);
      Var loss = generator_loss(t, p, t.constant(Tensor({6, 1}, k == GanLossKind::non_saturating ? 1.0 : 0.0)), k);
      return checked(t, loss, {{"z", uniform_tensor({6, 3}, rng, -2, 2)}}, o);
    });
  }
  struct DiscVariant {
    const char* name;
    bool bn;
    std::size_t mbd;
  };
  for (DiscVariant v : {DiscVariant{"discriminator", false, 0}, DiscVariant{"discriminator_batchnorm", true, 0},
                        DiscVariant{"discriminator_minibatch", false, 3}}) {
    add(v.name, [gan_cfg, v](Rng& rng, const GradCheckOptions& o) -> Attempt {
      Mlp disc(gan_cfg(v.bn, v.mbd).discriminator_spec(), rng);
      randomize(disc.params(), rng);
      Tape t;
      Var pr = disc.build(t, t.input("real"), BatchNormMode::train);
      Var pf = disc.build(t, t.input("fake"), BatchNormMode::train);
      Var loss = discriminator_loss(t, pr, pf, t.constant(Tensor({6, 1}, 0.9)), t.constant(Tensor({6, 1}, 0.0)));
      return checked(t, loss,
                     {{"real", uniform_tensor({6, 1}, rng, -3, 3)}, {"fake", uniform_tensor({6, 1}, rng, -3, 3)}}, o);
    });
  }

  for (CriticFeatures f : {CriticFeatures::raw, CriticFeatures::quadratic}) {
    add(std::string("critic_") + to_string(f), [f](Rng& rng, const GradCheckOptions& o) -> Attempt {
      Critic c({.state_dim = 2, .action_dim = 1, .features = f, .hidden = {6, 5}, .activation = Activation::relu}, rng);
      randomize(c.params(), rng);
      Tape t;
      Var q = c.build(t, t.input("s"), t.input("a"));
      Bindings b{{"s", uniform_tensor({5, 2}, rng, -1, 1)}, {"a", uniform_tensor({5, 1}, rng, -1, 1)}};
      return checked(t, contract(t, q, b, rng), b, o);
    });
  }
  add("critic_tabular", [](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Critic c({.features = CriticFeatures::one_hot, .states = 4, .actions = 2}, rng);
    randomize(c.params(), rng);
    Tape t;
    Var q = c.build(t, t.input("s"), t.input("a"));
    Bindings b{{"s", detail::one_hot_rows(5, 4, rng)}, {"a", detail::one_hot_rows(5, 2, rng)}};
    return checked(t, contract(t, q, b, rng), b, o);
  });
  add("critic_batchnorm", [](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Critic c({.state_dim = 2, .action_dim = 1, .hidden = {6}, .activation = Activation::tanh, .batch_norm = true}, rng);
    randomize(c.params(), rng);
    Tape t;
    Var q = c.build(t, t.input("s"), t.input("a"));
    Bindings b{{"s", uniform_tensor({5, 2}, rng, -1, 1)}, {"a", uniform_tensor({5, 1}, rng, -1, 1)}};
    return checked(t, contract(t, q, b, rng), b, o);
  });

  // Actors are checked through a critic, as the policy-gradient updates use them.
  add("actor_deterministic", [](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Actor pi({.kind = ActorKind::deterministic, .state_dim = 2, .hidden = {6}, .activation = Activation::relu}, rng);
    Critic c({.state_dim = 2, .action_dim = 1, .hidden = {5}, .activation = Activation::tanh}, rng);
    randomize(pi.params(), rng);
    randomize(c.params(), rng);
    Tape t;
    Var s = t.input("s");
    Var q = t.mean(c.build(t, s, pi.build_deterministic(t, s)));
    return checked(t, q, {{"s", uniform_tensor({5, 2}, rng, -1, 1)}}, o);
  });
  add("actor_gaussian", [](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Actor pi({.kind = ActorKind::gaussian, .state_dim = 2, .hidden = {6}, .activation = Activation::tanh}, rng);
    Critic c({.state_dim = 2, .action_dim = 1, .hidden = {5}, .activation = Activation::tanh}, rng);
    randomize(pi.params(), rng);
    randomize(c.params(), rng);
    Tape t;
    Var s = t.input("s");
    const GaussianHeads h = pi.build_gaussian(t, s);
    Var q = t.mean(c.build(t, s, Actor::reparameterize(t, h, t.input("xi"))));
    Var loss = t.add(q, t.scale(t.mean(h.log_scale), 0.3));
    return checked(t, loss, {{"s", uniform_tensor({5, 2}, rng, -1, 1)}, {"xi", uniform_tensor({5, 1}, rng, -2, 2)}},
                   o);
  });
  add("actor_softmax", [](Rng& rng, const GradCheckOptions& o) -> Attempt {
    Actor pi({.kind = ActorKind::softmax, .states = 4, .actions = 3}, rng);
    randomize(pi.params(), rng);
    Tape t;
    Var p = pi.build_probs(t, t.input("s"));
    Bindings b{{"s", detail::one_hot_rows(5, 4, rng)}};
    Var loss = t.add(contract(t, p, b, rng), t.sum(t.mul(p, t.log(p))));
    return checked(t, loss, b, o);
  });
  return cases;
}

/// Runs each case at `points` random points drawn from one seeded stream.
inline std::vector<GradCheckCaseResult> run_gradcheck_cases(const std::vector<GradCheckCase>& cases,
                                                            std::size_t points, std::uint64_t seed,
                                                            const GradCheckOptions& opt = {}) {
  std::vector<GradCheckCaseResult> out;
  Rng root(seed);
  for (const auto& c : cases) {
    Rng rng = root.split();
    GradCheckCaseResult r{c.name, points, {}};
    for (std::size_t p = 0; p < points; ++p) r.report.merge(c.run(rng, opt));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace advlab
