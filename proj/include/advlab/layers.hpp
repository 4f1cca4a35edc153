#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/random.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

enum class Activation { linear, relu, leaky_relu, tanh, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

inline Var apply_activation(Tape& tape, Var x, Activation a) {
  switch (a) {
    case Activation::linear: return x;
    case Activation::relu: return tape.relu(x);
    case Activation::leaky_relu: return tape.leaky_relu(x);
    case Activation::tanh: return tape.tanh(x);
    case Activation::sigmoid: return tape.sigmoid(x);
  }
  return x;
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
/// [rows, cols] of independent N(0, 1) draws.
inline Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.values()) v = rng.normal();
  return t;
}

inline Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
  Tensor w({fan_out, fan_in});
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : w.values()) v = (2.0 * rng.uniform() - 1.0) * limit;
  return w;
}

/// Architecture of a small dense network.
struct MlpSpec {
  std::size_t inputs = 1;
  std::vector<std::size_t> hidden{};
  std::size_t outputs = 1;
  Activation activation = Activation::relu;
  Activation output_activation = Activation::linear;
  bool batch_norm = false;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  /// Minibatch-discrimination kernels appended after the last hidden layer; 0 disables.
  std::size_t mbd_kernels = 0;
  std::size_t mbd_kernel_dim = 0;
  /// Start the final layer at zero weights (output = activation(0)).
  bool zero_init_output = false;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Dense feed-forward network: [linear → (batchnorm) → activation]* → linear → output activation.
///
/// Trainable tensors live in `params`; batch-norm running statistics live
/// in `buffers` and carry no gradient.
class Mlp {
 public:
  Mlp() = default;

  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.inputs == 0 || spec_.outputs == 0) throw ConfigError("network extents must be positive");
    if (spec_.mbd_kernels > 0 && spec_.mbd_kernel_dim == 0)
      throw ConfigError("minibatch discrimination needs a positive kernel dimension");
    std::size_t fan_in = spec_.inputs;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
      const std::size_t width = spec_.hidden[i];
      if (width == 0) throw ConfigError("hidden layer width must be positive");
      params_.add(layer_name(i, "W"), glorot_uniform(width, fan_in, rng));
      params_.add(layer_name(i, "b"), Tensor({width}));
      if (spec_.batch_norm) {
        params_.add("bn" + std::to_string(i) + ".scale", Tensor({width}, 1.0));
        params_.add("bn" + std::to_string(i) + ".shift", Tensor({width}));
        buffers_.add("bn" + std::to_string(i) + ".mean", Tensor({width}), false);
        buffers_.add("bn" + std::to_string(i) + ".var", Tensor({width}, 1.0), false);
      }
      fan_in = width;
    }
    if (spec_.mbd_kernels > 0) {
      params_.add("mbd.M", glorot_uniform(fan_in, spec_.mbd_kernels * spec_.mbd_kernel_dim, rng));
      fan_in += spec_.mbd_kernels;
    }
    const std::size_t last = spec_.hidden.size();
    Tensor w = spec_.zero_init_output ? Tensor({spec_.outputs, fan_in}) : glorot_uniform(spec_.outputs, fan_in, rng);
    params_.add(layer_name(last, "W"), std::move(w));
    params_.add(layer_name(last, "b"), Tensor({spec_.outputs}));
  }

  // Tapes hold addresses into params_/buffers_; copying would silently detach them.
  Mlp(const Mlp&) = delete;
  Mlp& operator=(const Mlp&) = delete;
  Mlp(Mlp&&) = default;
  Mlp& operator=(Mlp&&) = default;

  /// Records the forward pass of x [batch, inputs] onto `tape`.
  Var build(Tape& tape, Var x, BatchNormMode mode = BatchNormMode::train) {
    Var h = x;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
      h = tape.linear(h, tape.param(params_, layer_name(i, "W")), tape.param(params_, layer_name(i, "b")));
      if (spec_.batch_norm) {
        const std::string p = "bn" + std::to_string(i);
        h = tape.batchnorm(h, tape.param(params_, p + ".scale"), tape.param(params_, p + ".shift"), mode,
                           {&buffers_.get(p + ".mean"), &buffers_.get(p + ".var"), spec_.bn_momentum,
                            spec_.bn_epsilon});
      }
      h = apply_activation(tape, h, spec_.activation);
    }
    if (spec_.mbd_kernels > 0) {
      Var o = tape.minibatch_features(h, tape.param(params_, "mbd.M"), spec_.mbd_kernels);
      h = tape.concat_cols(h, o);
    }
    const std::size_t last = spec_.hidden.size();
    h = tape.linear(h, tape.param(params_, layer_name(last, "W")), tape.param(params_, layer_name(last, "b")));
    return apply_activation(tape, h, spec_.output_activation);
  }

  /// Forward pass on a fresh tape, without gradients.
  Tensor forward(const Tensor& x, BatchNormMode mode = BatchNormMode::infer) {
    Tape tape;
    Var out = build(tape, tape.input("x"), mode);
    tape.evaluate({{"x", x}});
    return tape.value(out);
  }

  const MlpSpec& spec() const { return spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamStore& buffers() { return buffers_; }
  const ParamStore& buffers() const { return buffers_; }

  /// Copies parameter and buffer values from a network of the same spec.
  void assign(const Mlp& other) {
    if (!(other.spec_ == spec_)) throw ConfigError("network architectures differ");
    params_.assign_values(other.params_);
    buffers_.assign_values(other.buffers_);
  }

 private:
  static std::string layer_name(std::size_t i, const char* what) {
    return "l" + std::to_string(i) + "." + what;
  }

  MlpSpec spec_;
  ParamStore params_;
  ParamStore buffers_;
};

}  // namespace advlab
