#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

/// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
  friend bool operator==(Var, Var) = default;
};

using Bindings = std::map<std::string, Tensor>;

enum class BatchNormMode { train, infer };

/// Floor applied inside every cross-entropy log.
inline constexpr double kLogFloor = 1e-12;

inline double clamped_log(double v) { return std::log(std::max(v, kLogFloor)); }
inline double clamped_log_slope(double v) { return v > kLogFloor ? 1.0 / v : 0.0; }

/// Define-then-run reverse-mode differentiation over dense tensors.
///
/// Nodes are recorded once; evaluate() runs them in record order against a
/// set of named input bindings, and backward() visits each node once in
/// reverse order. Parameters are referenced in place inside their owning
/// ParamStore, so the store must outlive the tape.
class Tape {
 public:
  enum class Op {
    input,
    param,
    constant,
    matmul,
    linear,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    sigmoid,
    tanh,
    relu,
    leaky_relu,
    exp,
    log,
    square,
    sum,
    mean,
    bce,
    batchnorm,
    concat_cols,
    slice_cols,
    minibatch_features,
    softmax_rows,
  };

  static const char* op_name(Op op) {
    switch (op) {
      case Op::input: return "input";
      case Op::param: return "param";
      case Op::constant: return "constant";
      case Op::matmul: return "matmul";
      case Op::linear: return "linear";
      case Op::add: return "add";
      case Op::sub: return "sub";
      case Op::mul: return "mul";
      case Op::scale: return "scale";
      case Op::add_scalar: return "add_scalar";
      case Op::sigmoid: return "sigmoid";
      case Op::tanh: return "tanh";
      case Op::relu: return "relu";
      case Op::leaky_relu: return "leaky_relu";
      case Op::exp: return "exp";
      case Op::log: return "log";
      case Op::square: return "square";
      case Op::sum: return "sum";
      case Op::mean: return "mean";
      case Op::bce: return "bce";
      case Op::batchnorm: return "batchnorm";
      case Op::concat_cols: return "concat_cols";
      case Op::slice_cols: return "slice_cols";
      case Op::minibatch_features: return "minibatch_features";
      case Op::softmax_rows: return "softmax_rows";
    }
    return "?";
  }

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // ---- leaves -------------------------------------------------------------

  Var input(const std::string& name) {
    if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
    Node n(Op::input);
    n.label = name;
    Var v = push(std::move(n));
    inputs_.emplace(name, v);
    return v;
  }

  std::optional<Var> find_input(const std::string& name) const {
    if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
    return std::nullopt;
  }

  /// References a tensor stored in `owner`. Repeated calls return the same node.
  Var param(ParamStore& owner, const std::string& name) {
    Tensor* t = &owner.get(name);
    if (auto it = param_nodes_.find(t); it != param_nodes_.end()) return it->second;
    Node n(Op::param);
    n.label = name;
    n.param = t;
    n.owner = &owner;
    Var v = push(std::move(n));
    param_nodes_.emplace(t, v);
    return v;
  }

  Var constant(Tensor value) {
    Node n(Op::constant);
    n.value = std::move(value);
    return push(std::move(n));
  }

  // ---- primitives ---------------------------------------------------------

  Var matmul(Var a, Var b) { return push(make(Op::matmul, {a, b})); }
  /// Dense layer: x [n, in], W [out, in], b [out] -> x Wᵀ + b.
  Var linear(Var x, Var w, Var b) { return push(make(Op::linear, {x, w, b})); }
  /// Elementwise with broadcasting of `b` over rows (b of size cols) or everywhere (size 1).
  Var add(Var a, Var b) { return push(make(Op::add, {a, b})); }
  Var sub(Var a, Var b) { return push(make(Op::sub, {a, b})); }
  Var mul(Var a, Var b) { return push(make(Op::mul, {a, b})); }
  Var scale(Var a, double c) {
    Node n = make(Op::scale, {a});
    n.alpha = c;
    return push(std::move(n));
  }
  Var neg(Var a) { return scale(a, -1.0); }
  Var add_scalar(Var a, double c) {
    Node n = make(Op::add_scalar, {a});
    n.alpha = c;
    return push(std::move(n));
  }
  Var sigmoid(Var a) { return push(make(Op::sigmoid, {a})); }
  Var tanh(Var a) { return push(make(Op::tanh, {a})); }
  Var relu(Var a) { return push(make(Op::relu, {a})); }
  Var leaky_relu(Var a, double slope = 0.2) {
    Node n = make(Op::leaky_relu, {a});
    n.alpha = slope;
    return push(std::move(n));
  }
  Var exp(Var a) { return push(make(Op::exp, {a})); }
  /// Unclamped natural log; non-positive arguments raise a NumericError.
  Var log(Var a) { return push(make(Op::log, {a})); }
  Var square(Var a) { return push(make(Op::square, {a})); }
  Var sum(Var a) { return push(make(Op::sum, {a})); }
  Var mean(Var a) { return push(make(Op::mean, {a})); }

  /// Σ_i w_i · −[t_i log p_i + (1 − t_i) log(1 − p_i)] with clamped logs.
  /// Without explicit weights every w_i is 1/N.
  Var bce(Var probs, Var targets) { return push(make(Op::bce, {probs, targets})); }
  Var bce(Var probs, Var targets, Var weights) {
    return push(make(Op::bce, {probs, targets, weights}));
  }

  struct BatchNormStats {
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;
    double momentum = 0.9;
    double epsilon = 1e-5;
  };

  /// Per-feature normalization of x [n, f] followed by scale/shift of size f.
  /// Train mode uses biased batch statistics and blends them into the running
  /// stats; infer mode reads the running stats and mutates nothing.
  Var batchnorm(Var x, Var scale, Var shift, BatchNormMode mode, BatchNormStats stats) {
    if (!(stats.epsilon > 0.0)) throw ConfigError("batchnorm epsilon must be positive");
    if (!stats.running_mean || !stats.running_var)
      throw ConfigError("batchnorm requires running statistics");
    Node n = make(Op::batchnorm, {x, scale, shift});
    n.bn = stats;
    n.bn_train = mode == BatchNormMode::train;
    return push(std::move(n));
  }

  Var concat_cols(Var a, Var b) { return push(make(Op::concat_cols, {a, b})); }
  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Node n = make(Op::slice_cols, {a});
    n.i0 = begin;
    n.i1 = end;
    return push(std::move(n));
  }

  /// Cross-sample similarity features: for x [B, F] and projection M [F, K·C],
  /// o[i, k] = Σ_{j≠i} exp(−‖(xM)_{i,k} − (xM)_{j,k}‖₁) over the C columns of kernel k.
  Var minibatch_features(Var x, Var projection, std::size_t kernels) {
    if (kernels == 0) throw ConfigError("minibatch_features needs at least one kernel");
    Node n = make(Op::minibatch_features, {x, projection});
    n.i0 = kernels;
    return push(std::move(n));
  }

  Var softmax_rows(Var a) { return push(make(Op::softmax_rows, {a})); }

  // ---- execution ----------------------------------------------------------

  /// Marks a node as a named output returned by evaluate().
  void mark_output(const std::string& name, Var v) { outputs_[name] = v; }

  /// Runs every node in record order. Returns the marked outputs.
  Bindings evaluate(const Bindings& inputs = {}) {
    evaluated_ = false;
    for (std::size_t i = 0; i < nodes_.size(); ++i) forward(static_cast<std::uint32_t>(i), inputs);
    evaluated_ = true;
    Bindings out;
    for (const auto& [name, v] : outputs_) out.emplace(name, nodes_[v.id].value);
    return out;
  }

  const Tensor& value(Var v) const {
    check_var(v);
    return nodes_[v.id].value;
  }

  /// Adjoint of any node after the last backward pass.
  std::span<const double> gradient(Var v) const {
    check_var(v);
    if (!backward_done_) throw UsageError("gradient() requested before backward()");
    return nodes_[v.id].adj;
  }

  /// Parameter sets whose accumulators receive gradients; empty means all.
  using Targets = std::vector<const ParamStore*>;

  /// Reverse pass from a scalar node. Accumulators of the targeted stores are
  /// zeroed first unless `accumulate` is set.
  void backward(Var output, const Targets& wrt = {}, bool accumulate = false) {
    check_var(output);
    if (nodes_[output.id].value.size() != 1 && evaluated_)
      throw UsageError("backward() requires a scalar output, got shape " +
                       shape_string(nodes_[output.id].value.shape()));
    std::vector<double> seed{1.0};
    backward_seeded(output, seed, wrt, accumulate);
  }

  /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
  void backward_seeded(Var output, std::span<const double> seed, const Targets& wrt = {},
                       bool accumulate = false) {
    check_var(output);
    if (!evaluated_) throw UsageError("backward() called before evaluate()");
    Node& out = nodes_[output.id];
    if (seed.size() != out.value.size())
      throw UsageError("backward seed has " + std::to_string(seed.size()) + " values, node " +
                       describe(output.id) + " has " + std::to_string(out.value.size()));
    for (auto& n : nodes_) n.adj.assign(n.value.size(), 0.0);
    std::copy(seed.begin(), seed.end(), out.adj.begin());

    auto targeted = [&](const Node& n) {
      return wrt.empty() || std::find(wrt.begin(), wrt.end(), n.owner) != wrt.end();
    };
    if (!accumulate) {
      for (auto& n : nodes_)
        if (n.op == Op::param && targeted(n)) {
          if (!n.param->trainable()) n.param->enable_grad();
          n.param->zero_grad();
        }
    }
    for (std::uint32_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.op == Op::param) {
        if (targeted(n)) {
          if (!n.param->trainable()) n.param->enable_grad();
          auto g = n.param->grad();
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.adj[k];
        }
        continue;
      }
      backward_node(i);
    }
    backward_done_ = true;
  }

  std::size_t node_count() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_[v.id].op; }
  std::vector<Var> inputs_of(Var v) const {
    std::vector<Var> out;
    for (auto id : nodes_[v.id].in) out.push_back(Var{id});
    return out;
  }
  /// Parameter nodes in record order.
  std::vector<std::pair<Var, Tensor*>> params() const {
    std::vector<std::pair<Var, Tensor*>> out;
    for (std::uint32_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::param) out.emplace_back(Var{i}, nodes_[i].param);
    return out;
  }

 private:
  struct Node {
    explicit Node(Op o) : op(o) {}
    Op op;
    std::vector<std::uint32_t> in;
    std::string label;
    double alpha = 0.0;
    std::size_t i0 = 0, i1 = 0;
    Tensor* param = nullptr;
    const ParamStore* owner = nullptr;
    BatchNormStats bn;
    bool bn_train = false;
    Tensor value;
    std::vector<double> adj;
    std::vector<double> cache;
  };

  Node make(Op op, std::initializer_list<Var> in) {
    Node n{op};
    for (Var v : in) {
      check_var(v);
      n.in.push_back(v.id);
    }
    return n;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    backward_done_ = false;
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check_var(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  }

  std::string describe(std::uint32_t id) const {
    const Node& n = nodes_[id];
    std::string s = "#" + std::to_string(id) + " " + op_name(n.op);
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s;
  }

  [[noreturn]] void shape_error(std::uint32_t id, const std::string& what) const {
    throw ConfigError("shape mismatch at node " + describe(id) + ": " + what);
  }

  const Tensor& in_value(const Node& n, std::size_t k) const { return nodes_[n.in[k]].value; }

  static void reshape(Tensor& t, const Shape& shape) {
    if (t.shape() != shape) t = Tensor(shape);
  }

  // Broadcast kinds for binary elementwise ops.
  enum class Bcast { same, row, scalar };

  Bcast broadcast_kind(std::uint32_t id, const Tensor& a, const Tensor& b) const {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::scalar;
    if (a.rank() == 2 && b.size() == a.cols() && (b.rank() == 1 || b.rows() == 1)) return Bcast::row;
    shape_error(id, "cannot broadcast " + shape_string(b.shape()) + " onto " + shape_string(a.shape()));
  }

  static std::size_t bindex(Bcast k, std::size_t i, std::size_t cols) {
    switch (k) {
      case Bcast::same: return i;
      case Bcast::row: return i % cols;
      case Bcast::scalar: return 0;
    }
    return 0;
  }

  void forward(std::uint32_t id, const Bindings& inputs) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::input: {
        auto it = inputs.find(n.label);
        if (it == inputs.end()) throw UsageError("input '" + n.label + "' is not bound");
        n.value = it->second;
        n.value.clear_grad();
        break;
      }
      case Op::param: {
        n.value = Tensor(n.param->shape(), std::vector<double>(n.param->data().begin(), n.param->data().end()));
        break;
      }
      case Op::constant: break;
      case Op::matmul: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
          shape_error(id, shape_string(a.shape()) + " x " + shape_string(b.shape()));
        const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
        reshape(n.value, {r, c});
        auto y = n.value.data();
        std::fill(y.begin(), y.end(), 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            for (std::size_t j = 0; j < c; ++j) y[i * c + j] += av * b[p * c + j];
          }
        break;
      }
      case Op::linear: {
        const Tensor& x = in_value(n, 0);
        const Tensor& w = in_value(n, 1);
        const Tensor& b = in_value(n, 2);
        if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.cols())
          shape_error(id, "input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
        if (b.size() != w.rows())
          shape_error(id, "bias " + shape_string(b.shape()) + " vs weight " + shape_string(w.shape()));
        const std::size_t r = x.rows(), k = x.cols(), o = w.rows();
        reshape(n.value, {r, o});
        auto y = n.value.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < o; ++j) {
            double s = b[j];
            for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * w[j * k + p];
            y[i * o + j] = s;
          }
        break;
      }
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        const Bcast kind = broadcast_kind(id, a, b);
        reshape(n.value, a.shape());
        auto y = n.value.data();
        const std::size_t cols = a.cols();
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double bv = b[bindex(kind, i, cols)];
          y[i] = n.op == Op::add ? a[i] + bv : n.op == Op::sub ? a[i] - bv : a[i] * bv;
        }
        break;
      }
      case Op::scale:
      case Op::add_scalar:
      case Op::sigmoid:
      case Op::tanh:
      case Op::relu:
      case Op::leaky_relu:
      case Op::exp:
      case Op::log:
      case Op::square: {
        const Tensor& a = in_value(n, 0);
        reshape(n.value, a.shape());
        auto y = n.value.data();
        for (std::size_t i = 0; i < a.size(); ++i) y[i] = unary(n, a[i]);
        break;
      }
      case Op::sum:
      case Op::mean: {
        const Tensor& a = in_value(n, 0);
        if (a.size() == 0) shape_error(id, "reduction over an empty tensor");
        double s = 0.0;
        for (double v : a.data()) s += v;
        if (n.op == Op::mean) s /= static_cast<double>(a.size());
        n.value = Tensor::scalar(s);
        break;
      }
      case Op::bce: {
        const Tensor& p = in_value(n, 0);
        const Tensor& t = in_value(n, 1);
        if (p.size() == 0) shape_error(id, "empty probability tensor");
        if (t.size() != p.size())
          shape_error(id, "targets " + shape_string(t.shape()) + " vs probs " + shape_string(p.shape()));
        if (n.in.size() == 3 && in_value(n, 2).size() != p.size())
          shape_error(id, "weights " + shape_string(in_value(n, 2).shape()) + " vs probs " +
                              shape_string(p.shape()));
        double s = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double ce = -(t[i] * clamped_log(p[i]) + (1.0 - t[i]) * clamped_log(1.0 - p[i]));
          s += bce_weight(n, i) * ce;
        }
        n.value = Tensor::scalar(s);
        break;
      }
      case Op::batchnorm: forward_batchnorm(id); break;
      case Op::concat_cols: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
          shape_error(id, shape_string(a.shape()) + " ++ " + shape_string(b.shape()));
        const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
        reshape(n.value, {r, ca + cb});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < ca; ++j) n.value[i * (ca + cb) + j] = a[i * ca + j];
          for (std::size_t j = 0; j < cb; ++j) n.value[i * (ca + cb) + ca + j] = b[i * cb + j];
        }
        break;
      }
      case Op::slice_cols: {
        const Tensor& a = in_value(n, 0);
        if (a.rank() != 2 || n.i0 >= n.i1 || n.i1 > a.cols())
          shape_error(id, "columns [" + std::to_string(n.i0) + "," + std::to_string(n.i1) + ") of " +
                              shape_string(a.shape()));
        const std::size_t r = a.rows(), c = a.cols(), w = n.i1 - n.i0;
        reshape(n.value, {r, w});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) n.value[i * w + j] = a[i * c + n.i0 + j];
        break;
      }
      case Op::minibatch_features: forward_minibatch(id); break;
      case Op::softmax_rows: {
        const Tensor& a = in_value(n, 0);
        if (a.rank() != 2) shape_error(id, "softmax_rows expects a matrix");
        const std::size_t r = a.rows(), c = a.cols();
        reshape(n.value, a.shape());
        for (std::size_t i = 0; i < r; ++i) {
          double m = a[i * c];
          for (std::size_t j = 1; j < c; ++j) m = std::max(m, a[i * c + j]);
          double z = 0.0;
          for (std::size_t j = 0; j < c; ++j) z += (n.value[i * c + j] = std::exp(a[i * c + j] - m));
          for (std::size_t j = 0; j < c; ++j) n.value[i * c + j] /= z;
        }
        break;
      }
    }
    if (!n.value.all_finite()) throw NumericError("non-finite value produced at node " + describe(id));
  }

  static double unary(const Node& n, double x) {
    switch (n.op) {
      case Op::scale: return n.alpha * x;
      case Op::add_scalar: return x + n.alpha;
      case Op::sigmoid:
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      case Op::tanh: return std::tanh(x);
      case Op::relu: return x > 0.0 ? x : 0.0;
      case Op::leaky_relu: return x > 0.0 ? x : n.alpha * x;
      case Op::exp: return std::exp(x);
      case Op::log: return std::log(x);
      case Op::square: return x * x;
      default: return 0.0;
    }
  }

  double bce_weight(const Node& n, std::size_t i) const {
    if (n.in.size() == 3) return in_value(n, 2)[i];
    return 1.0 / static_cast<double>(in_value(n, 0).size());
  }

  void forward_batchnorm(std::uint32_t id) {
    Node& n = nodes_[id];
    const Tensor& x = in_value(n, 0);
    const Tensor& g = in_value(n, 1);
    const Tensor& b = in_value(n, 2);
    if (x.rank() != 2) shape_error(id, "batchnorm expects [batch, features]");
    const std::size_t r = x.rows(), f = x.cols();
    if (r == 0) throw UsageError("batchnorm over an empty batch at node " + describe(id));
    if (g.size() != f || b.size() != f || n.bn.running_mean->size() != f || n.bn.running_var->size() != f)
      shape_error(id, "scale/shift/statistics must have " + std::to_string(f) + " entries");
    // cache layout: [xhat (r·f), inv_std (f)]
    n.cache.assign(r * f + f, 0.0);
    reshape(n.value, x.shape());
    std::vector<double> mu(f, 0.0), var(f, 0.0);
    if (n.bn_train) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < f; ++j) mu[j] += x[i * f + j];
      for (auto& m : mu) m /= static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < f; ++j) {
          const double d = x[i * f + j] - mu[j];
          var[j] += d * d;
        }
      for (auto& v : var) v /= static_cast<double>(r);
      auto rm = n.bn.running_mean->data();
      auto rv = n.bn.running_var->data();
      for (std::size_t j = 0; j < f; ++j) {
        rm[j] = n.bn.momentum * rm[j] + (1.0 - n.bn.momentum) * mu[j];
        rv[j] = n.bn.momentum * rv[j] + (1.0 - n.bn.momentum) * var[j];
      }
    } else {
      auto rm = n.bn.running_mean->data();
      auto rv = n.bn.running_var->data();
      std::copy(rm.begin(), rm.end(), mu.begin());
      std::copy(rv.begin(), rv.end(), var.begin());
    }
    double* xhat = n.cache.data();
    double* inv_std = n.cache.data() + r * f;
    for (std::size_t j = 0; j < f; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + n.bn.epsilon);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const std::size_t k = i * f + j;
        xhat[k] = (x[k] - mu[j]) * inv_std[j];
        n.value[k] = g[j] * xhat[k] + b[j];
      }
  }

  void forward_minibatch(std::uint32_t id) {
    Node& n = nodes_[id];
    const Tensor& x = in_value(n, 0);
    const Tensor& m = in_value(n, 1);
    if (x.rank() != 2 || m.rank() != 2 || x.cols() != m.rows())
      shape_error(id, "features " + shape_string(x.shape()) + " vs projection " + shape_string(m.shape()));
    const std::size_t batch = x.rows(), kernels = n.i0;
    if (batch < 2) throw ConfigError("minibatch features need a batch of at least 2 at node " + describe(id));
    if (m.cols() % kernels != 0)
      shape_error(id, "projection width " + std::to_string(m.cols()) + " not divisible by " +
                          std::to_string(kernels) + " kernels");
    const std::size_t width = m.cols(), kdim = width / kernels, in = x.cols();
    // cache layout: [projected rows (batch·width)]
    n.cache.assign(batch * width, 0.0);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t p = 0; p < in; ++p) {
        const double xv = x[i * in + p];
        for (std::size_t c = 0; c < width; ++c) n.cache[i * width + c] += xv * m[p * width + c];
      }
    reshape(n.value, {batch, kernels});
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t k = 0; k < kernels; ++k) {
        double o = 0.0;
        for (std::size_t j = 0; j < batch; ++j) {
          if (j == i) continue;
          double l1 = 0.0;
          for (std::size_t c = 0; c < kdim; ++c)
            l1 += std::abs(n.cache[i * width + k * kdim + c] - n.cache[j * width + k * kdim + c]);
          o += std::exp(-l1);
        }
        n.value[i * kernels + k] = o;
      }
  }

  void backward_node(std::uint32_t id) {
    Node& n = nodes_[id];
    const std::vector<double>& dy = n.adj;
    switch (n.op) {
      case Op::input:
      case Op::param:
      case Op::constant: break;
      case Op::matmul: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        auto& da = nodes_[n.in[0]].adj;
        auto& db = nodes_[n.in[1]].adj;
        const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              s += dy[i * c + j] * b[p * c + j];
              db[p * c + j] += a[i * k + p] * dy[i * c + j];
            }
            da[i * k + p] += s;
          }
        break;
      }
      case Op::linear: {
        const Tensor& x = in_value(n, 0);
        const Tensor& w = in_value(n, 1);
        auto& dx = nodes_[n.in[0]].adj;
        auto& dw = nodes_[n.in[1]].adj;
        auto& db = nodes_[n.in[2]].adj;
        const std::size_t r = x.rows(), k = x.cols(), o = w.rows();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < o; ++j) {
            const double g = dy[i * o + j];
            db[j] += g;
            for (std::size_t p = 0; p < k; ++p) {
              dx[i * k + p] += g * w[j * k + p];
              dw[j * k + p] += g * x[i * k + p];
            }
          }
        break;
      }
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        const Bcast kind = broadcast_kind(id, a, b);
        auto& da = nodes_[n.in[0]].adj;
        auto& db = nodes_[n.in[1]].adj;
        const std::size_t cols = a.cols();
        for (std::size_t i = 0; i < a.size(); ++i) {
          const std::size_t bi = bindex(kind, i, cols);
          if (n.op == Op::add) {
            da[i] += dy[i];
            db[bi] += dy[i];
          } else if (n.op == Op::sub) {
            da[i] += dy[i];
            db[bi] -= dy[i];
          } else {
            da[i] += dy[i] * b[bi];
            db[bi] += dy[i] * a[i];
          }
        }
        break;
      }
      case Op::scale:
      case Op::add_scalar:
      case Op::sigmoid:
      case Op::tanh:
      case Op::relu:
      case Op::leaky_relu:
      case Op::exp:
      case Op::log:
      case Op::square: {
        const Tensor& a = in_value(n, 0);
        auto& da = nodes_[n.in[0]].adj;
        for (std::size_t i = 0; i < a.size(); ++i) da[i] += dy[i] * unary_slope(n, a[i], n.value[i]);
        break;
      }
      case Op::sum:
      case Op::mean: {
        auto& da = nodes_[n.in[0]].adj;
        const double g = n.op == Op::mean ? dy[0] / static_cast<double>(da.size()) : dy[0];
        for (auto& v : da) v += g;
        break;
      }
      case Op::bce: {
        const Tensor& p = in_value(n, 0);
        const Tensor& t = in_value(n, 1);
        auto& dp = nodes_[n.in[0]].adj;
        auto& dt = nodes_[n.in[1]].adj;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double w = bce_weight(n, i) * dy[0];
          dp[i] += w * (-t[i] * clamped_log_slope(p[i]) + (1.0 - t[i]) * clamped_log_slope(1.0 - p[i]));
          dt[i] += w * (-(clamped_log(p[i]) - clamped_log(1.0 - p[i])));
        }
        if (n.in.size() == 3) {
          auto& dw = nodes_[n.in[2]].adj;
          for (std::size_t i = 0; i < p.size(); ++i)
            dw[i] += dy[0] * -(t[i] * clamped_log(p[i]) + (1.0 - t[i]) * clamped_log(1.0 - p[i]));
        }
        break;
      }
      case Op::batchnorm: {
        const Tensor& g = in_value(n, 1);
        auto& dx = nodes_[n.in[0]].adj;
        auto& dg = nodes_[n.in[1]].adj;
        auto& db = nodes_[n.in[2]].adj;
        const std::size_t r = n.value.rows(), f = n.value.cols();
        const double* xhat = n.cache.data();
        const double* inv_std = n.cache.data() + r * f;
        for (std::size_t j = 0; j < f; ++j) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t i = 0; i < r; ++i) {
            const std::size_t k = i * f + j;
            dg[j] += dy[k] * xhat[k];
            db[j] += dy[k];
            const double dxhat = dy[k] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[k];
          }
          for (std::size_t i = 0; i < r; ++i) {
            const std::size_t k = i * f + j;
            const double dxhat = dy[k] * g[j];
            if (n.bn_train) {
              const double rn = static_cast<double>(r);
              dx[k] += inv_std[j] / rn * (rn * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
            } else {
              dx[k] += dxhat * inv_std[j];
            }
          }
        }
        break;
      }
      case Op::concat_cols: {
        const std::size_t ca = in_value(n, 0).cols(), cb = in_value(n, 1).cols(), r = n.value.rows();
        auto& da = nodes_[n.in[0]].adj;
        auto& db = nodes_[n.in[1]].adj;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < ca; ++j) da[i * ca + j] += dy[i * (ca + cb) + j];
          for (std::size_t j = 0; j < cb; ++j) db[i * cb + j] += dy[i * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::slice_cols: {
        const std::size_t c = in_value(n, 0).cols(), r = n.value.rows(), w = n.i1 - n.i0;
        auto& da = nodes_[n.in[0]].adj;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) da[i * c + n.i0 + j] += dy[i * w + j];
        break;
      }
      case Op::minibatch_features: {
        const Tensor& x = in_value(n, 0);
        const Tensor& m = in_value(n, 1);
        const std::size_t batch = x.rows(), in = x.cols(), width = m.cols(), kernels = n.i0;
        const std::size_t kdim = width / kernels;
        std::vector<double> dproj(batch * width, 0.0);
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = i + 1; j < batch; ++j)
            for (std::size_t k = 0; k < kernels; ++k) {
              const double* pi = &n.cache[i * width + k * kdim];
              const double* pj = &n.cache[j * width + k * kdim];
              double l1 = 0.0;
              for (std::size_t c = 0; c < kdim; ++c) l1 += std::abs(pi[c] - pj[c]);
              // the pair term appears in both o[i,k] and o[j,k]
              const double coef = -(dy[i * kernels + k] + dy[j * kernels + k]) * std::exp(-l1);
              for (std::size_t c = 0; c < kdim; ++c) {
                const double d = pi[c] - pj[c];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                dproj[i * width + k * kdim + c] += coef * s;
                dproj[j * width + k * kdim + c] -= coef * s;
              }
            }
        auto& dx = nodes_[n.in[0]].adj;
        auto& dm = nodes_[n.in[1]].adj;
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t p = 0; p < in; ++p) {
            double s = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
              s += dproj[i * width + c] * m[p * width + c];
              dm[p * width + c] += x[i * in + p] * dproj[i * width + c];
            }
            dx[i * in + p] += s;
          }
        break;
      }
      case Op::softmax_rows: {
        const std::size_t r = n.value.rows(), c = n.value.cols();
        auto& da = nodes_[n.in[0]].adj;
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * n.value[i * c + j];
          for (std::size_t j = 0; j < c; ++j) da[i * c + j] += n.value[i * c + j] * (dy[i * c + j] - dot);
        }
        break;
      }
    }
  }

  static double unary_slope(const Node& n, double x, double y) {
    switch (n.op) {
      case Op::scale: return n.alpha;
      case Op::add_scalar: return 1.0;
      case Op::sigmoid: return y * (1.0 - y);
      case Op::tanh: return 1.0 - y * y;
      case Op::relu: return x > 0.0 ? 1.0 : 0.0;
      case Op::leaky_relu: return x > 0.0 ? 1.0 : n.alpha;
      case Op::exp: return y;
      case Op::log: return 1.0 / x;
      case Op::square: return 2.0 * x;
      default: return 0.0;
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> inputs_;
  std::unordered_map<const Tensor*, Var> param_nodes_;
  std::map<std::string, Var> outputs_;
  bool evaluated_ = false;
  bool backward_done_ = false;
};

}  // namespace advlab
