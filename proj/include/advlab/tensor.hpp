#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "advlab/error.hpp"

namespace advlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient accumulator.
///
/// A tensor is trainable iff it carries a gradient buffer; the buffer always
/// has the same extent as the data.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ConfigError("tensor shape " + shape_string(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  /// Column vector [n, 1].
  static Tensor column(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({n, 1}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  /// Leading extent, treating rank-1 tensors as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.size() >= 2 ? data_.size() / std::max<std::size_t>(shape_[0], 1) : shape_[0];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  bool trainable() const { return grad_.has_value(); }
  void enable_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
  }
  void clear_grad() { grad_.reset(); }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  std::span<double> grad() {
    if (!grad_) throw UsageError("tensor has no gradient accumulator");
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw UsageError("tensor has no gradient accumulator");
    return *grad_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Same shape and bit-identical values; gradients are not compared.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

/// Insertion-ordered map from unique names to tensors.
///
/// Element addresses are stable under insertion, so a Tape can hold direct
/// references to stored parameters.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  Tensor& add(std::string name, Tensor tensor, bool trainable = true) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    if (trainable) tensor.enable_grad();
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor)});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Total number of scalar values across every tensor.
  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  /// Euclidean norm over all values.
  double norm() const {
    double s = 0.0;
    for (const auto& e : entries_)
      for (double v : e.tensor.data()) s += v * v;
    return std::sqrt(s);
  }

  /// Copies values (not gradients) from a store with identical layout.
  void assign_values(const ParamStore& other) {
    check_same_layout(other);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto src = other.entries_[i].tensor.data();
      std::copy(src.begin(), src.end(), entries_[i].tensor.data().begin());
    }
  }

  void check_same_layout(const ParamStore& other) const {
    if (other.size() != size()) throw ConfigError("parameter stores differ in tensor count");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) {
        throw ConfigError("parameter layout mismatch at '" + a.name + "' vs '" + b.name + "'");
      }
    }
  }

  /// Names, order and values identical.
  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name) return false;
      if (!(a.entries_[i].tensor == b.entries_[i].tensor)) return false;
    }
    return true;
  }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace advlab
