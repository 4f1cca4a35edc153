#pragma once

#include <cstddef>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/random.hpp"

namespace advlab {

/// Fixed-capacity FIFO store with uniform sampling (with replacement).
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay capacity must be positive");
    items_.reserve(capacity);
  }

  void push(T item) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
    } else {
      items_[head_] = std::move(item);
      head_ = (head_ + 1) % capacity_;
    }
  }

  /// i-th oldest stored item.
  const T& at(std::size_t i) const {
    if (i >= items_.size()) throw UsageError("replay index out of range");
    return items_[(head_ + i) % items_.size()];
  }

  const T& sample(Rng& rng) const {
    if (items_.empty()) throw UsageError("sampling from an empty replay buffer");
    return items_[rng.index(items_.size())];
  }

  std::vector<T> sample(std::size_t n, Rng& rng) const {
    std::vector<T> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample(rng));
    return out;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  bool full() const { return items_.size() == capacity_; }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;  // oldest slot once full
  std::vector<T> items_;
};

}  // namespace advlab
