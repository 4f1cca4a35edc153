#pragma once

#include <functional>
#include <string>
#include <vector>

#include "advlab/gradcheck.hpp"
#include "advlab/random.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Pushes a non-trivial upstream gradient through `out`: sum(out ⊙ R) for a fixed random R.
inline Var weighted_sum(Tape& tape, Var out, const Tensor& weights) {
  return tape.sum(tape.mul(out, tape.constant(weights)));
}

}  // namespace advlab::testing
