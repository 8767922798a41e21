#pragma once

#include <random>

#include "mixprune/autodiff.hpp"
#include "mixprune/ops.hpp"

namespace mixprune::testing {

template <typename Scalar>
Array<Scalar> random_array(Index n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Array<Scalar> a(n);
  for (Index i = 0; i < n; ++i) a(i) = static_cast<Scalar>(u(rng));
  return a;
}

// Contracts an op output with fixed random weights so every input coordinate
// gets a generic, non-vanishing gradient.
template <typename Scalar>
Var<Scalar> contract(const Var<Scalar>& y, std::uint64_t seed) {
  return dot_const(reshape(y, Shape{y.size()}), random_array<Scalar>(y.size(), seed ^ 0x9e3779b9u, 0.5, 1.5));
}

}  // namespace mixprune::testing
