#pragma once

#include <cstdint>
#include <random>

#include "mmrl/autograd.hpp"

namespace mmrl {

// The model runs at 64-bit precision; the kernel itself is scalar-generic.
using Scalar = double;
using Matrix = ag::Matrix<Scalar>;
using Tensor = ag::Tensor<Scalar>;
using Graph = ag::Graph<Scalar>;
using Var = ag::Var<Scalar>;
using ag::AttentionMask;
using ag::Index;

using Rng = std::mt19937_64;

inline Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mmrl
