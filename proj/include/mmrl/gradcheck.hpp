#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmrl/autograd.hpp"

namespace mmrl::ag {

template <typename Scalar>
using LossBuilder = std::function<Var<Scalar>(Graph<Scalar>&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Coordinates probed per tensor; 0 probes every coordinate.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct TensorGradCheck {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::vector<TensorGradCheck> tensors;
};

// Compares the reverse-mode gradient of `loss` against central differences
// |analytic - fd| / max(1, |fd|), maximized over the probed coordinates.
template <typename Scalar>
GradCheckReport finite_difference_check(const LossBuilder<Scalar>& loss,
                                        std::span<Tensor<Scalar>* const> params,
                                        std::span<const std::string> names,
                                        const GradCheckOptions& opts = {}) {
  if (!(opts.epsilon > 0)) throw ContractError("finite-difference step must be positive");
  auto evaluate = [&]() {
    Graph<Scalar> g;
    return g.value(loss(g))(0, 0);
  };

  for (auto* p : params) p->zero_grad();
  Scalar base = 0;
  {
    Graph<Scalar> g;
    Var<Scalar> l = loss(g);
    base = g.value(l)(0, 0);
    g.backward(l);
  }
  if (evaluate() != base) throw DeterminismError("loss differs between two evaluations at the same point");

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  const Scalar eps = static_cast<Scalar>(opts.epsilon);
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<Scalar>& p = *params[t];
    const Index n = p.size();
    Matrix<Scalar> analytic = p.grad() ? *p.grad() : Matrix<Scalar>::Zero(p.rows(), p.cols());
    std::vector<Index> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (opts.max_coordinates > 0 && coords.size() > opts.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coordinates);
    }
    TensorGradCheck entry{t < names.size() ? names[t] : "param" + std::to_string(t), coords.size(), 0.0};
    for (Index c : coords) {
      Scalar& slot = p.mutable_value().data()[c];
      const Scalar saved = slot;
      slot = saved + eps;
      const Scalar up = evaluate();
      slot = saved - eps;
      const Scalar down = evaluate();
      slot = saved;
      const Scalar fd = (up - down) / (Scalar(2) * eps);
      const Scalar err = std::abs(analytic.data()[c] - fd) / std::max(Scalar(1), std::abs(fd));
      entry.max_rel_error = std::max(entry.max_rel_error, static_cast<double>(err));
    }
    report.coordinates += entry.coordinates;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.tensors.push_back(std::move(entry));
  }
  for (auto* p : params) p->zero_grad();
  return report;
}

// Single-tensor convenience form.
template <typename Scalar>
double finite_difference_check(const LossBuilder<Scalar>& loss, Tensor<Scalar>& theta, double epsilon) {
  Tensor<Scalar>* ptr = &theta;
  const std::string name = "theta";
  GradCheckOptions opts;
  opts.epsilon = epsilon;
  return finite_difference_check<Scalar>(loss, std::span<Tensor<Scalar>* const>(&ptr, 1),
                                         std::span<const std::string>(&name, 1), opts)
      .max_rel_error;
}

}  // namespace mmrl::ag
