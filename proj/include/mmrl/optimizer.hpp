#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmrl/types.hpp"

namespace mmrl {

// A tensor handed to the optimizer, with whether decoupled weight decay
// applies to it.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  bool decay = true;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with bias-corrected moments. Decay θ ← θ(1 − lr·wd) is applied
// before the adaptive step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // grads[i] belongs to params[i]; alignment is checked.
  void step(std::span<const ParamRef> params, std::span<const Matrix> grads);
  // Reads gradients from the tensors; an absent gradient counts as zero.
  void step(std::span<const ParamRef> params);

  long steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  long steps_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace mmrl
