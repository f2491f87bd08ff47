#include "mmrl/optimizer.hpp"

#include <cmath>

#include "mmrl/errors.hpp"

namespace mmrl {

void AdamW::step(std::span<const ParamRef> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) {
    throw ContractError(std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                        " parameters");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.tensor->rows(), p.tensor->cols()));
      v_.push_back(Matrix::Zero(p.tensor->rows(), p.tensor->cols()));
    }
  } else if (m_.size() != params.size()) {
    throw ContractError("parameter list changed between optimizer steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    const Tensor& t = *params[i].tensor;
    if (g.rows() != t.rows() || g.cols() != t.cols() || m_[i].rows() != t.rows() || m_[i].cols() != t.cols()) {
      throw ContractError("gradient for '" + params[i].name + "' is " + ag::shape_string(g) +
                          ", parameter is " + ag::shape_string(t.value()));
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& theta = params[i].tensor->mutable_value();
    if (params[i].decay && cfg_.weight_decay != 0.0) theta *= 1.0 - cfg_.lr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
    theta.array() -= cfg_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

void AdamW::step(std::span<const ParamRef> params) {
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    const auto& g = p.tensor->grad();
    grads.push_back(g ? *g : Matrix::Zero(p.tensor->rows(), p.tensor->cols()));
  }
  step(params, grads);
}

}  // namespace mmrl
