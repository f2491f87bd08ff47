#include "mmrl/objectives.hpp"

#include "mmrl/dual_encoder.hpp"
#include "mmrl/errors.hpp"

namespace mmrl {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
}

std::string to_string(RegKind k) {
  switch (k) {
    case RegKind::cosine: return "cosine";
    case RegKind::l1: return "l1";
    case RegKind::mse: return "mse";
  }
  return "?";
}

RegKind reg_kind_from_string(const std::string& s) {
  if (s == "cosine") return RegKind::cosine;
  if (s == "l1") return RegKind::l1;
  if (s == "mse") return RegKind::mse;
  throw ConfigError("unknown regularizer '" + s + "'");
}

Var ce_loss(Var features, int label, Var classifiers, double temperature) {
  if (features.rows() != 1) throw ShapeError("ce_loss expects a single feature row");
  if (label < 0 || label >= classifiers.rows()) {
    throw ContractError("label " + std::to_string(label) + " outside " + std::to_string(classifiers.rows()) +
                        " classes");
  }
  const Var logp = ag::log_softmax_rows(cosine_logits(features, classifiers, temperature));
  return ag::scale(ag::element(logp, 0, label), -1.0);
}

Var cos_reg_image(Var class_feature, Var frozen_feature) {
  return ag::add_scalar(ag::scale(ag::cosine_rows(class_feature, frozen_feature), -1.0), 1.0);
}

Var cos_reg_text(Var classifiers, Var frozen_classifiers) {
  if (classifiers.rows() < 1) throw ContractError("text regularizer needs at least one class");
  return ag::add_scalar(ag::scale(ag::mean_all(ag::cosine_rows(classifiers, frozen_classifiers)), -1.0), 1.0);
}

Var reg_image(Var class_feature, Var frozen_feature, RegKind kind) {
  switch (kind) {
    case RegKind::cosine: return cos_reg_image(class_feature, frozen_feature);
    case RegKind::l1: return ag::mean_all(ag::abs(ag::sub(class_feature, frozen_feature)));
    case RegKind::mse: return ag::mean_all(ag::square(ag::sub(class_feature, frozen_feature)));
  }
  throw ConfigError("unknown regularizer");
}

Var reg_text(Var classifiers, Var frozen_classifiers, RegKind kind) {
  switch (kind) {
    case RegKind::cosine: return cos_reg_text(classifiers, frozen_classifiers);
    case RegKind::l1: return ag::mean_all(ag::abs(ag::sub(classifiers, frozen_classifiers)));
    case RegKind::mse: return ag::mean_all(ag::square(ag::sub(classifiers, frozen_classifiers)));
  }
  throw ConfigError("unknown regularizer");
}

Var mmrl_loss(Var ce_class, Var ce_repr, Var reg_v, Var reg_t, const LossWeights& w) {
  w.validate();
  return ag::add(ag::add(ag::scale(ce_class, w.alpha), ag::scale(ce_repr, 1.0 - w.alpha)),
                 ag::scale(ag::add(reg_v, reg_t), w.lambda));
}

double mmrl_loss(double ce_class, double ce_repr, double reg_v, double reg_t, const LossWeights& w) {
  w.validate();
  return w.alpha * ce_class + (1.0 - w.alpha) * ce_repr + w.lambda * (reg_v + reg_t);
}

}  // namespace mmrl
