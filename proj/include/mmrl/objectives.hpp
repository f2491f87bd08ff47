#pragma once

#include <string>

#include "mmrl/types.hpp"

namespace mmrl {

struct LossWeights {
  double alpha = 0.7;   // class-feature share of the cross-entropy
  double lambda = 0.5;  // regularizer penalty

  void validate() const;
};

// Alignment penalty towards the frozen features. Cosine is the reference;
// L1 and MSE are alternatives on the raw feature difference.
enum class RegKind { cosine, l1, mse };

std::string to_string(RegKind k);
RegKind reg_kind_from_string(const std::string& s);

// −log p(label | features) with p = softmax_c cos(features, w_c)/τ.
Var ce_loss(Var features, int label, Var classifiers, double temperature);

// 1 − cos(f_c, f_0) in [0, 2].
Var cos_reg_image(Var class_feature, Var frozen_feature);

// 1 − mean_c cos(w^c, w_0^c).
Var cos_reg_text(Var classifiers, Var frozen_classifiers);

Var reg_image(Var class_feature, Var frozen_feature, RegKind kind);
Var reg_text(Var classifiers, Var frozen_classifiers, RegKind kind);

// α·L_ce^c + (1−α)·L_ce^r + λ·(L_cos^v + L_cos^t).
Var mmrl_loss(Var ce_class, Var ce_repr, Var reg_v, Var reg_t, const LossWeights& w);
double mmrl_loss(double ce_class, double ce_repr, double reg_v, double reg_t, const LossWeights& w);

}  // namespace mmrl
