#include "mmrl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>

#include "mmrl/errors.hpp"

namespace mmrl {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be nonnegative");
  weights.validate();
}

std::vector<int> TrainingSet::class_tokens() const {
  std::vector<int> out;
  for (int c : classes) out.push_back(corpus->class_tokens.at(static_cast<std::size_t>(c)));
  return out;
}

int TrainingSet::classifier_index(int label) const {
  const auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) {
    throw ProtocolError("class " + std::to_string(label) + " is not among the training classes");
  }
  return static_cast<int>(it - classes.begin());
}

LossTerms batch_loss(Graph& g, const TrainingSet& data, std::span<const std::size_t> batch, const DualEncoder& enc,
                     const AdapterState& state, const Matrix& frozen_classifiers, const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("empty batch");
  const auto tokens = data.class_tokens();
  const Var frozen_w = g.constant(frozen_classifiers);
  const Var classifiers =
      state.inserts_text() ? class_text_features(g, tokens, cfg.text_template, enc, state) : frozen_w;
  const Var reg_t = state.inserts_text() ? reg_text(classifiers, frozen_w, cfg.reg) : g.constant(Matrix::Zero(1, 1));

  const bool with_repr = state.has_repr_features();
  std::vector<Var> ce_c;
  std::vector<Var> ce_r;
  std::vector<Var> reg_v;
  for (auto idx : batch) {
    const Item& item = data.corpus->items.at(idx);
    const int label = data.classifier_index(item.label);
    const MmrlVisionOutput out = vision_forward_mmrl(g, item.image, enc, state);
    const ImageFeatures f = extract_image_features(g, out, enc, state, with_repr);
    const Var f0 = g.constant(image_feature(item.image, enc));
    ce_c.push_back(ce_loss(f.class_feature, label, classifiers, enc.temperature()));
    if (with_repr) ce_r.push_back(ce_loss(*f.repr_feature, label, classifiers, enc.temperature()));
    reg_v.push_back(reg_image(f.class_feature, f0, cfg.reg));
  }
  auto mean = [](const std::vector<Var>& v) { return ag::mean_all(ag::concat_rows(std::span<const Var>(v))); };
  LossTerms t;
  t.ce_class = mean(ce_c);
  t.ce_repr = with_repr ? mean(ce_r) : g.constant(Matrix::Zero(1, 1));
  t.reg_vision = mean(reg_v);
  t.reg_text = reg_t;
  LossWeights w = cfg.weights;
  // Without vision-side tokens there is no representation feature; the class
  // cross-entropy then carries the full weight.
  if (!with_repr) w.alpha = 1.0;
  t.total = mmrl_loss(t.ce_class, t.ce_repr, t.reg_vision, t.reg_text, w);
  return t;
}

TrainResult train(const TrainingSet& data, const DualEncoder& enc, AdapterState& state, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.items.empty()) throw DataError("few-shot training split is empty");
  if (!enc.frozen()) throw ContractError("backbone must be frozen before adaptation");
  for (auto idx : data.items) data.classifier_index(data.corpus->items.at(idx).label);

  const Matrix frozen_w = encode_classifiers(data.class_tokens(), cfg.text_template, enc);
  auto params = state.trainable_parameters();
  AdamW opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(derive_seed(cfg.seed, 40));

  TrainResult result;
  std::vector<std::size_t> order = data.items;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      Graph g;
      std::optional<LossTerms> terms;
      try {
        terms = batch_loss(g, data, batch, enc, state, frozen_w, cfg);
      } catch (const NormalizationError& e) {
        // Blown-up parameters collapse the features before the loss turns non-finite.
        if (step == 0) throw;
        throw DivergenceError("features degenerated at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + "): " + e.what());
      }
      const LossTerms& t = *terms;
      const double total = t.total.value()(0, 0);
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ")");
      }
      result.trace.push_back({step, epoch, total, t.ce_class.value()(0, 0), t.ce_repr.value()(0, 0),
                              t.reg_vision.value()(0, 0), t.reg_text.value()(0, 0)});
      for (auto& p : params) p.tensor->zero_grad();
      g.backward(t.total);
      opt.step(params);
      ++step;
    }
    result.epochs_run = epoch;
    if (on_epoch && !on_epoch(epoch, state)) break;
  }
  for (auto& p : params) p.tensor->zero_grad();
  return result;
}

ag::GradCheckReport gradcheck_objective(const TrainingSet& data, const DualEncoder& enc, AdapterState& state,
                                        const TrainConfig& cfg, std::size_t batch_images,
                                        const ag::GradCheckOptions& opts) {
  if (data.items.empty() || batch_images == 0) throw DataError("gradient check needs at least one image");
  const std::size_t n = std::min(batch_images, data.items.size());
  const std::span<const std::size_t> batch(data.items.data(), n);
  const Matrix frozen_w = encode_classifiers(data.class_tokens(), cfg.text_template, enc);
  auto params = state.trainable_parameters();
  std::vector<Tensor*> tensors;
  std::vector<std::string> names;
  for (auto& p : params) {
    tensors.push_back(p.tensor);
    names.push_back(p.name);
  }
  const ag::LossBuilder<Scalar> loss = [&](Graph& g) {
    return batch_loss(g, data, batch, enc, state, frozen_w, cfg).total;
  };
  return ag::finite_difference_check<Scalar>(loss, tensors, names, opts);
}

std::vector<double> epoch_mean_loss(const std::vector<StepRecord>& trace) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& r : trace) {
    acc[r.epoch].first += r.total;
    acc[r.epoch].second += 1;
  }
  std::vector<double> out;
  for (const auto& [epoch, sum] : acc) out.push_back(sum.first / sum.second);
  return out;
}

std::string loss_csv(const std::vector<StepRecord>& trace, const std::string& config_hash) {
  std::ostringstream os;
  if (!config_hash.empty()) os << "# config_hash=" << config_hash << '\n';
  os << "step,epoch,L_total,L_ce_c,L_ce_r,L_cos_v,L_cos_t\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.epoch, r.total + 0.0,
                  r.ce_class + 0.0, r.ce_repr + 0.0, r.reg_vision + 0.0, r.reg_text + 0.0);
    os << buf;
  }
  return os.str();
}

}  // namespace mmrl
