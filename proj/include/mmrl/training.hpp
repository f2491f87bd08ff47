#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmrl/gradcheck.hpp"
#include "mmrl/mmrl.hpp"
#include "mmrl/objectives.hpp"
#include "mmrl/synth_data.hpp"

namespace mmrl {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  LossWeights weights;
  RegKind reg = RegKind::cosine;
  std::string text_template = std::string(kDefaultTemplate);

  void validate() const;
};

// One row of the loss trace CSV.
struct StepRecord {
  long step = 0;
  int epoch = 0;
  double total = 0;
  double ce_class = 0;
  double ce_repr = 0;
  double reg_vision = 0;
  double reg_text = 0;
};

struct LossTerms {
  Var total;
  Var ce_class;
  Var ce_repr;
  Var reg_vision;
  Var reg_text;
};

// Labelled training data: items index into corpus.items; classes lists the
// global class ids in classifier order.
struct TrainingSet {
  const TaskCorpus* corpus = nullptr;
  std::vector<std::size_t> items;
  std::vector<int> classes;

  std::vector<int> class_tokens() const;
  // Classifier row of a global label; ProtocolError if absent.
  int classifier_index(int label) const;
};

// The objective on one batch, averaged over its images. Frozen features f_0
// come from a token-free forward per image; w_0 is passed in precomputed.
LossTerms batch_loss(Graph& g, const TrainingSet& data, std::span<const std::size_t> batch, const DualEncoder& enc,
                     const AdapterState& state, const Matrix& frozen_classifiers, const TrainConfig& cfg);

// Returns false to stop training after this epoch.
using EpochCallback = std::function<bool(int epoch, const AdapterState& state)>;

struct TrainResult {
  std::vector<StepRecord> trace;
  int epochs_run = 0;
};

TrainResult train(const TrainingSet& data, const DualEncoder& enc, AdapterState& state, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Finite-difference check of the full objective on the first `batch_images`
// items of `data`, over every trainable parameter of `state`.
ag::GradCheckReport gradcheck_objective(const TrainingSet& data, const DualEncoder& enc, AdapterState& state,
                                        const TrainConfig& cfg, std::size_t batch_images,
                                        const ag::GradCheckOptions& opts);

// Mean total loss per epoch, in epoch order.
std::vector<double> epoch_mean_loss(const std::vector<StepRecord>& trace);

// A leading "# config_hash=..." line is written when the hash is nonempty.
std::string loss_csv(const std::vector<StepRecord>& trace, const std::string& config_hash = {});

}  // namespace mmrl
