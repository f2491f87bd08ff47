#pragma once

// Decoupled inference and the evaluation protocols: base-to-novel with the
// harmonic mean, few-shot accuracy, distribution shift and ablation grids.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmrl/training.hpp"

namespace mmrl {

struct EvalRecord {
  std::string variant;
  double base_acc = 0;  // percent
  double novel_acc = 0;
  double hm = 0;
  std::uint64_t seed = 0;
  std::string config_hash;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

// 2ab/(a+b), 0 when a+b = 0. Inputs are percentages.
double harmonic_mean(double base_acc, double novel_acc);

// Seeded partition; base gets ceil(C/2) classes. Both lists are sorted.
SplitSpec base_novel_split(int num_classes, std::uint64_t seed);
void validate_split(const SplitSpec& split, int num_classes);

// Text classifiers with the adapter's text tokens inserted, C × d.
Matrix adapted_classifiers(std::span<const int> class_tokens, std::string_view text_template, const DualEncoder& enc,
                           const AdapterState& state);

// α·p(·|f_c) + (1−α)·p(·|f_r). Falls back to p(·|f_c) when the variant has
// no representation feature.
Matrix predict_base(const Matrix& image, const DualEncoder& enc, const AdapterState& state, const Matrix& classifiers,
                    double alpha, double temperature);

// p(·|f_c) only; tokens are still inserted, f_r is never formed.
Matrix predict_novel(const Matrix& image, const DualEncoder& enc, const AdapterState& state,
                     const Matrix& classifiers, double temperature);

// Percentage of `items` classified correctly over `classes`, with the
// mixture or class-only readout.
double readout_accuracy(const TaskCorpus& corpus, std::span<const std::size_t> items, std::span<const int> classes,
                        const DualEncoder& enc, const AdapterState& state, bool mixture, double alpha,
                        std::string_view text_template = kDefaultTemplate);

struct EvalOptions {
  double alpha = 0.7;
  std::string text_template = std::string(kDefaultTemplate);
  std::uint64_t seed = 0;
  std::string config_hash;
};

// Throws ProtocolError if any training item is outside the base classes or
// the few-shot pool.
void check_protocol(const TaskCorpus& corpus, const SplitSpec& split, std::span<const std::size_t> train_items);

EvalRecord evaluate_base_to_novel(const TaskCorpus& corpus, const DualEncoder& enc, const AdapterState& state,
                                  const SplitSpec& split, std::span<const std::size_t> train_items,
                                  const EvalOptions& opts);

// One cell of an experiment grid.
struct AblationCell {
  std::string name;
  VariantConfig variant;
  Index tokens = 5;
  Index space_dim = 512;
  int insert_layer = 4;
  LossWeights weights;
};

struct ExperimentSetup {
  const TaskCorpus* corpus = nullptr;
  const DualEncoder* enc = nullptr;
  std::uint64_t split_seed = 0;
  int shots = 16;
  TrainConfig train;
  std::string config_hash;
};

struct CellRun {
  EvalRecord record;
  AdapterState state;
  TrainResult result;
  std::vector<std::size_t> train_items;
};

// Few-shot sample of the base classes, train, evaluate base-to-novel.
CellRun run_cell(const ExperimentSetup& setup, const AblationCell& cell, std::uint64_t seed);

// Every cell for every seed, sorted by hm (descending, stable).
std::vector<EvalRecord> run_ablation(const ExperimentSetup& setup, std::span<const AblationCell> cells,
                                     std::span<const std::uint64_t> seeds);

// The six variant cells, with `base` supplying K, d_r, J and loss weights.
std::vector<AblationCell> variant_grid(const AblationCell& base);
// Sweeps over one of: alpha, lambda, J, K, dr.
std::vector<AblationCell> sweep_grid(const AblationCell& base, const std::string& parameter,
                                     std::span<const double> values);
// Default sweep values (alpha: 0, 0.3, 0.5, 0.7, 1; J: 1..L; ...).
std::vector<double> default_sweep_values(const std::string& parameter, int layers);

// All-class few-shot protocol: train on k shots of every class, report
// mixture-readout test accuracy (percent).
double few_shot_accuracy(const ExperimentSetup& setup, const AblationCell& cell, std::uint64_t seed);

// Distribution-shift protocol: class-only readout over every class of a
// shifted corpus (percent).
double shift_accuracy(const TaskCorpus& shifted, const DualEncoder& enc, const AdapterState& state,
                      std::string_view text_template = kDefaultTemplate);

// Means over seeds per variant label, in first-appearance order.
std::vector<EvalRecord> aggregate_by_variant(std::span<const EvalRecord> records);

std::string records_to_json(std::span<const EvalRecord> records);
std::vector<EvalRecord> records_from_json(const std::string& text);
std::string records_to_csv(std::span<const EvalRecord> records);
std::string records_table(std::span<const EvalRecord> records);

}  // namespace mmrl
