#include "mmrl/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {

double harmonic_mean(double base_acc, double novel_acc) {
  if (base_acc < 0 || novel_acc < 0) throw ContractError("accuracies must be nonnegative");
  if (base_acc > 100 || novel_acc > 100) throw ContractError("accuracies are percentages in [0, 100]");
  if (base_acc + novel_acc == 0) return 0.0;
  return 2.0 * base_acc * novel_acc / (base_acc + novel_acc);
}

SplitSpec base_novel_split(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("base/novel split needs at least 2 classes");
  std::vector<int> ids(static_cast<std::size_t>(num_classes));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, 50));
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_base = static_cast<std::size_t>((num_classes + 1) / 2);
  SplitSpec s;
  s.base.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_base));
  s.novel.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_base), ids.end());
  std::sort(s.base.begin(), s.base.end());
  std::sort(s.novel.begin(), s.novel.end());
  s.seed = seed;
  return s;
}

void validate_split(const SplitSpec& split, int num_classes) {
  std::set<int> seen;
  for (int c : split.base) seen.insert(c);
  for (int c : split.novel) {
    if (seen.count(c)) throw ProtocolError("class " + std::to_string(c) + " is both base and novel");
    seen.insert(c);
  }
  if (static_cast<int>(seen.size()) != num_classes || *seen.begin() != 0 || *seen.rbegin() != num_classes - 1) {
    throw ProtocolError("base and novel classes do not cover all classes");
  }
}

Matrix adapted_classifiers(std::span<const int> class_tokens, std::string_view text_template, const DualEncoder& enc,
                           const AdapterState& state) {
  Graph g;
  return class_text_features(g, class_tokens, text_template, enc, state).value();
}

Matrix predict_base(const Matrix& image, const DualEncoder& enc, const AdapterState& state, const Matrix& classifiers,
                    double alpha, double temperature) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  Graph g;
  const bool with_repr = state.has_repr_features();
  const ImageFeatures f =
      extract_image_features(g, vision_forward_mmrl(g, image, enc, state), enc, state, with_repr);
  const Matrix pc = zero_shot_classify(f.class_feature.value(), classifiers, temperature);
  if (!with_repr) return pc;
  const Matrix pr = zero_shot_classify(f.repr_feature->value(), classifiers, temperature);
  return alpha * pc + (1.0 - alpha) * pr;
}

Matrix predict_novel(const Matrix& image, const DualEncoder& enc, const AdapterState& state,
                     const Matrix& classifiers, double temperature) {
  Graph g;
  const ImageFeatures f = extract_image_features(g, vision_forward_mmrl(g, image, enc, state), enc, state, false);
  return zero_shot_classify(f.class_feature.value(), classifiers, temperature);
}

double readout_accuracy(const TaskCorpus& corpus, std::span<const std::size_t> items, std::span<const int> classes,
                        const DualEncoder& enc, const AdapterState& state, bool mixture, double alpha,
                        std::string_view text_template) {
  if (items.empty()) return 0.0;
  std::vector<int> tokens;
  for (int c : classes) tokens.push_back(corpus.class_tokens.at(static_cast<std::size_t>(c)));
  const Matrix w = adapted_classifiers(tokens, text_template, enc, state);
  int correct = 0;
  for (auto i : items) {
    const Item& item = corpus.items.at(i);
    const Matrix p = mixture ? predict_base(item.image, enc, state, w, alpha, enc.temperature())
                             : predict_novel(item.image, enc, state, w, enc.temperature());
    Index best = 0;
    p.row(0).maxCoeff(&best);
    correct += classes[static_cast<std::size_t>(best)] == item.label;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(items.size());
}

void check_protocol(const TaskCorpus& corpus, const SplitSpec& split, std::span<const std::size_t> train_items) {
  validate_split(split, corpus.num_classes);
  for (auto i : train_items) {
    const Item& item = corpus.items.at(i);
    if (std::find(split.base.begin(), split.base.end(), item.label) == split.base.end()) {
      throw ProtocolError("novel class " + std::to_string(item.label) + " leaked into the few-shot split");
    }
    if (item.split != Split::fewshot_pool) {
      throw ProtocolError("training item " + std::to_string(i) + " is not from the few-shot pool");
    }
  }
}

EvalRecord evaluate_base_to_novel(const TaskCorpus& corpus, const DualEncoder& enc, const AdapterState& state,
                                  const SplitSpec& split, std::span<const std::size_t> train_items,
                                  const EvalOptions& opts) {
  check_protocol(corpus, split, train_items);
  const auto base_test = corpus.indices(Split::test, split.base);
  const auto novel_test = corpus.indices(Split::test, split.novel);
  const bool base_mixture = state.variant.base_uses_mixture;
  const bool novel_mixture = !state.variant.novel_uses_class_only;
  EvalRecord r;
  r.variant = state.variant.label();
  r.base_acc = readout_accuracy(corpus, base_test, split.base, enc, state, base_mixture, opts.alpha, opts.text_template);
  r.novel_acc =
      readout_accuracy(corpus, novel_test, split.novel, enc, state, novel_mixture, opts.alpha, opts.text_template);
  r.hm = harmonic_mean(r.base_acc, r.novel_acc);
  r.seed = opts.seed;
  r.config_hash = opts.config_hash;
  return r;
}

CellRun run_cell(const ExperimentSetup& setup, const AblationCell& cell, std::uint64_t seed) {
  const TaskCorpus& corpus = *setup.corpus;
  const DualEncoder& enc = *setup.enc;
  const SplitSpec split = base_novel_split(corpus.num_classes, setup.split_seed);
  CellRun run{{}, {}, {}, few_shot_sample(corpus, setup.shots, split, seed)};
  check_protocol(corpus, split, run.train_items);
  run.state = init_representation_state(adapter_dims(enc, cell.tokens, cell.space_dim, cell.insert_layer), enc, seed,
                                        cell.variant);
  TrainConfig tc = setup.train;
  tc.seed = seed;
  tc.weights = cell.weights;
  TrainingSet data{&corpus, run.train_items, split.base};
  run.result = train(data, enc, run.state, tc);
  EvalOptions opts{cell.weights.alpha, tc.text_template, seed,
                   setup.config_hash.empty() ? "" : sha256_hex(setup.config_hash + "|" + cell.name).substr(0, 16)};
  run.record = evaluate_base_to_novel(corpus, enc, run.state, split, run.train_items, opts);
  run.record.variant = cell.name;
  return run;
}

double few_shot_accuracy(const ExperimentSetup& setup, const AblationCell& cell, std::uint64_t seed) {
  const TaskCorpus& corpus = *setup.corpus;
  SplitSpec all;
  for (int c = 0; c < corpus.num_classes; ++c) all.base.push_back(c);
  all.seed = setup.split_seed;
  const auto items = few_shot_sample(corpus, setup.shots, all, seed);
  AdapterState state = init_representation_state(
      adapter_dims(*setup.enc, cell.tokens, cell.space_dim, cell.insert_layer), *setup.enc, seed, cell.variant);
  TrainConfig tc = setup.train;
  tc.seed = seed;
  tc.weights = cell.weights;
  train(TrainingSet{&corpus, items, all.base}, *setup.enc, state, tc);
  return readout_accuracy(corpus, corpus.indices(Split::test), all.base, *setup.enc, state,
                          state.variant.base_uses_mixture, cell.weights.alpha, tc.text_template);
}

double shift_accuracy(const TaskCorpus& shifted, const DualEncoder& enc, const AdapterState& state,
                      std::string_view text_template) {
  std::vector<int> classes;
  for (int c = 0; c < shifted.num_classes; ++c) classes.push_back(c);
  return readout_accuracy(shifted, shifted.indices(Split::test), classes, enc, state, false, 1.0, text_template);
}

std::vector<EvalRecord> run_ablation(const ExperimentSetup& setup, std::span<const AblationCell> cells,
                                     std::span<const std::uint64_t> seeds) {
  if (cells.empty() || seeds.empty()) throw ConfigError("ablation grid is empty");
  std::vector<EvalRecord> out;
  for (const auto& cell : cells) {
    for (auto seed : seeds) out.push_back(run_cell(setup, cell, seed).record);
  }
  std::stable_sort(out.begin(), out.end(), [](const EvalRecord& a, const EvalRecord& b) { return a.hm > b.hm; });
  return out;
}

std::vector<AblationCell> variant_grid(const AblationCell& base) {
  std::vector<AblationCell> cells;
  auto add = [&](const std::string& name, VariantMode mode, bool mixture, bool class_only) {
    AblationCell c = base;
    c.name = name;
    c.variant = VariantConfig{mode, mixture, class_only};
    cells.push_back(c);
  };
  add("w/o L", VariantMode::no_text_branch, true, true);
  add("w/o V", VariantMode::no_vision_branch, true, true);
  add("w/o DS1", VariantMode::full, false, true);
  add("w/o DS2", VariantMode::full, true, false);
  add("w/o RS", VariantMode::no_shared_space, true, true);
  add("MMRL-coupled", VariantMode::coupled_text_to_vision, true, true);
  add("MMRL", VariantMode::full, true, true);
  return cells;
}

std::vector<AblationCell> sweep_grid(const AblationCell& base, const std::string& parameter,
                                     std::span<const double> values) {
  std::vector<AblationCell> cells;
  for (double v : values) {
    AblationCell c = base;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s=%g", parameter.c_str(), v);
    c.name = buf;
    if (parameter == "alpha") {
      c.weights.alpha = v;
    } else if (parameter == "lambda") {
      c.weights.lambda = v;
    } else if (parameter == "J") {
      c.insert_layer = static_cast<int>(v);
    } else if (parameter == "K") {
      c.tokens = static_cast<Index>(v);
    } else if (parameter == "dr") {
      c.space_dim = static_cast<Index>(v);
    } else {
      throw ConfigError("unknown sweep parameter '" + parameter + "'");
    }
    cells.push_back(c);
  }
  return cells;
}

std::vector<double> default_sweep_values(const std::string& parameter, int layers) {
  if (parameter == "alpha") return {0.0, 0.3, 0.5, 0.7, 1.0};
  if (parameter == "lambda") return {0.0, 0.2, 0.5, 2.0, 4.0};
  if (parameter == "K") return {1, 3, 5, 7, 9};
  if (parameter == "dr") return {32, 64, 128, 256, 512};
  if (parameter == "J") {
    std::vector<double> v;
    for (int j = 1; j <= layers; ++j) v.push_back(j);
    return v;
  }
  throw ConfigError("unknown sweep parameter '" + parameter + "'");
}

std::vector<EvalRecord> aggregate_by_variant(std::span<const EvalRecord> records) {
  std::vector<EvalRecord> out;
  std::vector<int> counts;
  for (const auto& r : records) {
    auto it = std::find_if(out.begin(), out.end(), [&](const EvalRecord& o) { return o.variant == r.variant; });
    if (it == out.end()) {
      out.push_back(r);
      out.back().hm = 0;
      counts.push_back(1);
    } else {
      it->base_acc += r.base_acc;
      it->novel_acc += r.novel_acc;
      counts[static_cast<std::size_t>(it - out.begin())] += 1;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].base_acc /= counts[i];
    out[i].novel_acc /= counts[i];
    out[i].hm = harmonic_mean(out[i].base_acc, out[i].novel_acc);
  }
  return out;
}

std::string records_to_json(std::span<const EvalRecord> records) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json o;
    o["variant"] = r.variant;
    o["base_acc"] = r.base_acc;
    o["novel_acc"] = r.novel_acc;
    o["hm"] = r.hm;
    o["seed"] = r.seed;
    o["config_hash"] = r.config_hash;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

std::vector<EvalRecord> records_from_json(const std::string& text) {
  std::vector<EvalRecord> out;
  try {
    const auto arr = nlohmann::json::parse(text);
    if (!arr.is_array()) throw FormatError("results file is not a JSON array");
    for (const auto& o : arr) {
      EvalRecord r;
      r.variant = o.at("variant").get<std::string>();
      r.base_acc = o.at("base_acc").get<double>();
      r.novel_acc = o.at("novel_acc").get<double>();
      r.hm = o.at("hm").get<double>();
      r.seed = o.at("seed").get<std::uint64_t>();
      r.config_hash = o.at("config_hash").get<std::string>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed results file: ") + e.what());
  }
  return out;
}

std::string records_to_csv(std::span<const EvalRecord> records) {
  std::ostringstream os;
  os << "variant,base_acc,novel_acc,hm,seed,config_hash\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", r.base_acc, r.novel_acc, r.hm);
    os << '"' << r.variant << "\"," << buf << ',' << r.seed << ',' << r.config_hash << '\n';
  }
  return os.str();
}

std::string records_table(std::span<const EvalRecord> records) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %8s %8s %8s\n", "Variant", "Base", "Novel", "HM");
  os << buf;
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%-24s %8.2f %8.2f %8.2f\n", r.variant.c_str(), r.base_acc, r.novel_acc, r.hm);
    os << buf;
  }
  return os.str();
}

}  // namespace mmrl
