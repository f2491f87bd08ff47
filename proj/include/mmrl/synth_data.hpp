#pragma once

// Seeded synthetic image/label corpus standing in for real datasets.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mmrl/types.hpp"

namespace mmrl {

enum class Split : std::uint8_t { pretrain = 0, fewshot_pool = 1, test = 2 };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Image stored as H rows × (W·3) interleaved RGB columns, values in [0, 1].
struct Item {
  int label = 0;
  Split split = Split::pretrain;
  Matrix image;
};

inline constexpr int kFirstClassToken = 16;

struct TaskCorpus {
  int num_classes = 0;
  int items_per_class = 0;
  int image_size = 32;
  double noise_scale = 0.0;
  std::uint64_t seed = 0;
  std::vector<Matrix> prototypes;
  std::vector<int> class_tokens;
  std::vector<Item> items;

  std::vector<std::size_t> indices(Split s) const;
  std::vector<std::size_t> indices(Split s, const std::vector<int>& classes) const;
};

bool operator==(const TaskCorpus& a, const TaskCorpus& b);

struct SplitSpec {
  std::vector<int> base;
  std::vector<int> novel;
  std::uint64_t seed = 0;
};

// Items per class are split 50/25/25 into pretrain / few-shot pool / test.
TaskCorpus generate_corpus(int num_classes, int items_per_class, double noise_scale, std::uint64_t seed,
                           int image_size = 32);

// Same prototypes and tokens, doubled noise and fresh item draws.
TaskCorpus shifted_corpus(const TaskCorpus& source, std::uint64_t item_seed);

// Exactly k few-shot-pool items for every base class, as indices into
// corpus.items.
std::vector<std::size_t> few_shot_sample(const TaskCorpus& corpus, int k, const SplitSpec& split,
                                         std::uint64_t seed);

// Accuracy of assigning each test item to its nearest prototype.
double nearest_prototype_accuracy(const TaskCorpus& corpus);

void save_manifest(const TaskCorpus& corpus, const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& extra_header = {});
TaskCorpus load_manifest(const std::filesystem::path& path);

}  // namespace mmrl
