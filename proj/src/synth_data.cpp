#include "mmrl/synth_data.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {
namespace {

constexpr const char* kManifestMagic = "MMRL-MANIFEST";
constexpr int kManifestVersion = 1;

Matrix clamp01(Matrix m) { return m.cwiseMax(0.0).cwiseMin(1.0); }

void fill_items(TaskCorpus& c, Rng& rng) {
  const int n_pre = c.items_per_class / 2;
  const int n_pool = c.items_per_class / 4;
  c.items.clear();
  c.items.reserve(static_cast<std::size_t>(c.num_classes * c.items_per_class));
  for (int cls = 0; cls < c.num_classes; ++cls) {
    for (int j = 0; j < c.items_per_class; ++j) {
      Item item;
      item.label = cls;
      item.split = j < n_pre ? Split::pretrain : (j < n_pre + n_pool ? Split::fewshot_pool : Split::test);
      const auto& proto = c.prototypes[static_cast<std::size_t>(cls)];
      item.image = clamp01(proto + c.noise_scale * gaussian(proto.rows(), proto.cols(), 1.0, rng));
      c.items.push_back(std::move(item));
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::fewshot_pool: return "fewshot";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "fewshot") return Split::fewshot_pool;
  if (s == "test") return Split::test;
  throw FormatError("unknown split tag '" + s + "'");
}

std::vector<std::size_t> TaskCorpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].split == s) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> TaskCorpus::indices(Split s, const std::vector<int>& classes) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].split == s && std::find(classes.begin(), classes.end(), items[i].label) != classes.end()) {
      out.push_back(i);
    }
  }
  return out;
}

bool operator==(const TaskCorpus& a, const TaskCorpus& b) {
  if (a.num_classes != b.num_classes || a.items_per_class != b.items_per_class ||
      a.image_size != b.image_size || a.noise_scale != b.noise_scale || a.seed != b.seed ||
      a.class_tokens != b.class_tokens || a.prototypes.size() != b.prototypes.size() ||
      a.items.size() != b.items.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.prototypes.size(); ++i) {
    if (a.prototypes[i] != b.prototypes[i]) return false;
  }
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    if (a.items[i].label != b.items[i].label || a.items[i].split != b.items[i].split ||
        a.items[i].image != b.items[i].image) {
      return false;
    }
  }
  return true;
}

TaskCorpus generate_corpus(int num_classes, int items_per_class, double noise_scale, std::uint64_t seed,
                           int image_size) {
  if (num_classes < 2) throw ConfigError("corpus needs at least 2 classes");
  if (items_per_class < 20) throw ConfigError("corpus needs at least 20 items per class");
  if (noise_scale < 0) throw ConfigError("noise scale must be nonnegative");
  if (image_size <= 0) throw ConfigError("image size must be positive");
  TaskCorpus c;
  c.num_classes = num_classes;
  c.items_per_class = items_per_class;
  c.image_size = image_size;
  c.noise_scale = noise_scale;
  c.seed = seed;
  Rng proto_rng(derive_seed(seed, 1));
  for (int cls = 0; cls < num_classes; ++cls) {
    c.prototypes.push_back(clamp01(Matrix::Constant(image_size, image_size * 3, 0.5) +
                                   gaussian(image_size, image_size * 3, 0.25, proto_rng)));
    c.class_tokens.push_back(kFirstClassToken + cls);
  }
  Rng item_rng(derive_seed(seed, 2));
  fill_items(c, item_rng);
  return c;
}

TaskCorpus shifted_corpus(const TaskCorpus& source, std::uint64_t item_seed) {
  TaskCorpus c = source;
  c.noise_scale = 2.0 * source.noise_scale;
  c.seed = item_seed;
  Rng item_rng(derive_seed(item_seed, 3));
  fill_items(c, item_rng);
  return c;
}

std::vector<std::size_t> few_shot_sample(const TaskCorpus& corpus, int k, const SplitSpec& split,
                                         std::uint64_t seed) {
  if (k < 1) throw ConfigError("shots must be at least 1");
  Rng rng(derive_seed(seed, 4));
  std::vector<std::size_t> out;
  for (int cls : split.base) {
    auto pool = corpus.indices(Split::fewshot_pool, {cls});
    if (static_cast<int>(pool.size()) < k) {
      throw DataError("class " + std::to_string(cls) + " has " + std::to_string(pool.size()) +
                      " few-shot pool items, " + std::to_string(k) + " requested");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    out.insert(out.end(), pool.begin(), pool.begin() + k);
  }
  return out;
}

double nearest_prototype_accuracy(const TaskCorpus& corpus) {
  const auto test = corpus.indices(Split::test);
  if (test.empty()) return 0.0;
  int correct = 0;
  for (auto i : test) {
    const auto& img = corpus.items[i].image;
    int best = 0;
    double best_d = (img - corpus.prototypes[0]).squaredNorm();
    for (int c = 1; c < corpus.num_classes; ++c) {
      const double d = (img - corpus.prototypes[static_cast<std::size_t>(c)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == corpus.items[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

void save_manifest(const TaskCorpus& corpus, const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& extra_header) {
  Container c;
  c.magic = kManifestMagic;
  c.version = kManifestVersion;
  for (int cls = 0; cls < corpus.num_classes; ++cls) {
    c.tensors.emplace_back("prototype/" + std::to_string(cls),
                           dump_matrix(corpus.prototypes[static_cast<std::size_t>(cls)]));
  }
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    c.tensors.emplace_back("item/" + std::to_string(i), dump_matrix(corpus.items[i].image));
  }
  const auto offsets = payload_offsets(c);
  c.header = {{"classes", std::to_string(corpus.num_classes)},
              {"items_per_class", std::to_string(corpus.items_per_class)},
              {"image_size", std::to_string(corpus.image_size)},
              {"seed", std::to_string(corpus.seed)},
              {"noise_scale", format_double(corpus.noise_scale)}};
  std::ostringstream tokens;
  for (std::size_t i = 0; i < corpus.class_tokens.size(); ++i) {
    tokens << (i ? "," : "") << corpus.class_tokens[i];
  }
  c.header.emplace_back("class_tokens", tokens.str());
  for (const auto& kv : extra_header) c.header.push_back(kv);
  const std::size_t first_item = static_cast<std::size_t>(corpus.num_classes);
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    std::ostringstream line;
    line << corpus.items[i].label << ' ' << to_string(corpus.items[i].split) << ' '
         << offsets[first_item + i];
    c.header.emplace_back("item", line.str());
  }
  save_container(path, c);
}

TaskCorpus load_manifest(const std::filesystem::path& path) {
  const Container c = load_container(path, kManifestMagic, kManifestVersion);
  TaskCorpus corpus;
  try {
    corpus.num_classes = std::stoi(c.get("classes"));
    corpus.items_per_class = std::stoi(c.get("items_per_class"));
    corpus.image_size = std::stoi(c.get("image_size"));
    corpus.seed = std::stoull(c.get("seed"));
    corpus.noise_scale = std::stod(c.get("noise_scale"));
    std::istringstream tokens(c.get("class_tokens"));
    for (std::string tok; std::getline(tokens, tok, ',');) corpus.class_tokens.push_back(std::stoi(tok));
  } catch (const std::invalid_argument&) {
    throw FormatError("unparseable manifest header");
  }
  if (static_cast<int>(corpus.class_tokens.size()) != corpus.num_classes) {
    throw IntegrityError("class token count does not match class count");
  }
  const auto offsets = payload_offsets(c);
  for (int cls = 0; cls < corpus.num_classes; ++cls) {
    corpus.prototypes.push_back(to_matrix(c.tensor("prototype/" + std::to_string(cls))));
  }
  const auto item_lines = c.get_all("item");
  if (item_lines.size() != static_cast<std::size_t>(corpus.num_classes * corpus.items_per_class) ||
      c.tensors.size() != item_lines.size() + static_cast<std::size_t>(corpus.num_classes)) {
    throw IntegrityError("item table does not match tensor blocks");
  }
  const std::size_t first_item = static_cast<std::size_t>(corpus.num_classes);
  for (std::size_t i = 0; i < item_lines.size(); ++i) {
    std::istringstream line(item_lines[i]);
    Item item;
    std::string split;
    std::uint64_t offset = 0;
    if (!(line >> item.label >> split >> offset)) throw FormatError("malformed item line");
    if (offset != offsets[first_item + i]) throw IntegrityError("item offset does not match payload");
    if (item.label < 0 || item.label >= corpus.num_classes) throw IntegrityError("item label out of range");
    item.split = split_from_string(split);
    item.image = to_matrix(c.tensors[first_item + i].second);
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

}  // namespace mmrl
