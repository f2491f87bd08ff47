#include "mmrl/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigField>& RunConfig::fields() {
  static const std::vector<ConfigField> f = {
      // corpus
      {"classes", "8", "number of synthetic classes"},
      {"items_per_class", "64", "items generated per class"},
      {"noise", "0.1", "per-item noise scale"},
      {"corpus_seed", "7", "corpus and base/novel split seed"},
      {"image_size", "32", "image side in pixels"},
      // backbone
      {"patch_size", "8", "patch side in pixels"},
      {"layers", "8", "transformer depth L (both towers)"},
      {"vision_width", "64", "vision width d_v"},
      {"text_width", "48", "text width d_t"},
      {"embed_dim", "32", "shared embedding width d"},
      {"heads", "4", "attention heads"},
      {"max_text_length", "16", "text context length S"},
      {"vocab_size", "64", "text vocabulary size"},
      {"temperature", "0.01", "classification temperature"},
      {"backbone_seed", "3", "backbone initialization seed"},
      {"pretrain_steps", "200", "contrastive pretraining steps"},
      {"pretrain_lr", "0.0003", "pretraining learning rate"},
      {"pretrain_temperature", "0.07", "pretraining InfoNCE temperature"},
      // adapter and training
      {"variant", "full", "full|no_text_branch|no_vision_branch|no_shared_space|coupled_text_to_vision"},
      {"base_mixture", "true", "base readout uses the alpha mixture"},
      {"novel_class_only", "true", "novel readout uses the class feature only"},
      {"K", "5", "representation tokens"},
      {"J", "0", "insertion layer, 1-based; 0 means L/2"},
      {"dr", "512", "representation space width"},
      {"alpha", "0.7", "class-feature weight"},
      {"lambda", "0.5", "regularization weight"},
      {"reg_kind", "cosine", "regularizer: cosine|l1|mse"},
      {"shots", "16", "training examples per class"},
      {"epochs", "10", "training epochs"},
      {"batch_size", "4", "batch size"},
      {"lr", "0.001", "learning rate"},
      {"weight_decay", "0.01", "decoupled weight decay"},
      {"seed", "1", "run seed (few-shot sample, init, shuffling)"},
      {"template", std::string(kDefaultTemplate), "text template with a [CLASS] slot"},
      // experiments
      {"seeds", "1,2,3", "comma-separated seeds for ablate"},
      {"grid", "variants", "variants|alpha|lambda|J|K|dr"},
      {"grid_values", "", "comma-separated sweep values; empty uses the defaults"},
      {"gradcheck_coords", "6", "coordinates probed per tensor; 0 probes all"},
      {"gradcheck_batch", "2", "images in the gradcheck batch"},
      {"gradcheck_tolerance", "1e-4", "maximum allowed relative error"},
      // paths
      {"manifest", "corpus.mmrl", "corpus manifest", true},
      {"checkpoint", "backbone.ckpt", "backbone checkpoint", true},
      {"bundle", "adapter.bundle", "adapter bundle", true},
      {"loss_csv", "loss.csv", "training loss trace", true},
      {"results", "results.json", "EvalRecord JSON (a .csv mirror is written alongside)", true},
      {"report", "", "optional report output file", true},
      {"log", "run.log", "sidecar log with timestamps", true},
  };
  return f;
}

RunConfig::RunConfig() {
  for (const auto& f : fields()) values_[f.key] = f.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto out = std::stoull(v, &used);
      if (used == v.size()) return out;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an unsigned integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::uint64_t> RunConfig::get_u64_list(const std::string& key) const {
  std::vector<std::uint64_t> out;
  std::istringstream in(get(key));
  for (std::string tok; std::getline(in, tok, ',');) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size() || tok[0] == '-') throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' expects comma-separated unsigned integers");
    }
  }
  return out;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::apply_environment() {
  if (const char* seed = std::getenv("MMRL_SEED"); seed && *seed) {
    set("seed", seed);
    get_u64("seed");
  }
}

void RunConfig::resolve() { set("J", std::to_string(insert_layer())); }

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + get(f.key) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::string canonical;
  for (const auto& f : fields()) {
    if (!f.is_path) canonical += f.key + "=" + get(f.key) + "\n";
  }
  return sha256_hex(canonical).substr(0, 16);
}

BackboneConfig RunConfig::backbone() const {
  BackboneConfig b;
  b.image_size = get_int("image_size");
  b.patch_size = get_int("patch_size");
  b.layers = get_int("layers");
  b.vision_width = get_int("vision_width");
  b.text_width = get_int("text_width");
  b.embed_dim = get_int("embed_dim");
  b.heads = get_int("heads");
  b.max_text_length = get_int("max_text_length");
  b.vocab_size = get_int("vocab_size");
  b.temperature = get_double("temperature");
  b.validate();
  return b;
}

PretrainConfig RunConfig::pretrain() const {
  PretrainConfig p;
  p.steps = get_int("pretrain_steps");
  p.lr = get_double("pretrain_lr");
  p.temperature = get_double("pretrain_temperature");
  p.seed = get_u64("backbone_seed");
  p.text_template = get("template");
  if (p.steps < 0) throw ConfigError("pretrain_steps must be nonnegative");
  return p;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.epochs = get_int("epochs");
  t.batch_size = get_int("batch_size");
  t.lr = get_double("lr");
  t.weight_decay = get_double("weight_decay");
  t.seed = get_u64("seed");
  t.weights.alpha = get_double("alpha");
  t.weights.lambda = get_double("lambda");
  t.reg = reg_kind_from_string(get("reg_kind"));
  t.text_template = get("template");
  t.validate();
  return t;
}

VariantConfig RunConfig::variant() const {
  return VariantConfig{variant_mode_from_string(get("variant")), get_bool("base_mixture"),
                       get_bool("novel_class_only")};
}

int RunConfig::insert_layer() const {
  const int j = get_int("J");
  const int layers = get_int("layers");
  if (j == 0) return std::max(1, layers / 2);
  if (j < 1 || j > layers) throw ConfigError("J must lie in [1, L]");
  return j;
}

AblationCell RunConfig::cell() const {
  AblationCell c;
  c.name = variant().label();
  c.variant = variant();
  c.tokens = get_int("K");
  c.space_dim = get_int("dr");
  c.insert_layer = insert_layer();
  c.weights = train().weights;
  if (c.tokens < 0) throw ConfigError("K must be nonnegative");
  if (c.space_dim < 1) throw ConfigError("dr must be positive");
  return c;
}

}  // namespace mmrl
