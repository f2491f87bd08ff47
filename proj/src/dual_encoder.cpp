#include "mmrl/dual_encoder.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mmrl/errors.hpp"
#include "mmrl/optimizer.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {
namespace {

constexpr const char* kCheckpointMagic = "MMRL-CHECKPOINT";
constexpr int kCheckpointVersion = 1;

// Template words understood by the tokenizer. Ids 3..15 are reserved for
// them; class tokens start at kFirstClassToken.
constexpr std::array<std::string_view, 13> kLexicon = {"a",    "photo", "of",     ".",    "the",
                                                       "an",   "image", "picture", "type", "kind",
                                                       "this", "is",    "itap"};

int lexicon_id(std::string_view word) {
  for (std::size_t i = 0; i < kLexicon.size(); ++i) {
    if (kLexicon[i] == word) return static_cast<int>(i) + 3;
  }
  throw ContractError("word '" + std::string(word) + "' is not in the template lexicon");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_named(std::vector<std::pair<std::string, const Tensor*>>& out, const std::string& prefix,
               const Linear& l) {
  out.emplace_back(prefix + ".weight", &l.weight);
  out.emplace_back(prefix + ".bias", &l.bias);
}

void add_named(std::vector<std::pair<std::string, const Tensor*>>& out, const std::string& prefix,
               const LayerNorm& l) {
  out.emplace_back(prefix + ".gain", &l.gain);
  out.emplace_back(prefix + ".shift", &l.shift);
}

void add_named(std::vector<std::pair<std::string, const Tensor*>>& out, const std::string& prefix,
               const TransformerLayer& l) {
  add_named(out, prefix + ".ln1", l.ln1);
  add_named(out, prefix + ".query", l.query);
  add_named(out, prefix + ".key", l.key);
  add_named(out, prefix + ".value", l.value);
  add_named(out, prefix + ".out", l.out);
  add_named(out, prefix + ".ln2", l.ln2);
  add_named(out, prefix + ".fc", l.fc);
  add_named(out, prefix + ".proj", l.proj);
}

}  // namespace

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (layers < 1) throw ConfigError("encoders need at least one layer");
  if (heads < 1 || vision_width % heads != 0 || text_width % heads != 0) {
    throw ConfigError("encoder widths must be divisible by the head count");
  }
  if (embed_dim < 1) throw ConfigError("embedding dimension must be positive");
  if (max_text_length < 3) throw ConfigError("text capacity must hold BOT, one token and EOT");
  if (vocab_size <= kFirstClassToken) throw ConfigError("vocabulary too small for class tokens");
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
}

Linear Linear::init(Index in, Index out, double stddev, Rng& rng) {
  return Linear{Tensor(gaussian(in, out, stddev, rng)), Tensor::zeros(1, out)};
}

Matrix Linear::apply(const Matrix& x) const {
  Matrix y = x * weight.value();
  y.rowwise() += bias.value().row(0);
  return y;
}

LayerNorm LayerNorm::init(Index width) {
  return LayerNorm{Tensor(Matrix::Ones(1, width)), Tensor::zeros(1, width)};
}

TransformerLayer TransformerLayer::init(Index width, int depth, Rng& rng) {
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(width));
  const double proj_std = attn_std / std::sqrt(2.0 * depth);
  const double fc_std = 1.0 / std::sqrt(2.0 * static_cast<double>(width));
  TransformerLayer l;
  l.ln1 = LayerNorm::init(width);
  l.query = Linear::init(width, width, attn_std, rng);
  l.key = Linear::init(width, width, attn_std, rng);
  l.value = Linear::init(width, width, attn_std, rng);
  l.out = Linear::init(width, width, proj_std, rng);
  l.ln2 = LayerNorm::init(width);
  l.fc = Linear::init(width, 4 * width, fc_std, rng);
  l.proj = Linear::init(4 * width, width, proj_std, rng);
  return l;
}

Var TransformerLayer::forward(Graph& g, Var x, const AttentionMask& mask, Index heads, int layer_number,
                              const ForwardProbe* probe) const {
  Var h = ln1.apply(g, x);
  Var q = query.apply(g, h);
  Var k = key.apply(g, h);
  Var v = value.apply(g, h);
  if (probe && probe->on_attention) {
    probe->on_attention(layer_number, ag::attention_probabilities(q.value(), k.value(), mask, heads), mask);
  }
  Var attn = out.apply(g, ag::masked_attention(q, k, v, mask, heads));
  Var mid = ag::add(x, attn);
  Var mlp = proj.apply(g, ag::gelu(fc.apply(g, ln2.apply(g, mid))));
  Var y = ag::add(mid, mlp);
  if (probe && probe->on_layer_output) probe->on_layer_output(layer_number, g.mutable_value(y));
  return y;
}

TokenSequence tokenize(std::string_view text_template, int class_token_id) {
  if (class_token_id < 3) {
    throw ContractError("class token id " + std::to_string(class_token_id) + " is reserved");
  }
  std::string spaced;
  for (char ch : text_template) {
    if (ch == '.') {
      spaced += " . ";
    } else {
      spaced += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  std::istringstream words(spaced);
  TokenSequence seq;
  seq.ids.push_back(kBotToken);
  int slots = 0;
  for (std::string w; words >> w;) {
    if (w == "[class]") {
      seq.ids.push_back(class_token_id);
      ++slots;
    } else {
      seq.ids.push_back(lexicon_id(w));
    }
  }
  if (slots != 1) throw ContractError("template must contain exactly one [CLASS] slot");
  seq.eot_index = static_cast<Index>(seq.ids.size());
  seq.ids.push_back(kEotToken);
  return seq;
}

DualEncoder DualEncoder::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DualEncoder enc;
  enc.cfg_ = cfg;
  enc.seed_ = seed;
  Rng rng(derive_seed(seed, 10));
  const Index dv = cfg.vision_width;
  const Index dt = cfg.text_width;
  const Index patch_dim = 3 * cfg.patch_size * cfg.patch_size;
  const double v_scale = 1.0 / std::sqrt(static_cast<double>(dv));

  auto& v = enc.vision_;
  v.patch_projection = Linear::init(patch_dim, dv, 1.0 / std::sqrt(static_cast<double>(patch_dim)), rng);
  v.class_token = Tensor(gaussian(1, dv, v_scale, rng));
  v.positional = Tensor(gaussian(cfg.patches() + 1, dv, v_scale, rng));
  for (int i = 0; i < cfg.layers; ++i) v.layers.push_back(TransformerLayer::init(dv, cfg.layers, rng));
  v.projection = Linear::init(dv, cfg.embed_dim, v_scale, rng);

  auto& t = enc.text_;
  t.token_embeddings = Tensor(gaussian(cfg.vocab_size, dt, 0.02, rng));
  t.positional = Tensor(gaussian(cfg.max_text_length, dt, 0.01, rng));
  for (int i = 0; i < cfg.layers; ++i) t.layers.push_back(TransformerLayer::init(dt, cfg.layers, rng));
  t.projection = Linear::init(dt, cfg.embed_dim, 1.0 / std::sqrt(static_cast<double>(dt)), rng);
  enc.freeze();
  return enc;
}

std::vector<std::pair<std::string, const Tensor*>> DualEncoder::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  add_named(out, "vision.patch_projection", vision_.patch_projection);
  out.emplace_back("vision.class_token", &vision_.class_token);
  out.emplace_back("vision.positional", &vision_.positional);
  for (std::size_t i = 0; i < vision_.layers.size(); ++i) {
    add_named(out, "vision.layer" + std::to_string(i + 1), vision_.layers[i]);
  }
  add_named(out, "vision.projection", vision_.projection);
  out.emplace_back("text.token_embeddings", &text_.token_embeddings);
  out.emplace_back("text.positional", &text_.positional);
  for (std::size_t i = 0; i < text_.layers.size(); ++i) {
    add_named(out, "text.layer" + std::to_string(i + 1), text_.layers[i]);
  }
  add_named(out, "text.projection", text_.projection);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> DualEncoder::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

void DualEncoder::set_trainable(bool on) {
  for (auto& [name, t] : named_tensors()) t->set_requires_grad(on);
  frozen_ = !on;
}

void DualEncoder::freeze() { set_trainable(false); }

std::string DualEncoder::content_hash() const {
  Sha256 h;
  for (const auto& [name, t] : named_tensors()) {
    h.update(name);
    h.update(t->value());
  }
  return h.hex();
}

void DualEncoder::save(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, std::string>>& extra_header) const {
  Container c;
  c.magic = kCheckpointMagic;
  c.version = kCheckpointVersion;
  c.header = {{"image_size", std::to_string(cfg_.image_size)},
              {"patch_size", std::to_string(cfg_.patch_size)},
              {"layers", std::to_string(cfg_.layers)},
              {"vision_width", std::to_string(cfg_.vision_width)},
              {"text_width", std::to_string(cfg_.text_width)},
              {"embed_dim", std::to_string(cfg_.embed_dim)},
              {"heads", std::to_string(cfg_.heads)},
              {"max_text_length", std::to_string(cfg_.max_text_length)},
              {"vocab_size", std::to_string(cfg_.vocab_size)},
              {"temperature", format_double(cfg_.temperature)},
              {"seed", std::to_string(seed_)}};
  for (const auto& kv : extra_header) c.header.push_back(kv);
  c.header.emplace_back("content_hash", content_hash());
  for (const auto& [name, t] : named_tensors()) c.tensors.emplace_back(name, dump_matrix(t->value()));
  save_container(path, c);
}

DualEncoder DualEncoder::load(const std::filesystem::path& path) {
  const Container c = load_container(path, kCheckpointMagic, kCheckpointVersion);
  BackboneConfig cfg;
  std::uint64_t seed = 0;
  try {
    cfg.image_size = std::stoi(c.get("image_size"));
    cfg.patch_size = std::stoi(c.get("patch_size"));
    cfg.layers = std::stoi(c.get("layers"));
    cfg.vision_width = std::stoi(c.get("vision_width"));
    cfg.text_width = std::stoi(c.get("text_width"));
    cfg.embed_dim = std::stoi(c.get("embed_dim"));
    cfg.heads = std::stoi(c.get("heads"));
    cfg.max_text_length = std::stoi(c.get("max_text_length"));
    cfg.vocab_size = std::stoi(c.get("vocab_size"));
    cfg.temperature = std::stod(c.get("temperature"));
    seed = std::stoull(c.get("seed"));
  } catch (const std::invalid_argument&) {
    throw FormatError("unparseable checkpoint header");
  }
  DualEncoder enc = DualEncoder::init(cfg, seed);
  for (auto& [name, t] : enc.named_tensors()) {
    Matrix m = to_matrix(c.tensor(name));
    if (m.rows() != t->rows() || m.cols() != t->cols()) {
      throw IntegrityError("tensor '" + name + "' has shape " + ag::shape_string(m) + ", expected " +
                           ag::shape_string(t->value()));
    }
    t->mutable_value() = std::move(m);
  }
  if (enc.content_hash() != c.get("content_hash")) throw IntegrityError("checkpoint content hash mismatch");
  enc.freeze();
  return enc;
}

Matrix patchify(const Matrix& image, int image_size, int patch_size) {
  if (image.rows() != image_size || image.cols() != 3 * image_size) {
    throw ShapeError("image is " + ag::shape_string(image) + ", expected " +
                     ag::shape_string(image_size, 3 * image_size) + " (H x W*3)");
  }
  if (patch_size <= 0 || image_size % patch_size != 0) {
    throw ShapeError("patch size " + std::to_string(patch_size) + " does not tile a " + std::to_string(image_size) +
                     "-pixel image");
  }
  const int per_side = image_size / patch_size;
  Matrix patches(per_side * per_side, 3 * patch_size * patch_size);
  for (int pr = 0; pr < per_side; ++pr) {
    for (int pc = 0; pc < per_side; ++pc) {
      const Index row = pr * per_side + pc;
      for (int r = 0; r < patch_size; ++r) {
        patches.row(row).segment(r * 3 * patch_size, 3 * patch_size) =
            image.row(pr * patch_size + r).segment(pc * 3 * patch_size, 3 * patch_size);
      }
    }
  }
  return patches;
}

Var patch_embed(Graph& g, const Matrix& image, const DualEncoder& enc) {
  const auto& cfg = enc.config();
  return enc.vision().patch_projection.apply(g, g.constant(patchify(image, cfg.image_size, cfg.patch_size)));
}

Var vision_embed(Graph& g, const Matrix& image, const DualEncoder& enc) {
  const Var patches = patch_embed(g, image, enc);
  const Var tokens = ag::concat_rows({g.leaf(enc.vision().class_token), patches});
  return ag::add(tokens, g.leaf(enc.vision().positional));
}

Var text_embed(Graph& g, const TokenSequence& tokens, const DualEncoder& enc) {
  const auto& cfg = enc.config();
  const Index n = static_cast<Index>(tokens.ids.size());
  if (n > cfg.max_text_length) {
    throw CapacityError("sequence of " + std::to_string(n) + " tokens exceeds capacity " +
                        std::to_string(cfg.max_text_length));
  }
  if (tokens.eot_index < 0 || tokens.eot_index >= n || tokens.ids[static_cast<std::size_t>(tokens.eot_index)] != kEotToken) {
    throw ContractError("token sequence has no EOT at its recorded index");
  }
  const Var embedded = ag::gather_rows(g.leaf(enc.text().token_embeddings), std::span<const Index>(tokens.ids));
  return ag::add(embedded, ag::slice_rows(g.leaf(enc.text().positional), 0, n));
}

VisionOutput vision_forward(Graph& g, const Matrix& image, const DualEncoder& enc, const ForwardProbe* probe) {
  const auto& cfg = enc.config();
  Var x = vision_embed(g, image, enc);
  const AttentionMask mask = AttentionMask::full(x.rows());
  for (int l = 0; l < cfg.layers; ++l) {
    x = enc.vision().layers[static_cast<std::size_t>(l)].forward(g, x, mask, cfg.heads, l + 1, probe);
  }
  return {ag::slice_rows(x, 0, 1), ag::slice_rows(x, 1, x.rows() - 1)};
}

Var text_forward(Graph& g, const TokenSequence& tokens, const DualEncoder& enc, const ForwardProbe* probe) {
  const auto& cfg = enc.config();
  Var x = text_embed(g, tokens, enc);
  const AttentionMask mask = AttentionMask::causal(x.rows());
  for (int l = 0; l < cfg.layers; ++l) {
    x = enc.text().layers[static_cast<std::size_t>(l)].forward(g, x, mask, cfg.heads, l + 1, probe);
  }
  return ag::slice_rows(x, tokens.eot_index, 1);
}

Var cosine_logits(Var features, Var classifiers, double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  return ag::scale(ag::matmul(ag::normalize_rows(features), ag::transpose(ag::normalize_rows(classifiers))),
                   1.0 / temperature);
}

Matrix zero_shot_classify(const Matrix& feature, const Matrix& classifiers, double temperature) {
  Graph g;
  return ag::softmax_rows(cosine_logits(g.constant(feature), g.constant(classifiers), temperature)).value();
}

Matrix encode_classifiers(std::span<const int> class_tokens, std::string_view text_template,
                          const DualEncoder& enc) {
  if (class_tokens.size() < 2) throw ContractError("classifier set needs at least 2 classes");
  Matrix w(static_cast<Index>(class_tokens.size()), enc.config().embed_dim);
  for (std::size_t c = 0; c < class_tokens.size(); ++c) {
    Graph g;
    const Var e = text_forward(g, tokenize(text_template, class_tokens[c]), enc);
    w.row(static_cast<Index>(c)) = enc.text().projection.apply(g, e).value().row(0);
  }
  return w;
}

Matrix image_feature(const Matrix& image, const DualEncoder& enc) {
  Graph g;
  const VisionOutput out = vision_forward(g, image, enc);
  return enc.vision().projection.apply(g, out.class_out).value();
}

std::vector<double> pretrain_surrogate(const TaskCorpus& corpus, DualEncoder& enc, const PretrainConfig& cfg) {
  const auto pool = corpus.indices(Split::pretrain);
  if (pool.empty() || corpus.num_classes < 2) throw DataError("pretraining corpus is empty");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(corpus.num_classes));
  for (auto i : pool) by_class[static_cast<std::size_t>(corpus.items[i].label)].push_back(i);
  for (const auto& v : by_class) {
    if (v.empty()) throw DataError("a class has no pretraining items");
  }

  enc.set_trainable(true);
  std::vector<ParamRef> params;
  for (auto& [name, t] : enc.named_tensors()) params.push_back({name, t, false});
  AdamW opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  Rng rng(derive_seed(cfg.seed, 20));
  std::vector<TokenSequence> texts;
  for (int token : corpus.class_tokens) texts.push_back(tokenize(cfg.text_template, token));

  std::vector<double> trace;
  const Index n = corpus.num_classes;
  for (int step = 0; step < cfg.steps; ++step) {
    Graph g;
    std::vector<Var> image_rows;
    std::vector<Var> text_rows;
    for (Index c = 0; c < n; ++c) {
      const auto& candidates = by_class[static_cast<std::size_t>(c)];
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      const Matrix& image = corpus.items[candidates[pick(rng)]].image;
      image_rows.push_back(enc.vision().projection.apply(g, vision_forward(g, image, enc).class_out));
      text_rows.push_back(enc.text().projection.apply(g, text_forward(g, texts[static_cast<std::size_t>(c)], enc)));
    }
    const Var logits = cosine_logits(ag::concat_rows(std::span<const Var>(image_rows)),
                                     ag::concat_rows(std::span<const Var>(text_rows)), cfg.temperature);
    const Var rows = ag::log_softmax_rows(logits);
    const Var cols = ag::log_softmax_rows(ag::transpose(logits));
    std::vector<Var> diag;
    for (Index c = 0; c < n; ++c) {
      diag.push_back(ag::element(rows, c, c));
      diag.push_back(ag::element(cols, c, c));
    }
    const Var loss = ag::scale(ag::sum_all(ag::concat_rows(std::span<const Var>(diag))), -0.5 / static_cast<double>(n));
    trace.push_back(loss.value()(0, 0));
    for (auto& p : params) p.tensor->zero_grad();
    g.backward(loss);
    opt.step(params);
  }
  for (auto& p : params) p.tensor->zero_grad();
  enc.freeze();
  return trace;
}

double zero_shot_accuracy(const TaskCorpus& corpus, std::span<const std::size_t> items,
                          std::span<const int> classes, const DualEncoder& enc, std::string_view text_template) {
  if (items.empty()) return 0.0;
  std::vector<int> tokens;
  for (int c : classes) tokens.push_back(corpus.class_tokens[static_cast<std::size_t>(c)]);
  const Matrix w = encode_classifiers(tokens, text_template, enc);
  int correct = 0;
  for (auto i : items) {
    const Matrix p = zero_shot_classify(image_feature(corpus.items[i].image, enc), w, enc.temperature());
    Index best = 0;
    p.row(0).maxCoeff(&best);
    correct += classes[static_cast<std::size_t>(best)] == corpus.items[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace mmrl
