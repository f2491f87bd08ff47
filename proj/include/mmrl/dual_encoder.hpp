#pragma once

// Frozen two-tower surrogate: a patch-embedding vision transformer and a
// causal text transformer, each with a linear projection into a shared
// embedding space where images and class texts are compared by cosine.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmrl/synth_data.hpp"
#include "mmrl/types.hpp"

namespace mmrl {

inline constexpr int kPadToken = 0;
inline constexpr int kBotToken = 1;
inline constexpr int kEotToken = 2;

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 8;
  int layers = 8;
  int vision_width = 64;
  int text_width = 48;
  int embed_dim = 32;
  int heads = 4;
  int max_text_length = 16;
  int vocab_size = 64;
  double temperature = 0.01;

  int patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  void validate() const;
};

struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out

  static Linear init(Index in, Index out, double stddev, Rng& rng);
  Var apply(Graph& g, Var x) const { return ag::linear(x, g.leaf(weight), g.leaf(bias)); }
  Matrix apply(const Matrix& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor shift;

  static LayerNorm init(Index width);
  Var apply(Graph& g, Var x) const { return ag::layer_norm(x, g.leaf(gain), g.leaf(shift)); }
};

// Observation hooks used by tests. Layers are numbered 1..L.
struct ForwardProbe {
  // Called with each layer's output before any representation-slot
  // replacement; may overwrite the matrix in place (no-grad graphs only).
  std::function<void(int layer, Matrix& output)> on_layer_output;
  // Per-head attention weights with the mask in effect.
  std::function<void(int layer, const std::vector<Matrix>& weights, const AttentionMask& mask)> on_attention;
};

// Pre-norm residual block: x + attn(ln1(x)), then + mlp(ln2(x)).
struct TransformerLayer {
  LayerNorm ln1;
  Linear query, key, value, out;
  LayerNorm ln2;
  Linear fc, proj;

  static TransformerLayer init(Index width, int depth, Rng& rng);
  Var forward(Graph& g, Var x, const AttentionMask& mask, Index heads, int layer_number,
              const ForwardProbe* probe) const;
};

struct VisionBackbone {
  Linear patch_projection;   // (p·p·3) → d_v
  Tensor class_token;        // 1 × d_v
  Tensor positional;         // (M+1) × d_v
  std::vector<TransformerLayer> layers;
  Linear projection;         // P_v^c: d_v → d
};

struct TextBackbone {
  Tensor token_embeddings;   // vocab × d_t
  Tensor positional;         // S × d_t
  std::vector<TransformerLayer> layers;
  Linear projection;         // P_t: d_t → d
};

struct TokenSequence {
  std::vector<Index> ids;
  Index eot_index = 0;
};

inline constexpr std::string_view kDefaultTemplate = "a photo of a [CLASS] .";

// [BOT, template words with the slot replaced by the class token, EOT].
TokenSequence tokenize(std::string_view text_template, int class_token_id);

// Both towers plus the temperature; immutable once frozen.
class DualEncoder {
 public:
  static DualEncoder init(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  const VisionBackbone& vision() const { return vision_; }
  const TextBackbone& text() const { return text_; }
  double temperature() const { return cfg_.temperature; }
  std::uint64_t seed() const { return seed_; }

  // Name/tensor pairs in a fixed order, covering every backbone weight.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();

  void set_trainable(bool on);
  bool frozen() const { return frozen_; }
  void freeze();

  // SHA-256 over every backbone tensor, including both projections.
  std::string content_hash() const;

  void save(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& extra_header = {}) const;
  static DualEncoder load(const std::filesystem::path& path);

 private:
  BackboneConfig cfg_;
  VisionBackbone vision_;
  TextBackbone text_;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
};

// Raster-order patches, each flattened row-major (row, col, channel).
Matrix patchify(const Matrix& image, int image_size, int patch_size);

// E_0 for one image: M × d_v.
Var patch_embed(Graph& g, const Matrix& image, const DualEncoder& enc);

// [c_0 + pos_0, E_0 + pos_{1..M}].
Var vision_embed(Graph& g, const Matrix& image, const DualEncoder& enc);

// token embedding + positional embedding for every position.
Var text_embed(Graph& g, const TokenSequence& tokens, const DualEncoder& enc);

struct VisionOutput {
  Var class_out;  // c_L, 1 × d_v
  Var patch_out;  // E_L, M × d_v
};

VisionOutput vision_forward(Graph& g, const Matrix& image, const DualEncoder& enc,
                            const ForwardProbe* probe = nullptr);

// e_L, 1 × d_t.
Var text_forward(Graph& g, const TokenSequence& tokens, const DualEncoder& enc,
                 const ForwardProbe* probe = nullptr);

// n × C matrix of cos(f_i, w_c) / τ.
Var cosine_logits(Var features, Var classifiers, double temperature);

// softmax_c cos(f, w_c)/τ for a single feature row.
Matrix zero_shot_classify(const Matrix& feature, const Matrix& classifiers, double temperature);

// Token-free class text features, one row per class token.
Matrix encode_classifiers(std::span<const int> class_tokens, std::string_view text_template,
                          const DualEncoder& enc);

// f_0 for one image: P_v^c(c_L) of the token-free forward.
Matrix image_feature(const Matrix& image, const DualEncoder& enc);

struct PretrainConfig {
  int steps = 200;
  double lr = 3e-4;
  double temperature = 0.07;
  std::uint64_t seed = 0;
  std::string text_template = std::string(kDefaultTemplate);
};

// Symmetric InfoNCE over (image, class text) pairs from the pretrain split.
// Each step draws one pretrain image per class. Leaves the encoder frozen.
std::vector<double> pretrain_surrogate(const TaskCorpus& corpus, DualEncoder& enc, const PretrainConfig& cfg);

// Fraction of `items` whose zero-shot argmax over `classes` is the label.
double zero_shot_accuracy(const TaskCorpus& corpus, std::span<const std::size_t> items,
                          std::span<const int> classes, const DualEncoder& enc,
                          std::string_view text_template = kDefaultTemplate);

}  // namespace mmrl
