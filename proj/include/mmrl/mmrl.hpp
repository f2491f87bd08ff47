#pragma once

// Shared learnable representation space R (K × d_r), mapped per layer into
// both encoders from layer J upward, plus the trainable projection P_v^r for
// the pooled representation-token output.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmrl/dual_encoder.hpp"
#include "mmrl/optimizer.hpp"

namespace mmrl {

enum class VariantMode {
  full,
  no_text_branch,          // tokens inserted into the vision tower only
  no_vision_branch,        // tokens inserted into the text tower only
  no_shared_space,         // independent per-layer token banks per modality
  coupled_text_to_vision,  // one text-side bank, vision tokens mapped from it
};

std::string to_string(VariantMode m);
VariantMode variant_mode_from_string(const std::string& s);

struct VariantConfig {
  VariantMode mode = VariantMode::full;
  bool base_uses_mixture = true;      // false: class-feature-only base readout
  bool novel_uses_class_only = true;  // false: mixture readout for novel classes

  // Short label such as "full", "full-ds1", "no_text_branch".
  std::string label() const;
};

enum class Modality { vision, text };

struct AdapterDims {
  Index tokens = 5;       // K
  Index space_dim = 512;  // d_r
  int insert_layer = 4;   // J, 1-based
  int layers = 8;         // L
  Index vision_width = 64;
  Index text_width = 48;
  Index embed_dim = 32;

  Index map_count() const { return layers - insert_layer + 1; }
};

struct RepresentationSpace {
  Tensor tokens;  // R: K × d_r
};

// F_i^v and F_i^t for i = J-1 .. L-1, stored at index i - (J-1).
struct MappingStack {
  std::vector<Linear> vision;
  std::vector<Linear> text;
};

struct ReprProjection {
  Linear projection;  // P_v^r: d_v → d
};

struct AdapterState {
  AdapterDims dims;
  VariantConfig variant;
  std::uint64_t seed = 0;

  RepresentationSpace space;
  MappingStack maps;
  ReprProjection repr;
  // no_shared_space: directly trainable per-layer tokens.
  std::vector<Tensor> vision_banks;
  std::vector<Tensor> text_banks;
  // coupled_text_to_vision: one K × d_t bank shared by every text layer.
  Tensor text_bank;

  bool inserts_vision() const;
  bool inserts_text() const;
  bool has_repr_features() const { return inserts_vision() && dims.tokens > 0; }

  // Deterministic order: R (or banks), vision maps, text maps, P_v^r.
  std::vector<ParamRef> trainable_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  void save(const std::filesystem::path& path,
            const std::vector<std::pair<std::string, std::string>>& extra_header = {}) const;
  static AdapterState load(const std::filesystem::path& path);
  // Header entries written by save(); loaders may read extras from it.
  static std::vector<std::pair<std::string, std::string>> load_header(const std::filesystem::path& path);
};

// R and F weights ~ N(0, 0.02²), F biases 0, P_v^r copied from P_v^c.
AdapterState init_representation_state(const AdapterDims& dims, const DualEncoder& enc, std::uint64_t seed,
                                       VariantConfig variant = {});

// Convenience: dims taken from the encoder, K/d_r/J supplied.
AdapterDims adapter_dims(const DualEncoder& enc, Index tokens, Index space_dim, int insert_layer);

// R_i^{modality} = F_i^{modality}(R) for map index i in [J-1, L-1], as a
// plain matrix (full/no_text/no_vision modes).
Matrix map_tokens(const AdapterState& state, int map_index, Modality modality);

// Graph-level tokens fed into layer map_index + 1.
Var representation_tokens(Graph& g, const AdapterState& state, int map_index, Modality modality);

struct MmrlVisionOutput {
  Var class_out;              // c_L, 1 × d_v
  std::optional<Var> repr_out;  // R_L^v, K × d_v, when vision tokens are inserted
};

MmrlVisionOutput vision_forward_mmrl(Graph& g, const Matrix& image, const DualEncoder& enc,
                                     const AdapterState& state, const ForwardProbe* probe = nullptr);

// Lower-triangular mask over [b, R^t × K, T, e] of length K + N+2.
AttentionMask extended_causal_mask(Index tokens, Index base_length);

// e_L with the text-side tokens inserted after BOT from layer J.
Var text_forward_mmrl(Graph& g, const TokenSequence& tokens, const DualEncoder& enc, const AdapterState& state,
                      const ForwardProbe* probe = nullptr);

struct ImageFeatures {
  Var class_feature;                 // f_c
  std::optional<Var> repr_feature;   // f_r
};

// f_c = P_v^c(c_L); f_r = P_v^r(mean of R_L^v) when requested.
ImageFeatures extract_image_features(Graph& g, const MmrlVisionOutput& out, const DualEncoder& enc,
                                     const AdapterState& state, bool want_repr = true);

// w = P_t(e_L).
Var extract_text_features(Graph& g, Var eot_out, const DualEncoder& enc);

// Per-class text features with the adapter's text tokens: C × d.
Var class_text_features(Graph& g, std::span<const int> class_tokens, std::string_view text_template,
                        const DualEncoder& enc, const AdapterState& state);

}  // namespace mmrl
