#include "mmrl/mmrl.hpp"

#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {
namespace {

constexpr const char* kAdapterMagic = "MMRL-ADAPTER";
constexpr int kAdapterVersion = 1;
constexpr double kInitStd = 0.02;

bool uses_shared_space(VariantMode m) {
  return m == VariantMode::full || m == VariantMode::no_text_branch || m == VariantMode::no_vision_branch;
}

void validate(const AdapterDims& d) {
  if (d.tokens < 0) throw ConfigError("token count K must be nonnegative");
  if (d.space_dim < 1) throw ConfigError("representation dimension d_r must be positive");
  if (d.insert_layer < 1 || d.insert_layer > d.layers) {
    throw ConfigError("insertion layer J=" + std::to_string(d.insert_layer) + " outside 1.." +
                      std::to_string(d.layers));
  }
}

// Zero-filled tensors of the right shapes for the variant.
AdapterState allocate(const AdapterDims& dims, const VariantConfig& variant, std::uint64_t seed) {
  validate(dims);
  AdapterState s;
  s.dims = dims;
  s.variant = variant;
  s.seed = seed;
  const Index maps = dims.map_count();
  const Index K = dims.tokens;
  auto zero_linear = [](Index in, Index out) { return Linear{Tensor::zeros(in, out), Tensor::zeros(1, out)}; };
  switch (variant.mode) {
    case VariantMode::full:
    case VariantMode::no_text_branch:
    case VariantMode::no_vision_branch:
      s.space.tokens = Tensor::zeros(K, dims.space_dim);
      for (Index i = 0; i < maps; ++i) {
        if (s.inserts_vision()) s.maps.vision.push_back(zero_linear(dims.space_dim, dims.vision_width));
        if (s.inserts_text()) s.maps.text.push_back(zero_linear(dims.space_dim, dims.text_width));
      }
      break;
    case VariantMode::no_shared_space:
      for (Index i = 0; i < maps; ++i) {
        s.vision_banks.push_back(Tensor::zeros(K, dims.vision_width));
        s.text_banks.push_back(Tensor::zeros(K, dims.text_width));
      }
      break;
    case VariantMode::coupled_text_to_vision:
      s.text_bank = Tensor::zeros(K, dims.text_width);
      for (Index i = 0; i < maps; ++i) s.maps.vision.push_back(zero_linear(dims.text_width, dims.vision_width));
      break;
  }
  s.repr.projection = zero_linear(dims.vision_width, dims.embed_dim);
  return s;
}

std::size_t map_slot(const AdapterState& s, int map_index) {
  const int first = s.dims.insert_layer - 1;
  if (map_index < first || map_index > s.dims.layers - 1) {
    throw ContractError("map index " + std::to_string(map_index) + " outside [" + std::to_string(first) + ", " +
                        std::to_string(s.dims.layers - 1) + "]");
  }
  return static_cast<std::size_t>(map_index - first);
}

// Replaces rows [1, 1+old_k) of x by `tokens` (old_k = 0 splices them in).
Var splice_after_first(Var x, Var tokens, Index old_k) {
  const Index rest = x.rows() - 1 - old_k;
  return ag::concat_rows({ag::slice_rows(x, 0, 1), tokens, ag::slice_rows(x, 1 + old_k, rest)});
}

std::string bool_string(bool b) { return b ? "1" : "0"; }

}  // namespace

std::string to_string(VariantMode m) {
  switch (m) {
    case VariantMode::full: return "full";
    case VariantMode::no_text_branch: return "no_text_branch";
    case VariantMode::no_vision_branch: return "no_vision_branch";
    case VariantMode::no_shared_space: return "no_shared_space";
    case VariantMode::coupled_text_to_vision: return "coupled_text_to_vision";
  }
  return "?";
}

VariantMode variant_mode_from_string(const std::string& s) {
  for (auto m : {VariantMode::full, VariantMode::no_text_branch, VariantMode::no_vision_branch,
                 VariantMode::no_shared_space, VariantMode::coupled_text_to_vision}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown variant mode '" + s + "'");
}

std::string VariantConfig::label() const {
  std::string out = to_string(mode);
  if (!base_uses_mixture) out += "-ds1";
  if (!novel_uses_class_only) out += "-ds2";
  return out;
}

bool AdapterState::inserts_vision() const { return variant.mode != VariantMode::no_vision_branch; }
bool AdapterState::inserts_text() const { return variant.mode != VariantMode::no_text_branch; }

std::vector<std::pair<std::string, const Tensor*>> AdapterState::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  const int first = dims.insert_layer - 1;
  auto add_linear = [&out](const std::string& prefix, const Linear& l) {
    out.emplace_back(prefix + ".weight", &l.weight);
    out.emplace_back(prefix + ".bias", &l.bias);
  };
  if (uses_shared_space(variant.mode)) out.emplace_back("R", &space.tokens);
  if (variant.mode == VariantMode::coupled_text_to_vision) out.emplace_back("text_bank", &text_bank);
  for (std::size_t i = 0; i < vision_banks.size(); ++i) {
    out.emplace_back("bank.vision." + std::to_string(first + static_cast<int>(i)), &vision_banks[i]);
  }
  for (std::size_t i = 0; i < text_banks.size(); ++i) {
    out.emplace_back("bank.text." + std::to_string(first + static_cast<int>(i)), &text_banks[i]);
  }
  for (std::size_t i = 0; i < maps.vision.size(); ++i) {
    add_linear("map.vision." + std::to_string(first + static_cast<int>(i)), maps.vision[i]);
  }
  for (std::size_t i = 0; i < maps.text.size(); ++i) {
    add_linear("map.text." + std::to_string(first + static_cast<int>(i)), maps.text[i]);
  }
  if (inserts_vision()) add_linear("repr_projection", repr.projection);
  return out;
}

std::vector<ParamRef> AdapterState::trainable_parameters() {
  std::vector<ParamRef> out;
  for (const auto& [name, t] : std::as_const(*this).named_tensors()) {
    // Token tensors are embeddings and are not weight-decayed.
    const bool is_token = name == "R" || name == "text_bank" || name.rfind("bank.", 0) == 0;
    out.push_back({name, const_cast<Tensor*>(t), !is_token});
  }
  return out;
}

AdapterState init_representation_state(const AdapterDims& dims, const DualEncoder& enc, std::uint64_t seed,
                                       VariantConfig variant) {
  AdapterState s = allocate(dims, variant, seed);
  Rng rng(derive_seed(seed, 30));
  for (auto& p : s.trainable_parameters()) {
    if (p.name.starts_with("repr_projection")) continue;
    if (p.name.ends_with(".bias")) continue;
    p.tensor->mutable_value() = gaussian(p.tensor->rows(), p.tensor->cols(), kInitStd, rng);
  }
  const Linear& pc = enc.vision().projection;
  if (pc.weight.rows() != dims.vision_width || pc.weight.cols() != dims.embed_dim) {
    throw ConfigError("adapter dims do not match the encoder projection");
  }
  s.repr.projection.weight.mutable_value() = pc.weight.value();
  s.repr.projection.bias.mutable_value() = pc.bias.value();
  for (auto& p : s.trainable_parameters()) p.tensor->set_requires_grad(true);
  return s;
}

AdapterDims adapter_dims(const DualEncoder& enc, Index tokens, Index space_dim, int insert_layer) {
  const auto& c = enc.config();
  AdapterDims d;
  d.tokens = tokens;
  d.space_dim = space_dim;
  d.insert_layer = insert_layer;
  d.layers = c.layers;
  d.vision_width = c.vision_width;
  d.text_width = c.text_width;
  d.embed_dim = c.embed_dim;
  validate(d);
  return d;
}

Matrix map_tokens(const AdapterState& state, int map_index, Modality modality) {
  if (!uses_shared_space(state.variant.mode)) {
    throw ContractError("map_tokens needs a shared representation space");
  }
  const std::size_t slot = map_slot(state, map_index);
  const auto& maps = modality == Modality::vision ? state.maps.vision : state.maps.text;
  if (slot >= maps.size()) throw ContractError("variant has no maps for this modality");
  return maps[slot].apply(state.space.tokens.value());
}

Var representation_tokens(Graph& g, const AdapterState& state, int map_index, Modality modality) {
  const std::size_t slot = map_slot(state, map_index);
  const bool vision = modality == Modality::vision;
  if (vision ? !state.inserts_vision() : !state.inserts_text()) {
    throw ContractError("variant " + to_string(state.variant.mode) + " inserts no " +
                        (vision ? "vision" : "text") + " tokens");
  }
  switch (state.variant.mode) {
    case VariantMode::no_shared_space:
      return g.leaf(vision ? state.vision_banks[slot] : state.text_banks[slot]);
    case VariantMode::coupled_text_to_vision:
      return vision ? state.maps.vision[slot].apply(g, g.leaf(state.text_bank)) : g.leaf(state.text_bank);
    default:
      return (vision ? state.maps.vision[slot] : state.maps.text[slot]).apply(g, g.leaf(state.space.tokens));
  }
}

MmrlVisionOutput vision_forward_mmrl(Graph& g, const Matrix& image, const DualEncoder& enc,
                                     const AdapterState& state, const ForwardProbe* probe) {
  const auto& cfg = enc.config();
  if (state.dims.layers != cfg.layers || state.dims.vision_width != cfg.vision_width) {
    throw ShapeError("adapter state does not match the vision encoder");
  }
  const bool insert = state.inserts_vision();
  const Index K = insert ? state.dims.tokens : 0;
  const int J = state.dims.insert_layer;
  Var x = vision_embed(g, image, enc);
  for (int l = 1; l <= cfg.layers; ++l) {
    if (insert && l >= J) {
      const Var tokens = representation_tokens(g, state, l - 1, Modality::vision);
      x = splice_after_first(x, tokens, l == J ? 0 : K);
    }
    x = enc.vision().layers[static_cast<std::size_t>(l - 1)].forward(g, x, AttentionMask::full(x.rows()), cfg.heads,
                                                                     l, probe);
  }
  MmrlVisionOutput out{ag::slice_rows(x, 0, 1), std::nullopt};
  if (insert) out.repr_out = ag::slice_rows(x, 1, K);
  return out;
}

AttentionMask extended_causal_mask(Index tokens, Index base_length) {
  if (tokens < 0) throw ContractError("token count must be nonnegative");
  return AttentionMask::causal(tokens + base_length);
}

Var text_forward_mmrl(Graph& g, const TokenSequence& tokens, const DualEncoder& enc, const AdapterState& state,
                      const ForwardProbe* probe) {
  const auto& cfg = enc.config();
  if (state.dims.layers != cfg.layers || state.dims.text_width != cfg.text_width) {
    throw ShapeError("adapter state does not match the text encoder");
  }
  const bool insert = state.inserts_text();
  const Index K = insert ? state.dims.tokens : 0;
  const Index n = static_cast<Index>(tokens.ids.size());
  if (n + K > cfg.max_text_length) {
    throw CapacityError(std::to_string(n) + " tokens plus " + std::to_string(K) +
                        " representation tokens exceed capacity " + std::to_string(cfg.max_text_length));
  }
  const int J = state.dims.insert_layer;
  Var x = text_embed(g, tokens, enc);
  AttentionMask mask = AttentionMask::causal(n);
  for (int l = 1; l <= cfg.layers; ++l) {
    if (insert && l >= J) {
      const Var rep = representation_tokens(g, state, l - 1, Modality::text);
      x = splice_after_first(x, rep, l == J ? 0 : K);
      if (l == J) mask = extended_causal_mask(K, n);
    }
    x = enc.text().layers[static_cast<std::size_t>(l - 1)].forward(g, x, mask, cfg.heads, l, probe);
  }
  return ag::slice_rows(x, tokens.eot_index + K, 1);
}

ImageFeatures extract_image_features(Graph& g, const MmrlVisionOutput& out, const DualEncoder& enc,
                                     const AdapterState& state, bool want_repr) {
  ImageFeatures f{enc.vision().projection.apply(g, out.class_out), std::nullopt};
  if (want_repr) {
    if (!out.repr_out || out.repr_out->rows() == 0) {
      throw ContractError("representation features need K >= 1 inserted vision tokens");
    }
    f.repr_feature = state.repr.projection.apply(g, ag::mean_rows(*out.repr_out));
  }
  return f;
}

Var extract_text_features(Graph& g, Var eot_out, const DualEncoder& enc) {
  return enc.text().projection.apply(g, eot_out);
}

Var class_text_features(Graph& g, std::span<const int> class_tokens, std::string_view text_template,
                        const DualEncoder& enc, const AdapterState& state) {
  std::vector<Var> rows;
  rows.reserve(class_tokens.size());
  for (int token : class_tokens) {
    rows.push_back(extract_text_features(g, text_forward_mmrl(g, tokenize(text_template, token), enc, state), enc));
  }
  return ag::concat_rows(std::span<const Var>(rows));
}

void AdapterState::save(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, std::string>>& extra_header) const {
  Container c;
  c.magic = kAdapterMagic;
  c.version = kAdapterVersion;
  c.header = {{"K", std::to_string(dims.tokens)},
              {"d_r", std::to_string(dims.space_dim)},
              {"J", std::to_string(dims.insert_layer)},
              {"L", std::to_string(dims.layers)},
              {"d_v", std::to_string(dims.vision_width)},
              {"d_t", std::to_string(dims.text_width)},
              {"d", std::to_string(dims.embed_dim)},
              {"mode", to_string(variant.mode)},
              {"base_uses_mixture", bool_string(variant.base_uses_mixture)},
              {"novel_uses_class_only", bool_string(variant.novel_uses_class_only)},
              {"seed", std::to_string(seed)}};
  for (const auto& kv : extra_header) c.header.push_back(kv);
  for (const auto& [name, t] : named_tensors()) c.tensors.emplace_back(name, dump_matrix(t->value()));
  save_container(path, c);
}

std::vector<std::pair<std::string, std::string>> AdapterState::load_header(const std::filesystem::path& path) {
  return load_container(path, kAdapterMagic, kAdapterVersion).header;
}

AdapterState AdapterState::load(const std::filesystem::path& path) {
  const Container c = load_container(path, kAdapterMagic, kAdapterVersion);
  AdapterDims d;
  VariantConfig v;
  std::uint64_t seed = 0;
  try {
    d.tokens = std::stol(c.get("K"));
    d.space_dim = std::stol(c.get("d_r"));
    d.insert_layer = std::stoi(c.get("J"));
    d.layers = std::stoi(c.get("L"));
    d.vision_width = std::stol(c.get("d_v"));
    d.text_width = std::stol(c.get("d_t"));
    d.embed_dim = std::stol(c.get("d"));
    v.mode = variant_mode_from_string(c.get("mode"));
    v.base_uses_mixture = c.get("base_uses_mixture") == "1";
    v.novel_uses_class_only = c.get("novel_uses_class_only") == "1";
    seed = std::stoull(c.get("seed"));
  } catch (const std::invalid_argument&) {
    throw FormatError("unparseable adapter header");
  }
  AdapterState s = allocate(d, v, seed);
  for (auto& p : s.trainable_parameters()) {
    Matrix m = to_matrix(c.tensor(p.name));
    if (m.rows() != p.tensor->rows() || m.cols() != p.tensor->cols()) {
      throw IntegrityError("adapter tensor '" + p.name + "' has the wrong shape");
    }
    p.tensor->mutable_value() = std::move(m);
    p.tensor->set_requires_grad(true);
  }
  return s;
}

}  // namespace mmrl
