#include <doctest.h>

#include <cmath>
#include <set>

#include "mmrl/errors.hpp"
#include "support.hpp"

using namespace mmrl;
using mmrl::testing::bitwise_equal;
using mmrl::testing::max_abs_diff;
using mmrl::testing::random_image;
using mmrl::testing::TempDir;
using mmrl::testing::ToyWorld;

namespace {

VariantConfig mode(VariantMode m) {
  VariantConfig v;
  v.mode = m;
  return v;
}

const std::vector<VariantMode> kModes{VariantMode::full, VariantMode::no_text_branch, VariantMode::no_vision_branch,
                                      VariantMode::no_shared_space, VariantMode::coupled_text_to_vision};

}  // namespace

TEST_SUITE("mmrl") {
  TEST_CASE("representation space shapes and init statistics") {
    const DualEncoder enc = DualEncoder::init(BackboneConfig{}, 3);
    const AdapterState s = init_representation_state(adapter_dims(enc, 5, 512, 4), enc, 1);
    CHECK(s.space.tokens.rows() == 5);
    CHECK(s.space.tokens.cols() == 512);
    CHECK(s.maps.vision.size() == 5);
    CHECK(s.maps.text.size() == 5);
    CHECK(s.maps.vision[0].weight.rows() == 512);
    CHECK(s.maps.vision[0].weight.cols() == 64);
    CHECK(s.maps.text[0].weight.cols() == 48);
    CHECK(s.maps.text[0].bias.value().isZero(0.0));

    const Matrix& r = s.space.tokens.value();
    const double mean = r.mean();
    const double std = std::sqrt((r.array() - mean).square().sum() / static_cast<double>(r.size() - 1));
    CHECK(std::abs(mean) < 0.002);
    CHECK(std >= 0.015);
    CHECK(std <= 0.025);
  }

  TEST_CASE("initialization is deterministic in the seed") {
    const ToyWorld w;
    const AdapterState a = w.state(2, 6, 2, {}, 5);
    const AdapterState b = w.state(2, 6, 2, {}, 5);
    const AdapterState c = w.state(2, 6, 2, {}, 6);
    const auto na = a.named_tensors();
    const auto nb = b.named_tensors();
    const auto nc = c.named_tensors();
    REQUIRE(na.size() == nb.size());
    bool any_differs = false;
    for (std::size_t i = 0; i < na.size(); ++i) {
      CHECK(na[i].first == nb[i].first);
      CHECK(bitwise_equal(na[i].second->value(), nb[i].second->value()));
      any_differs = any_differs || !bitwise_equal(na[i].second->value(), nc[i].second->value());
    }
    CHECK(any_differs);
  }

  TEST_CASE("P_v^r starts as a copy of the frozen projection") {
    const ToyWorld w;
    for (VariantMode m : kModes) {
      if (m == VariantMode::no_vision_branch) continue;
      const AdapterState s = w.state(2, 6, 2, mode(m));
      CHECK(bitwise_equal(s.repr.projection.weight.value(), w.enc.vision().projection.weight.value()));
      CHECK(bitwise_equal(s.repr.projection.bias.value(), w.enc.vision().projection.bias.value()));
    }
  }

  TEST_CASE("map_tokens is the affine image of R and checks its index") {
    const ToyWorld w;
    AdapterState s = w.state(3, 6, 2);
    for (int i = 1; i <= 3; ++i) {
      const Linear& f = s.maps.vision[static_cast<std::size_t>(i - 1)];
      Matrix expected = s.space.tokens.value() * f.weight.value();
      expected.rowwise() += f.bias.value().row(0);
      CHECK(max_abs_diff(map_tokens(s, i, Modality::vision), expected) < 1e-14);
      CHECK(map_tokens(s, i, Modality::text).cols() == 12);
    }
    CHECK_THROWS_AS(map_tokens(s, 0, Modality::vision), ContractError);
    CHECK_THROWS_AS(map_tokens(s, 4, Modality::text), ContractError);

    // Linear in R when the bias is zero.
    const Matrix r = s.space.tokens.value();
    const Matrix m1 = map_tokens(s, 2, Modality::text);
    s.space.tokens.mutable_value() = 2.0 * r;
    CHECK(max_abs_diff(map_tokens(s, 2, Modality::text), 2.0 * m1) < 1e-14);
  }

  TEST_CASE("dimension validation") {
    const ToyWorld w;
    CHECK_THROWS_AS(adapter_dims(w.enc, 2, 6, 5), ConfigError);
    CHECK_THROWS_AS(adapter_dims(w.enc, 2, 6, 0), ConfigError);
    CHECK_THROWS_AS(adapter_dims(w.enc, 2, 0, 2), ConfigError);
    CHECK_THROWS_AS(adapter_dims(w.enc, -1, 6, 2), ConfigError);
    CHECK(adapter_dims(w.enc, 2, 6, 4).map_count() == 1);
  }

  TEST_CASE("K = 0 reproduces the frozen encoders bit for bit") {
    const ToyWorld w;
    const AdapterState s = w.state(0, 6, 2);
    Graph g;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Matrix image = random_image(16, seed);
      CHECK(bitwise_equal(vision_forward_mmrl(g, image, w.enc, s).class_out.value(),
                          vision_forward(g, image, w.enc).class_out.value()));
    }
    for (int token : w.corpus.class_tokens) {
      const TokenSequence t = tokenize(kDefaultTemplate, token);
      CHECK(bitwise_equal(text_forward_mmrl(g, t, w.enc, s).value(), text_forward(g, t, w.enc).value()));
    }
  }

  TEST_CASE("vision sequence grows to 1 + K + M from layer J") {
    const ToyWorld w;
    for (int J : {1, 2, 4}) {
      const AdapterState s = w.state(3, 6, J);
      std::vector<Index> rows;
      ForwardProbe probe;
      probe.on_layer_output = [&](int, Matrix& out) { rows.push_back(out.rows()); };
      Graph g;
      const MmrlVisionOutput out = vision_forward_mmrl(g, random_image(16, 1), w.enc, s, &probe);
      REQUIRE(rows.size() == 4);
      for (int l = 1; l <= 4; ++l) CHECK(rows[static_cast<std::size_t>(l - 1)] == (l >= J ? 1 + 3 + 4 : 1 + 4));
      REQUIRE(out.repr_out.has_value());
      CHECK(out.repr_out->rows() == 3);
      CHECK(out.class_out.rows() == 1);
    }
  }

  TEST_CASE("text tokens sit after BOT under an extended causal mask") {
    const AttentionMask m = extended_causal_mask(3, 6);
    CHECK(m.size() == 9);
    CHECK(m.is_lower_triangular());
    // The EOT position (K + 5) sees BOT, all K tokens and the template.
    for (Index q = 0; q < 9; ++q) CHECK(m.allowed(8, q));
    CHECK_FALSE(m.allowed(1, 2));

    const ToyWorld w;
    const AdapterState s = w.state(3, 6, 2);
    const TokenSequence t = tokenize(kDefaultTemplate, w.corpus.class_tokens[0]);
    std::vector<Matrix> outputs;
    std::vector<AttentionMask> masks;
    ForwardProbe probe;
    probe.on_layer_output = [&](int, Matrix& out) { outputs.push_back(out); };
    probe.on_attention = [&](int, const std::vector<Matrix>&, const AttentionMask& mask) { masks.push_back(mask); };
    Graph g;
    const Matrix e = text_forward_mmrl(g, t, w.enc, s, &probe).value();
    const Index n = static_cast<Index>(t.ids.size());
    REQUIRE(outputs.size() == 4);
    CHECK(outputs[0].rows() == n);
    CHECK(outputs[1].rows() == n + 3);
    CHECK(masks[1] == extended_causal_mask(3, n));
    CHECK(bitwise_equal(e, outputs[3].row(t.eot_index + 3)));
  }

  TEST_CASE("text capacity accounts for inserted tokens") {
    const ToyWorld w;
    const TokenSequence t = tokenize(kDefaultTemplate, w.corpus.class_tokens[0]);
    const Index fits = 16 - static_cast<Index>(t.ids.size());
    Graph g;
    CHECK_NOTHROW(text_forward_mmrl(g, t, w.enc, w.state(fits, 6, 2)));
    CHECK_THROWS_AS(text_forward_mmrl(g, t, w.enc, w.state(fits + 1, 6, 2)), CapacityError);
  }

  TEST_CASE("representation feature contracts") {
    const ToyWorld w;
    const Matrix image = random_image(16, 3);
    Graph g;
    const AdapterState text_only = w.state(2, 6, 2, mode(VariantMode::no_vision_branch));
    const MmrlVisionOutput out = vision_forward_mmrl(g, image, w.enc, text_only);
    CHECK_FALSE(out.repr_out.has_value());
    CHECK_THROWS_AS(extract_image_features(g, out, w.enc, text_only, true), ContractError);
    CHECK_NOTHROW(extract_image_features(g, out, w.enc, text_only, false));

    // With K = 1 the mean is the single token output itself.
    const AdapterState one = w.state(1, 6, 2);
    const MmrlVisionOutput o1 = vision_forward_mmrl(g, image, w.enc, one);
    const ImageFeatures f = extract_image_features(g, o1, w.enc, one);
    REQUIRE(f.repr_feature.has_value());
    CHECK(bitwise_equal(f.repr_feature->value(), one.repr.projection.apply(o1.repr_out->value())));
  }

  TEST_CASE("perturbing P_v^r leaves f_c untouched") {
    const ToyWorld w;
    AdapterState s = w.state(2, 6, 2);
    const Matrix image = random_image(16, 4);
    Graph g;
    const ImageFeatures before = extract_image_features(g, vision_forward_mmrl(g, image, w.enc, s), w.enc, s);
    s.repr.projection.weight.mutable_value() += mmrl::testing::random_matrix(16, 8, 2, 0.5);
    const ImageFeatures after = extract_image_features(g, vision_forward_mmrl(g, image, w.enc, s), w.enc, s);
    CHECK(bitwise_equal(before.class_feature.value(), after.class_feature.value()));
    CHECK_FALSE(bitwise_equal(before.repr_feature->value(), after.repr_feature->value()));
  }

  TEST_CASE("trainable parameter count and backbone exclusion") {
    const ToyWorld w;
    for (auto [K, dr, J] : {std::tuple{2, 6, 2}, std::tuple{5, 32, 1}, std::tuple{1, 3, 4}}) {
      AdapterState s = w.state(K, dr, J);
      Index total = 0;
      for (const auto& p : s.trainable_parameters()) {
        total += p.tensor->size();
        CHECK(p.tensor->requires_grad());
      }
      const Index L = 4, dv = 16, dt = 12, d = 8;
      CHECK(total == K * dr + (L - J + 1) * ((dr + 1) * dv + (dr + 1) * dt) + (dv + 1) * d);
    }

    std::set<const Tensor*> backbone;
    for (const auto& [name, t] : w.enc.named_tensors()) {
      backbone.insert(t);
      CHECK_FALSE(t->requires_grad());
    }
    AdapterState s = w.state();
    for (const auto& p : s.trainable_parameters()) CHECK(backbone.count(p.tensor) == 0);
  }

  TEST_CASE("full-coordinate gradient check for every variant") {
    const ToyWorld w;
    const TrainingSet data = w.training(2);
    TrainConfig cfg;
    ag::GradCheckOptions opts;
    opts.epsilon = 1e-6;
    for (VariantMode m : kModes) {
      INFO("variant " << to_string(m));
      AdapterState s = w.state(2, 5, 2, mode(m));
      // Move off the symmetric init so every path carries gradient.
      Rng rng(11);
      for (auto& p : s.trainable_parameters()) {
        p.tensor->mutable_value() += gaussian(p.tensor->rows(), p.tensor->cols(), 0.05, rng);
      }
      const ag::GradCheckReport r = gradcheck_objective(data, w.enc, s, cfg, 2, opts);
      CHECK(r.coordinates > 0);
      CHECK(r.max_rel_error < 1e-6);
    }
  }

  TEST_CASE("adapter bundle round trip") {
    TempDir dir("adapter");
    const ToyWorld w;
    for (VariantMode m : kModes) {
      VariantConfig v = mode(m);
      v.base_uses_mixture = m != VariantMode::no_shared_space;
      const AdapterState s = w.state(2, 6, 3, v, 4);
      s.save(dir / "a.bin", {{"note", "x"}});
      const AdapterState back = AdapterState::load(dir / "a.bin");
      CHECK(back.variant.label() == v.label());
      CHECK(back.seed == 4);
      const auto a = s.named_tensors();
      const auto b = back.named_tensors();
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i].second->value(), b[i].second->value()));
    }
    CHECK_THROWS_AS(variant_mode_from_string("mystery"), ConfigError);
  }
}
