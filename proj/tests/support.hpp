#pragma once

// Small fixtures shared by the unit tests: a toy backbone that keeps
// full-coordinate finite differences cheap, and a few matrix helpers.

#include <filesystem>
#include <random>
#include <string>

#include "mmrl/eval.hpp"

namespace mmrl::testing {

inline BackboneConfig toy_backbone() {
  BackboneConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.layers = 4;
  c.vision_width = 16;
  c.text_width = 12;
  c.embed_dim = 8;
  c.heads = 2;
  c.max_text_length = 16;
  c.vocab_size = 32;
  c.temperature = 0.05;
  return c;
}

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return gaussian(rows, cols, scale, rng);
}

inline Matrix random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(size, size * 3);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Toy corpus, encoder and adapter in one place.
struct ToyWorld {
  TaskCorpus corpus = generate_corpus(4, 24, 0.1, 5, 16);
  DualEncoder enc = [] {
    DualEncoder e = DualEncoder::init(toy_backbone(), 9);
    return e;
  }();
  SplitSpec split = base_novel_split(4, 5);

  AdapterState state(Index tokens = 2, Index space_dim = 6, int insert_layer = 2, VariantConfig v = {},
                     std::uint64_t seed = 1) const {
    return init_representation_state(adapter_dims(enc, tokens, space_dim, insert_layer), enc, seed, v);
  }

  TrainingSet training(int shots = 4, std::uint64_t seed = 1) const {
    return TrainingSet{&corpus, few_shot_sample(corpus, shots, split, seed), split.base};
  }
};

// Per-test scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("mmrl_test_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace mmrl::testing
