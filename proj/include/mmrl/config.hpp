#pragma once

// Flat key=value run configuration shared by every CLI subcommand.
//
// Resolution order: built-in defaults, then a config file, then the
// MMRL_SEED environment variable, then command-line flags. The config hash
// covers every field except output paths, so moving outputs around does not
// change the fingerprint stamped into them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmrl/eval.hpp"

namespace mmrl {

struct ConfigField {
  std::string key;
  std::string default_value;
  std::string help;
  bool is_path = false;
};

class RunConfig {
 public:
  RunConfig();

  static const std::vector<ConfigField>& fields();

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::uint64_t> get_u64_list(const std::string& key) const;

  // '#' starts a comment; blank lines are ignored; unknown keys are errors.
  void load_file(const std::filesystem::path& path);
  void apply_environment();
  // Replaces symbolic defaults (J=0) with the values they stand for.
  void resolve();

  // Every field, one "key=value" line each, in declaration order.
  std::string serialize() const;
  // First 16 hex digits of SHA-256 over the non-path fields.
  std::string hash() const;

  BackboneConfig backbone() const;
  PretrainConfig pretrain() const;
  TrainConfig train() const;
  VariantConfig variant() const;
  // K, d_r, J (0 resolves to L/2), loss weights and variant.
  AblationCell cell() const;
  int insert_layer() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mmrl
