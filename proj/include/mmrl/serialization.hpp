#pragma once

// Binary tensor dumps ("MMT1") and the keyed container files built from them
// (backbone checkpoints, adapter bundles, corpus manifests).
//
// Tensor dump layout, all little-endian:
//   "MMT1" | u32 rank | u32 dims[rank] | f64 values[prod(dims)]
//
// Container layout:
//   "<MAGIC> <version>\n"
//   key=value lines (keys may repeat)
//   "payload_sha256=<hex>\n" "\n"
//   payload: per tensor u32 name length | name bytes | tensor dump

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmrl/types.hpp"

namespace mmrl {

struct TensorDump {
  std::vector<std::uint32_t> shape;
  std::vector<double> values;

  friend bool operator==(const TensorDump&, const TensorDump&) = default;
};

TensorDump dump_matrix(const Matrix& m);
Matrix to_matrix(const TensorDump& dump);

void write_tensor(std::ostream& os, const TensorDump& dump);
TensorDump read_tensor(std::istream& is);

std::string sha256_hex(std::string_view bytes);

// Incremental SHA-256 for hashing many tensors without concatenating them.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view bytes);
  void update(const Matrix& m);
  std::string hex();

 private:
  void* ctx_;
};

struct Container {
  std::string magic;
  int version = 1;
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, TensorDump>> tensors;

  // First value for key; throws FormatError when absent.
  const std::string& get(std::string_view key) const;
  std::vector<std::string> get_all(std::string_view key) const;
  const TensorDump& tensor(std::string_view name) const;
};

// Byte offset of every tensor record inside the payload, in order.
std::vector<std::uint64_t> payload_offsets(const Container& c);

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes, std::string_view magic, int version);

// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path, std::string_view magic, int version);

}  // namespace mmrl
