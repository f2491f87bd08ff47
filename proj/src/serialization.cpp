#include "mmrl/serialization.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mmrl/errors.hpp"

namespace mmrl {
namespace {

constexpr char kTensorMagic[4] = {'M', 'M', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

void read_exact(std::istream& is, char* out, std::size_t n) {
  is.read(out, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw IntegrityError("truncated tensor data");
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

TensorDump dump_matrix(const Matrix& m) {
  TensorDump d;
  d.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  d.values.assign(m.data(), m.data() + m.size());
  return d;
}

Matrix to_matrix(const TensorDump& dump) {
  Index rows = 1;
  Index cols = 1;
  if (dump.shape.size() == 2) {
    rows = dump.shape[0];
    cols = dump.shape[1];
  } else if (dump.shape.size() == 1) {
    cols = dump.shape[0];
  } else {
    throw ShapeError("expected a rank-1 or rank-2 tensor, got rank " + std::to_string(dump.shape.size()));
  }
  if (static_cast<std::size_t>(rows * cols) != dump.values.size()) {
    throw IntegrityError("tensor value count does not match its shape");
  }
  Matrix m(rows, cols);
  std::memcpy(m.data(), dump.values.data(), dump.values.size() * sizeof(double));
  return m;
}

void write_tensor(std::ostream& os, const TensorDump& dump) {
  std::size_t count = 1;
  for (auto d : dump.shape) count *= d;
  if (count != dump.values.size()) throw ShapeError("tensor dump value count does not match shape");
  os.write(kTensorMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(dump.shape.size()));
  for (auto d : dump.shape) put_u32(os, d);
  for (double v : dump.values) put_f64(os, v);
}

TensorDump read_tensor(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw IntegrityError("bad tensor magic");
  TensorDump d;
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw IntegrityError("implausible tensor rank " + std::to_string(rank));
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    d.shape.push_back(get_u32(is));
    count *= d.shape.back();
  }
  if (count > (std::size_t{1} << 32)) throw IntegrityError("implausible tensor size");
  d.values.resize(count);
  for (auto& v : d.values) v = get_f64(is);
  return d;
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(std::string_view bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
}

void Sha256::update(const Matrix& m) {
  std::ostringstream os;
  write_tensor(os, dump_matrix(m));
  update(os.str());
}

std::string Sha256::hex() {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

const std::string& Container::get(std::string_view key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  throw FormatError("missing header key '" + std::string(key) + "'");
}

std::vector<std::string> Container::get_all(std::string_view key) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : header) {
    if (k == key) out.push_back(v);
  }
  return out;
}

const TensorDump& Container::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("missing tensor '" + std::string(name) + "'");
}

namespace {

std::string encode_payload(const Container& c, std::vector<std::uint64_t>* offsets) {
  std::ostringstream os;
  for (const auto& [name, t] : c.tensors) {
    if (offsets) offsets->push_back(static_cast<std::uint64_t>(os.tellp()));
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  return os.str();
}

}  // namespace

std::vector<std::uint64_t> payload_offsets(const Container& c) {
  std::vector<std::uint64_t> offsets;
  encode_payload(c, &offsets);
  return offsets;
}

std::string encode_container(const Container& c) {
  const std::string payload = encode_payload(c, nullptr);
  std::ostringstream os;
  os << c.magic << ' ' << c.version << '\n';
  for (const auto& [k, v] : c.header) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw FormatError("header entry '" + k + "' is not representable");
    }
    os << k << '=' << v << '\n';
  }
  os << "tensors=" << c.tensors.size() << '\n';
  os << "payload_sha256=" << sha256_hex(payload) << "\n\n";
  os << payload;
  return os.str();
}

Container decode_container(std::string_view bytes, std::string_view magic, int version) {
  const auto first_nl = bytes.find('\n');
  if (first_nl == std::string_view::npos) throw IntegrityError("missing container preamble");
  const std::string_view first = bytes.substr(0, first_nl);
  const auto space = first.find(' ');
  if (space == std::string_view::npos || first.substr(0, space) != magic) {
    throw IntegrityError("bad magic, expected '" + std::string(magic) + "'");
  }
  int file_version = 0;
  try {
    file_version = std::stoi(std::string(first.substr(space + 1)));
  } catch (const std::exception&) {
    throw IntegrityError("unreadable version field");
  }
  if (file_version != version) {
    throw FormatError("version " + std::to_string(file_version) + " is not supported (expected " +
                      std::to_string(version) + ")");
  }

  Container c;
  c.magic = std::string(magic);
  c.version = file_version;
  std::size_t pos = first_nl + 1;
  std::size_t declared = 0;
  std::string digest;
  for (;;) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw IntegrityError("truncated header");
    const std::string_view line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw IntegrityError("malformed header line");
    std::string key(line.substr(0, eq));
    std::string value(line.substr(eq + 1));
    if (key == "tensors") {
      declared = std::stoull(value);
    } else if (key == "payload_sha256") {
      digest = value;
    } else {
      c.header.emplace_back(std::move(key), std::move(value));
    }
  }
  const std::string_view payload = bytes.substr(pos);
  if (sha256_hex(payload) != digest) throw IntegrityError("payload hash mismatch (truncated or corrupted)");

  std::istringstream is{std::string(payload)};
  for (std::size_t i = 0; i < declared; ++i) {
    const std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    read_exact(is, name.data(), len);
    c.tensors.emplace_back(std::move(name), read_tensor(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IntegrityError("trailing bytes after payload");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void save_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container load_container(const std::filesystem::path& path, std::string_view magic, int version) {
  return decode_container(read_file(path), magic, version);
}

}  // namespace mmrl
