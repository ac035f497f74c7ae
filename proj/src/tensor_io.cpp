#include "ematrace/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ematrace::io {

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
  }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void check() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed");
  }

 private:
  void le(std::uint64_t v, int n) {
    char b[8];
    for (int i = 0; i < n; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, n);
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path.string());
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void read(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error("truncated tensor file");
  }

 private:
  std::uint64_t le(int n) {
    unsigned char b[8];
    read(reinterpret_cast<char*>(b), static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::ifstream in_;
};

std::string encode_header(const std::map<std::string, std::string>& kv) {
  std::string s;
  for (const auto& [k, v] : kv) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("header key/value may not contain '=' or newlines: " + k);
    }
    s += k + "=" + v + "\n";
  }
  return s;
}

std::map<std::string, std::string> decode_header(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const auto nl = s.find('\n', pos);
    const std::string line = s.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  return kv;
}

}  // namespace

const NamedTensor& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw std::runtime_error("tensor file has no tensor '" + name + "'");
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  Writer w(path);
  w.raw("EMTR", 4);
  w.u32(file.version);
  w.str(file.kind);
  w.str(encode_header(file.header));
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    if (t.data.size() != t.rows * t.cols) throw std::invalid_argument("tensor '" + t.name + "' has wrong size");
    w.str(t.name);
    w.u64(t.rows);
    w.u64(t.cols);
    for (float f : t.data) w.f32(f);
  }
  w.check();
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "EMTR", 4) != 0) throw std::runtime_error("not a tensor file: " + path.string());
  TensorFile file;
  file.version = r.u32();
  if (file.version != kFormatVersion) {
    throw std::runtime_error("unsupported tensor file version " + std::to_string(file.version));
  }
  file.kind = r.str();
  file.header = decode_header(r.str());
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.rows = r.u64();
    t.cols = r.u64();
    t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
    for (auto& f : t.data) f = r.f32();
    file.tensors.push_back(std::move(t));
  }
  return file;
}

void write_kv(const std::filesystem::path& path, const std::map<std::string, std::string>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << encode_header(kv);
}

std::map<std::string, std::string> read_kv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_header(s);
}

void write_matrix_dump(const std::filesystem::path& path, const Matrix<float>& m,
                       std::map<std::string, std::string> meta) {
  {
    Writer w(path);
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) w.f32(m(r, c));
    }
    w.check();
  }
  meta["rows"] = std::to_string(m.rows());
  meta["cols"] = std::to_string(m.cols());
  meta["dtype"] = "f32le";
  auto mp = path;
  mp += ".meta";
  write_kv(mp, meta);
}

Matrix<float> read_matrix_dump(const std::filesystem::path& path) {
  auto mp = path;
  mp += ".meta";
  const auto meta = read_kv(mp);
  const Index rows = std::stol(meta.at("rows"));
  const Index cols = std::stol(meta.at("cols"));
  Reader r(path);
  Matrix<float> m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = r.f32();
  }
  return m;
}

std::string hex_encode(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

std::string hex_decode(const std::string& hex) {
  if (hex.size() % 2) throw std::invalid_argument("odd-length hex string");
  auto val = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw std::invalid_argument("bad hex digit");
  };
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) out += static_cast<char>(val(hex[i]) * 16 + val(hex[i + 1]));
  return out;
}

}  // namespace ematrace::io
