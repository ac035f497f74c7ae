#pragma once

// Versioned binary tensor container and raw matrix dumps.
//
// Container layout (all integers little-endian):
//   "EMTR" | u32 version | u32 len, kind | u32 len, header text (key=value
//   lines) | u32 n_tensors | per tensor: u32 len, name | u64 rows | u64 cols |
//   rows*cols f32, row-major.

#include "ematrace/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ematrace::io {

inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> data;  // row-major

  template <typename Derived>
  static NamedTensor from(std::string name, const Eigen::MatrixBase<Derived>& m) {
    NamedTensor t;
    t.name = std::move(name);
    t.rows = static_cast<std::uint64_t>(m.rows());
    t.cols = static_cast<std::uint64_t>(m.cols());
    t.data.resize(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) t.data[k++] = static_cast<float>(m(r, c));
    }
    return t;
  }

  template <typename Scalar>
  Matrix<Scalar> to_matrix() const {
    Matrix<Scalar> m(static_cast<Index>(rows), static_cast<Index>(cols));
    std::size_t k = 0;
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<Scalar>(data[k++]);
    }
    return m;
  }
};

struct TensorFile {
  std::string kind;
  std::uint32_t version = kFormatVersion;
  std::map<std::string, std::string> header;
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;  // throws if missing
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Rows x cols little-endian f32 with a key=value sidecar `<path>.meta`
// carrying at least rows, cols and whatever the caller adds.
void write_matrix_dump(const std::filesystem::path& path, const Matrix<float>& m,
                       std::map<std::string, std::string> meta);
Matrix<float> read_matrix_dump(const std::filesystem::path& path);

void write_kv(const std::filesystem::path& path, const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_kv(const std::filesystem::path& path);

std::string hex_encode(const std::string& bytes);
std::string hex_decode(const std::string& hex);

}  // namespace ematrace::io
