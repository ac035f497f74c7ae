#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

namespace ematrace {

using Index = Eigen::Index;

// Weight matrices use Eigen's default column-major layout.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Sequences are time-major (row = token) and stored row-major so that one
// token's vector is contiguous.
template <typename Scalar>
using SeqMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// FNV-1a over the raw bytes of a dense object. Used for frozen-weight and
// trace-identity checks.
template <typename Derived>
std::uint64_t hash_bytes(const Eigen::DenseBase<Derived>& m) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto eval = m.derived().eval();
  const auto* bytes = reinterpret_cast<const unsigned char*>(eval.data());
  const std::size_t n = static_cast<std::size_t>(eval.size()) * sizeof(typename Derived::Scalar);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// Progress sink for long-running experiments; empty means silent.
using Logger = std::function<void(const std::string&)>;

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
}

}  // namespace ematrace
