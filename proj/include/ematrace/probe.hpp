#pragma once

// Linear ridge probes with one-vs-all one-hot targets, Wilson intervals and
// role-level reporting.

#include "ematrace/grammar.hpp"
#include "ematrace/types.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ematrace::probe {

struct WilsonInterval {
  double low = 0.0;
  double high = 0.0;
};

WilsonInterval wilson_ci(std::size_t successes, std::size_t trials, double z = 1.96);

struct RidgeProbe {
  Matrix<double> weights;  // n_classes x (d + 1); last column is the bias
  double lambda = 0.01;

  Index n_classes() const { return weights.rows(); }
  Index feature_dim() const { return weights.cols() - 1; }
  Index parameter_count() const { return weights.size(); }

  template <typename Derived>
  Matrix<double> scores(const Eigen::MatrixBase<Derived>& features) const;

  // argmax over class scores, ties to the lowest class index.
  template <typename Derived>
  std::vector<int> predict(const Eigen::MatrixBase<Derived>& features) const;
};

// W = Y^T X_aug (X_aug^T X_aug + lambda I)^{-1}, X_aug = [X | 1]. The Gram
// matrix is accumulated in double over row blocks, so float features of any
// height are fine.
template <typename Derived>
RidgeProbe fit_ridge(const Eigen::MatrixBase<Derived>& features, const std::vector<int>& labels,
                     int n_classes = grammar::kNumRoles, double lambda = 0.01);

struct RoleStats {
  std::size_t correct = 0;
  std::size_t support = 0;
  double accuracy = 0.0;
  WilsonInterval ci;
};

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value = 0.0;
  WilsonInterval ci;
};

struct ProbeReport {
  std::string representation;
  Index dim = 0;
  std::array<RoleStats, grammar::kNumRoles> within_roles{};
  std::array<RoleStats, grammar::kNumRoles> transfer_roles{};
  Accuracy within;
  Accuracy transfer;
  Accuracy deep;  // relative-clause roles of the within set
};

Accuracy accuracy_of(const std::vector<int>& predicted, const std::vector<int>& truth);

std::array<RoleStats, grammar::kNumRoles> per_role(const std::vector<int>& predicted, const std::vector<int>& truth);

template <typename DerivedW, typename DerivedT>
ProbeReport evaluate(const RidgeProbe& probe, const Eigen::MatrixBase<DerivedW>& within,
                     const std::vector<int>& within_labels, const Eigen::MatrixBase<DerivedT>& transfer,
                     const std::vector<int>& transfer_labels);

// features * P^T with P (d_out x d_in) drawn i.i.d. N(0, 1/d_out).
Matrix<float> projection_matrix(Index d_in, Index d_out, std::uint64_t seed);
Matrix<float> random_projection(const Matrix<float>& features, Index d_out, std::uint64_t seed);
Matrix<float> project(const Matrix<float>& features, const Matrix<float>& p);

// CSV with one row per role and split: split,role,acc,low,high,support.
void write_role_csv(const std::filesystem::path& path, const std::vector<ProbeReport>& reports);

}  // namespace ematrace::probe
