#include "ematrace/probe.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace ematrace::probe {

WilsonInterval wilson_ci(std::size_t successes, std::size_t trials, double z) {
  if (trials == 0) throw std::invalid_argument("wilson_ci: trials must be positive");
  if (successes > trials) throw std::invalid_argument("wilson_ci: successes exceed trials");
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  WilsonInterval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
  // Closed-form endpoints at p = 0 and p = 1 are exact; clean up rounding.
  if (successes == 0) ci.low = 0.0;
  if (successes == trials) ci.high = 1.0;
  return ci;
}

template <typename Derived>
Matrix<double> RidgeProbe::scores(const Eigen::MatrixBase<Derived>& features) const {
  if (features.cols() != feature_dim()) {
    throw std::invalid_argument("probe: feature dim " + std::to_string(features.cols()) + " != probe dim " +
                                std::to_string(feature_dim()));
  }
  const Index d = feature_dim();
  Matrix<double> s = features.template cast<double>() * weights.leftCols(d).transpose();
  s.rowwise() += weights.col(d).transpose();
  return s;
}

template <typename Derived>
std::vector<int> RidgeProbe::predict(const Eigen::MatrixBase<Derived>& features) const {
  const Matrix<double> s = scores(features);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Index i = 0; i < s.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < s.cols(); ++c) {
      if (s(i, c) > s(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

template <typename Derived>
RidgeProbe fit_ridge(const Eigen::MatrixBase<Derived>& features, const std::vector<int>& labels, int n_classes,
                     double lambda) {
  const Index n = features.rows();
  const Index d = features.cols();
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("fit_ridge: label count mismatch");
  if (d < 1) throw std::invalid_argument("fit_ridge: features must have at least one column");
  if (!(lambda > 0.0)) throw std::invalid_argument("fit_ridge: lambda must be positive");
  if (!features.derived().allFinite()) throw std::invalid_argument("fit_ridge: non-finite features");

  Matrix<double> gram = Matrix<double>::Zero(d + 1, d + 1);
  Matrix<double> xty = Matrix<double>::Zero(d + 1, n_classes);
  constexpr Index kBlock = 2048;
  Matrix<double> block;
  for (Index r0 = 0; r0 < n; r0 += kBlock) {
    const Index rows = std::min(kBlock, n - r0);
    block.resize(rows, d + 1);
    block.leftCols(d) = features.middleRows(r0, rows).template cast<double>();
    block.col(d).setOnes();
    gram.selfadjointView<Eigen::Lower>().rankUpdate(block.transpose());
    for (Index i = 0; i < rows; ++i) {
      const int y = labels[static_cast<std::size_t>(r0 + i)];
      if (y < 0 || y >= n_classes) throw std::invalid_argument("fit_ridge: label out of range");
      xty.col(y) += block.row(i).transpose();
    }
  }
  gram.diagonal().array() += lambda;
  Eigen::LLT<Matrix<double>> llt(gram.selfadjointView<Eigen::Lower>());
  if (llt.info() != Eigen::Success) throw std::runtime_error("fit_ridge: Cholesky factorization failed");

  RidgeProbe probe;
  probe.lambda = lambda;
  probe.weights = llt.solve(xty).transpose();
  return probe;
}

Accuracy accuracy_of(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("accuracy: size mismatch");
  Accuracy a;
  a.total = truth.size();
  for (std::size_t i = 0; i < truth.size(); ++i) a.correct += predicted[i] == truth[i];
  if (a.total) {
    a.value = static_cast<double>(a.correct) / static_cast<double>(a.total);
    a.ci = wilson_ci(a.correct, a.total);
  }
  return a;
}

std::array<RoleStats, grammar::kNumRoles> per_role(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("per_role: size mismatch");
  std::array<RoleStats, grammar::kNumRoles> out{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& r = out.at(static_cast<std::size_t>(truth[i]));
    ++r.support;
    r.correct += predicted[i] == truth[i];
  }
  for (auto& r : out) {
    if (r.support) {
      r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.support);
      r.ci = wilson_ci(r.correct, r.support);
    }
  }
  return out;
}

template <typename DerivedW, typename DerivedT>
ProbeReport evaluate(const RidgeProbe& probe, const Eigen::MatrixBase<DerivedW>& within,
                     const std::vector<int>& within_labels, const Eigen::MatrixBase<DerivedT>& transfer,
                     const std::vector<int>& transfer_labels) {
  ProbeReport rep;
  rep.dim = probe.feature_dim();
  const auto pw = probe.predict(within);
  const auto pt = probe.predict(transfer);
  rep.within = accuracy_of(pw, within_labels);
  rep.transfer = accuracy_of(pt, transfer_labels);
  rep.within_roles = per_role(pw, within_labels);
  rep.transfer_roles = per_role(pt, transfer_labels);

  std::vector<int> dp, dt;
  for (std::size_t i = 0; i < within_labels.size(); ++i) {
    if (grammar::is_deep_role(static_cast<grammar::Role>(within_labels[i]))) {
      dp.push_back(pw[i]);
      dt.push_back(within_labels[i]);
    }
  }
  rep.deep = accuracy_of(dp, dt);
  return rep;
}

Matrix<float> projection_matrix(Index d_in, Index d_out, std::uint64_t seed) {
  if (d_out < 1 || d_in < 1) throw std::invalid_argument("random_projection: dimensions must be positive");
  std::mt19937_64 rng(seed);
  // Variance 1 / d_out keeps expected squared norms (and distances) unchanged.
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d_out)));
  Matrix<float> p(d_out, d_in);
  for (Index j = 0; j < d_in; ++j) {
    for (Index i = 0; i < d_out; ++i) p(i, j) = static_cast<float>(normal(rng));
  }
  return p;
}

Matrix<float> project(const Matrix<float>& features, const Matrix<float>& p) {
  if (p.cols() != features.cols()) throw std::invalid_argument("project: projection width mismatch");
  return features * p.transpose();
}

Matrix<float> random_projection(const Matrix<float>& features, Index d_out, std::uint64_t seed) {
  return project(features, projection_matrix(features.cols(), d_out, seed));
}

void write_role_csv(const std::filesystem::path& path, const std::vector<ProbeReport>& reports) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "representation,split,role,acc,low,high,support\n";
  out.precision(6);
  for (const auto& rep : reports) {
    for (int split = 0; split < 2; ++split) {
      const auto& roles = split == 0 ? rep.within_roles : rep.transfer_roles;
      for (int r = 0; r < grammar::kNumRoles; ++r) {
        const auto& s = roles[static_cast<std::size_t>(r)];
        out << rep.representation << ',' << (split == 0 ? "within" : "transfer") << ','
            << grammar::role_name(static_cast<grammar::Role>(r)) << ',' << s.accuracy << ',' << s.ci.low << ','
            << s.ci.high << ',' << s.support << '\n';
      }
    }
  }
}

// Instantiations for the feature types used in the workbench.
template RidgeProbe fit_ridge(const Eigen::MatrixBase<Matrix<float>>&, const std::vector<int>&, int, double);
template RidgeProbe fit_ridge(const Eigen::MatrixBase<Matrix<double>>&, const std::vector<int>&, int, double);
template Matrix<double> RidgeProbe::scores(const Eigen::MatrixBase<Matrix<float>>&) const;
template Matrix<double> RidgeProbe::scores(const Eigen::MatrixBase<Matrix<double>>&) const;
template std::vector<int> RidgeProbe::predict(const Eigen::MatrixBase<Matrix<float>>&) const;
template std::vector<int> RidgeProbe::predict(const Eigen::MatrixBase<Matrix<double>>&) const;
template ProbeReport evaluate(const RidgeProbe&, const Eigen::MatrixBase<Matrix<float>>&, const std::vector<int>&,
                              const Eigen::MatrixBase<Matrix<float>>&, const std::vector<int>&);
template ProbeReport evaluate(const RidgeProbe&, const Eigen::MatrixBase<Matrix<double>>&, const std::vector<int>&,
                              const Eigen::MatrixBase<Matrix<double>>&, const std::vector<int>&);

}  // namespace ematrace::probe
