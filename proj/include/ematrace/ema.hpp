#pragma once

// EMA recurrence h_t = (1 - alpha) h_{t-1} + alpha x_t as a scan primitive.
//
// All sequence arguments are time-major (row t is token t). The chunked scan
// treats each chunk as an element (scale, offset) of the linear-recurrence
// monoid; carries are combined sequentially across chunks, so results do not
// depend on how many lanes processed the chunks.

#include "ematrace/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ematrace::ema {

struct DecaySpec {
  double alpha = 1.0;

  explicit DecaySpec(double a) : alpha(a) {
    if (!(a > 0.0 && a <= 1.0)) {
      throw std::invalid_argument("EMA decay alpha must lie in (0, 1], got " + std::to_string(a));
    }
  }

  // Tokens until a contribution halves; infinite memory is impossible, but
  // alpha = 1 means no memory at all.
  double half_life() const {
    if (alpha >= 1.0) return 0.0;
    return std::log(2.0) / -std::log1p(-alpha);
  }

  // Nominal integration window 1/alpha.
  double window() const { return 1.0 / alpha; }
};

inline void check_alpha(double alpha) { (void)DecaySpec(alpha); }

// Weight of the token `lag` steps back in h_t, with lag = 1 the current token:
// alpha (1 - alpha)^(lag - 1).
inline double token_coefficient(double alpha, int lag) {
  check_alpha(alpha);
  if (lag < 1) throw std::invalid_argument("lag must be >= 1");
  return alpha * std::pow(1.0 - alpha, lag - 1);
}

// Fraction of the state that survives `steps` updates: (1 - alpha)^steps.
inline double state_retention(double alpha, int steps) {
  check_alpha(alpha);
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  return std::pow(1.0 - alpha, steps);
}

// One recurrence step in place.
template <typename DerivedH, typename DerivedX>
void step(Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedX>& x,
          typename DerivedH::Scalar alpha) {
  using Scalar = typename DerivedH::Scalar;
  const Scalar keep = Scalar(1) - alpha;
  h = keep * h + alpha * x;
}

template <typename Scalar>
struct Carry {
  Scalar scale = Scalar(1);
  RowVector<Scalar> offset;
};

// Applying `first` then `second`: h -> s2 (s1 h + o1) + o2.
template <typename Scalar>
Carry<Scalar> combine(const Carry<Scalar>& first, const Carry<Scalar>& second) {
  Carry<Scalar> out;
  out.scale = second.scale * first.scale;
  out.offset = second.scale * first.offset + second.offset;
  return out;
}

template <typename Scalar>
RowVector<Scalar> apply(const Carry<Scalar>& c, const RowVector<Scalar>& h) {
  return c.scale * h + c.offset;
}

template <typename Derived>
SeqMatrix<typename Derived::Scalar> sequential(
    const Eigen::MatrixBase<Derived>& x, typename Derived::Scalar alpha,
    const RowVector<typename Derived::Scalar>& h0) {
  using Scalar = typename Derived::Scalar;
  check_alpha(static_cast<double>(alpha));
  if (h0.size() != x.cols()) throw std::invalid_argument("ema: h0 width does not match input");
  SeqMatrix<Scalar> out(x.rows(), x.cols());
  const Scalar keep = Scalar(1) - alpha;
  RowVector<Scalar> h = h0;
  for (Index t = 0; t < x.rows(); ++t) {
    h = keep * h + alpha * x.row(t);
    out.row(t) = h;
  }
  return out;
}

template <typename Derived>
SeqMatrix<typename Derived::Scalar> sequential(const Eigen::MatrixBase<Derived>& x,
                                               typename Derived::Scalar alpha) {
  return sequential(x, alpha, RowVector<typename Derived::Scalar>::Zero(x.cols()));
}

struct ScanConfig {
  Index chunk_len = 128;
  int lanes = 1;

  void validate() const {
    if (chunk_len < 1) throw std::invalid_argument("chunk_len must be >= 1");
    if (lanes < 1) throw std::invalid_argument("lanes must be >= 1");
  }
};

namespace detail {

template <typename Fn>
void parallel_for(Index n, int lanes, Fn&& fn) {
  if (lanes <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<Index>(lanes, n));
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(used));
  for (int w = 0; w < used; ++w) {
    workers.emplace_back([&, w] {
      for (Index i = w; i < n; i += used) fn(i);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace detail

// Three-phase chunked scan.
//   1. every chunk scans locally (chunk 0 from h0, the rest from zero) and
//      exposes its carry ((1 - alpha)^len, local_last);
//   2. carries combine left to right to give each chunk's entry state;
//   3. chunks c > 0 add (1 - alpha)^(j + 1) * entry to local output j.
// With a single chunk this is the sequential loop, bit for bit.
template <typename Derived>
SeqMatrix<typename Derived::Scalar> chunked(const Eigen::MatrixBase<Derived>& x,
                                            typename Derived::Scalar alpha,
                                            const RowVector<typename Derived::Scalar>& h0,
                                            const ScanConfig& config) {
  using Scalar = typename Derived::Scalar;
  check_alpha(static_cast<double>(alpha));
  config.validate();
  if (h0.size() != x.cols()) throw std::invalid_argument("ema: h0 width does not match input");

  const Index T = x.rows();
  const Index d = x.cols();
  SeqMatrix<Scalar> out(T, d);
  if (T == 0) return out;

  const Index L = config.chunk_len;
  const Index n_chunks = (T + L - 1) / L;
  const Scalar keep = Scalar(1) - alpha;

  std::vector<Scalar> chunk_scale(static_cast<std::size_t>(n_chunks));

  detail::parallel_for(n_chunks, config.lanes, [&](Index c) {
    const Index begin = c * L;
    const Index end = std::min(T, begin + L);
    RowVector<Scalar> h = (c == 0) ? h0 : RowVector<Scalar>::Zero(d);
    Scalar scale = Scalar(1);
    for (Index t = begin; t < end; ++t) {
      h = keep * h + alpha * x.row(t);
      out.row(t) = h;
      scale *= keep;
    }
    chunk_scale[static_cast<std::size_t>(c)] = scale;
  });

  // Entry state of chunk c is the true state after chunk c - 1.
  std::vector<RowVector<Scalar>> entry(static_cast<std::size_t>(n_chunks));
  for (Index c = 1; c < n_chunks; ++c) {
    const Index last = std::min(T, c * L) - 1;
    if (c == 1) {
      entry[1] = out.row(last);
    } else {
      Carry<Scalar> prev{chunk_scale[static_cast<std::size_t>(c - 1)], out.row(last)};
      entry[static_cast<std::size_t>(c)] = apply(prev, entry[static_cast<std::size_t>(c - 1)]);
    }
  }

  detail::parallel_for(n_chunks - 1, config.lanes, [&](Index i) {
    const Index c = i + 1;
    const Index begin = c * L;
    const Index end = std::min(T, begin + L);
    Scalar decay = keep;
    const auto& e = entry[static_cast<std::size_t>(c)];
    for (Index t = begin; t < end; ++t) {
      out.row(t) += decay * e;
      decay *= keep;
    }
  });
  return out;
}

template <typename Derived>
SeqMatrix<typename Derived::Scalar> chunked(const Eigen::MatrixBase<Derived>& x,
                                            typename Derived::Scalar alpha,
                                            const ScanConfig& config) {
  return chunked(x, alpha, RowVector<typename Derived::Scalar>::Zero(x.cols()), config);
}

// Reverse-mode pass: given dL/dh_t for all t (direct contributions only),
// returns dL/dx_t. The adjoint recurrence is g_t = dh_t + (1 - alpha) g_{t+1}
// and dL/dx_t = alpha g_t.
template <typename Derived>
SeqMatrix<typename Derived::Scalar> adjoint(const Eigen::MatrixBase<Derived>& grad_h,
                                            typename Derived::Scalar alpha) {
  using Scalar = typename Derived::Scalar;
  check_alpha(static_cast<double>(alpha));
  const Index T = grad_h.rows();
  SeqMatrix<Scalar> grad_x(T, grad_h.cols());
  const Scalar keep = Scalar(1) - alpha;
  RowVector<Scalar> g = RowVector<Scalar>::Zero(grad_h.cols());
  for (Index t = T - 1; t >= 0; --t) {
    g = keep * g + grad_h.row(t);
    grad_x.row(t) = alpha * g;
  }
  return grad_x;
}

// ||h - mean|| / ||mean||.
template <typename DerivedH, typename DerivedM>
double steady_state_gap(const Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedM>& mean) {
  const double denom = static_cast<double>(mean.norm());
  if (!(denom > 0.0)) throw std::invalid_argument("steady_state_gap: mean has zero norm");
  return static_cast<double>((h - mean).norm()) / denom;
}

// Analytic gap for h_0 = 0 under a stationary stream: (1 - alpha)^t.
inline double steady_state_gap_analytic(double alpha, int t) { return state_retention(alpha, t); }

struct BenchReport {
  Index T = 0;
  Index d = 0;
  Index chunk_len = 0;
  int lanes = 1;
  int repeats = 1;
  double tok_per_s_seq = 0.0;
  double tok_per_s_chunked = 0.0;
  double speedup = 0.0;
  double max_abs_diff = 0.0;

  std::string to_json() const;
};

BenchReport bench_scan(Index T, Index d, Index chunk_len, int repeats, int lanes, std::uint64_t seed = 0);

}  // namespace ematrace::ema
