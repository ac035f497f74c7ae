#pragma once

// Four-level Hebbian column hierarchy.
//
// Per token: settle (3 sweeps of the three-pathway update with sparse top-k),
// then precision-gated Hebbian update of the feedback weights, then the fast
// and slow EMA traces, then append the L0 state to the SPA buffer.
// Feedforward and lateral weights never change after construction.

#include "ematrace/grammar.hpp"
#include "ematrace/types.hpp"

#include <array>
#include <deque>
#include <filesystem>
#include <vector>

namespace ematrace::spcn {

inline constexpr int kLevels = 4;

struct LevelConfig {
  Index dim = 0;
  Index k_active = 0;
  double alpha_fast = 0.0;
  double alpha_slow = 0.0;
};

struct SpcnConfig {
  Index input_dim = grammar::kVocabSize;
  std::array<Index, kLevels> dims{512, 256, 128, 64};
  // 0 selects the default of 5% of dim, at least 4.
  std::array<Index, kLevels> k_active{0, 0, 0, 0};
  std::array<double, kLevels> alpha_fast{0.5, 0.2, 0.1, 0.05};
  double slow_ratio = 0.15;

  int settle_steps = 3;
  double ff_gain = 1.0;
  double fb_gain = 0.5;
  double lat_gain = 0.3;

  double eta = 0.01;
  double weight_decay = 0.001;
  double pi_min = 0.1;
  double pi_max = 10.0;
  double precision_rho = 0.99;
  double precision_eps = 0.3;

  bool use_spa = true;
  Index spa_window = 8;
  Index spa_top_k = 4;
  // Retrieved states are scaled to unit norm before averaging. Unscaled
  // retrieval feeds the past states back with gain one and the settled
  // activations grow without bound within a sentence.
  bool spa_unit_norm = true;

  LevelConfig level(int l) const;
  void validate() const;  // throws std::invalid_argument
};

Index default_k_active(Index dim);

template <typename Scalar>
struct ColumnState {
  Vector<Scalar> x;
  Vector<Scalar> trace_fast;
  Vector<Scalar> trace_slow;
  Vector<Scalar> precision;
  Vector<Scalar> err_var;
};

template <typename Scalar>
struct LevelWeights {
  Matrix<Scalar> w_ff;   // dim x dim_below, frozen
  Matrix<Scalar> w_fb;   // dim x dim_above, learned (empty at the top level)
  Matrix<Scalar> w_lat;  // dim x dim, frozen
};

// Keeps the k largest strictly positive entries (ties: lowest index) and
// zeroes everything else.
template <typename Scalar>
Vector<Scalar> topk_positive(const Vector<Scalar>& v, Index k);

// Circular buffer of past settled L0 states, queried by cosine similarity.
template <typename Scalar>
class SpaBuffer {
 public:
  SpaBuffer(Index window = 8, Index top_k = 4, bool unit_norm = false)
      : window_(window), top_k_(top_k), unit_norm_(unit_norm) {}

  void push(const Vector<Scalar>& state);
  void clear() { ring_.clear(); }
  Index size() const { return static_cast<Index>(ring_.size()); }
  bool empty() const { return ring_.empty(); }
  const Vector<Scalar>& entry(Index i) const { return ring_.at(static_cast<std::size_t>(i)); }

  // Entry indices (oldest = 0) by descending cosine similarity, ties to the
  // lower index. An all-zero vector has similarity 0 to everything.
  std::vector<Index> rank(const Vector<Scalar>& query) const;

  // Mean of the top-k ranked entries (each scaled to unit norm when the
  // buffer was built with unit_norm); zero vector of length `dim` if empty.
  Vector<Scalar> context(const Vector<Scalar>& query, Index dim) const;

 private:
  Index window_;
  Index top_k_;
  bool unit_norm_;
  std::deque<Vector<Scalar>> ring_;
};

template <typename Scalar>
class Hierarchy {
 public:
  Hierarchy(const SpcnConfig& config, std::uint64_t seed);

  const SpcnConfig& config() const { return config_; }
  const ColumnState<Scalar>& state(int level) const { return states_.at(static_cast<std::size_t>(level)); }
  ColumnState<Scalar>& state(int level) { return states_.at(static_cast<std::size_t>(level)); }
  const LevelWeights<Scalar>& weights(int level) const { return weights_.at(static_cast<std::size_t>(level)); }
  LevelWeights<Scalar>& weights(int level) { return weights_.at(static_cast<std::size_t>(level)); }
  const SpaBuffer<Scalar>& spa() const { return spa_; }
  SpaBuffer<Scalar>& spa() { return spa_; }
  Index k_active(int level) const { return levels_[static_cast<std::size_t>(level)].k_active; }
  const LevelConfig& level_config(int level) const { return levels_.at(static_cast<std::size_t>(level)); }

  // Zero activations, traces and the SPA buffer. Precision, error variance
  // and feedback weights persist.
  void reset_sentence();

  // Settling for one input; `input` must be a one-hot vector of input_dim.
  void settle(const Vector<Scalar>& input);
  void settle_index(Index word);

  // Precision-gated Hebbian update of w_fb at `level` (< top level).
  void pghu_update(int level);
  void update_traces(int level);

  // settle -> pghu (when learning) -> traces -> SPA append.
  void step(Index word, bool learn);

  std::uint64_t frozen_hash() const;  // hash of all w_ff and w_lat

 private:
  Vector<Scalar> l0_prediction_error() const;

  SpcnConfig config_;
  std::array<LevelConfig, kLevels> levels_;
  std::array<LevelWeights<Scalar>, kLevels> weights_;
  std::array<ColumnState<Scalar>, kLevels> states_;
  SpaBuffer<Scalar> spa_;
};

// Per-token records for the probed levels, stored in float.
struct LevelRecords {
  Matrix<float> x_fwd, x_bwd;
  Matrix<float> fast_fwd, slow_fwd, fast_bwd, slow_bwd;
};

struct Representations {
  std::vector<LevelRecords> levels;  // levels 0 .. n_levels-1 that were recorded
  std::vector<int> labels;           // role index per token
  Index n_tokens() const { return static_cast<Index>(labels.size()); }

  Matrix<float> activation(int level = 0) const;  // x_fwd | x_bwd
  Matrix<float> traces(int level = 0) const;      // fast_fwd | slow_fwd | fast_bwd | slow_bwd
  Matrix<float> combined(int level = 0) const;    // activation | traces
  Matrix<float> forward_only(int level = 0) const;  // x_fwd | fast_fwd | slow_fwd
};

// Runs `fwd` left-to-right and `bwd` right-to-left over every sentence,
// resetting per sentence. When `learn` is set PGHU updates both hierarchies.
template <typename Scalar>
Representations process_corpus(Hierarchy<Scalar>& fwd, Hierarchy<Scalar>& bwd,
                               const std::vector<grammar::LabeledSentence>& sentences, bool learn,
                               int record_levels = 3);

// Training pass without recording.
template <typename Scalar>
void train_corpus(Hierarchy<Scalar>& fwd, Hierarchy<Scalar>& bwd,
                  const std::vector<grammar::LabeledSentence>& sentences);

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Hierarchy<Scalar>& fwd, const Hierarchy<Scalar>& bwd);

}  // namespace ematrace::spcn
