#pragma once

// Micro-scale trace language model.
//
// Each block, per token t with input x_t:
//   h^f, h^m, h^s <- EMA(x) at alpha_f, alpha_m, alpha_s
//   hbar  = h^s / ||h^s||            (0 when ||h^s|| < 1e-8)
//   x_hat = predictor(hbar, ...)
//   e     = x - x_hat
//   c     = x + W_f h^f + W_m h^m + W_s h^s + W_e e
//   z     = top-k(GELU(W_up LN(c)))
//   x'    = x + W_down z
// The output head is the token embedding (tied) unless the test hook
// `tie_embeddings = false` is set.
//
// Training mode runs the traces with the chunked scan over whole sequences;
// inference mode (InferenceSession) advances them one token at a time.

#include "ematrace/ema.hpp"
#include "ematrace/predictor.hpp"
#include "ematrace/types.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace ematrace::spen {

// Identity passes the gradient through top-k for every unit; Masked only
// through the selected units.
enum class SteMode { Identity, Masked };

struct SpenConfig {
  Index d_model = 128;
  Index d_ff = 512;
  int n_blocks = 2;
  Index k_active = 31;
  Index vocab_size = 0;
  Index seq_len = 256;
  double alpha_fast = 0.5;
  double alpha_mid = 0.1;
  double alpha_slow = 0.02;
  double lb_weight = 0.01;
  double ln_eps = 1e-5;
  PredictorKind predictor = PredictorKind::Static;
  int n_heads = 4;
  double gamma = 0.999;
  Index proj_dim = 32;
  SteMode ste = SteMode::Identity;
  bool tie_embeddings = true;
  double init_std = 0.02;
  Index chunk_len = 64;
  bool zero_traces = false;  // test hook: every trace reads as zero

  void validate() const;  // throws std::invalid_argument
  PredictorShape predictor_shape() const;
  std::map<std::string, std::string> to_header() const;
  static SpenConfig from_header(const std::map<std::string, std::string>& header);
};

template <typename Scalar>
struct BlockParams {
  Matrix<Scalar> w_f, w_m, w_s, w_e;  // d x d
  Matrix<Scalar> w_up;                // d_ff x d
  Matrix<Scalar> w_down;              // d x d_ff
  Matrix<Scalar> ln_gain, ln_bias;    // d x 1
  PredictorWeights<Scalar> pred;

  // f(name, matrix, trainable, decayed)
  template <typename F>
  void visit(PredictorKind kind, F&& f) {
    f("w_f", w_f, true, true);
    f("w_m", w_m, true, true);
    f("w_s", w_s, true, true);
    f("w_e", w_e, true, true);
    f("w_up", w_up, true, true);
    f("w_down", w_down, true, true);
    f("ln_gain", ln_gain, true, false);
    f("ln_bias", ln_bias, true, false);
    pred.visit(kind, [&](const char* name, Matrix<Scalar>& m, bool trainable) { f(name, m, trainable, true); });
  }
};

template <typename Scalar>
struct SpenParams {
  Matrix<Scalar> embedding;  // vocab x d
  Matrix<Scalar> head;       // vocab x d, only when untied
  std::vector<BlockParams<Scalar>> blocks;

  // f(name, matrix, trainable, decayed) over every tensor in a fixed order.
  template <typename F>
  void visit(const SpenConfig& config, F&& f) {
    f(std::string("embedding"), embedding, true, true);
    if (!config.tie_embeddings) f(std::string("head"), head, true, true);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      blocks[b].visit(config.predictor, [&](const char* name, Matrix<Scalar>& m, bool trainable, bool decayed) {
        f(p + name, m, trainable, decayed);
      });
    }
  }

  SpenParams zeros_like(const SpenConfig& config) const;
  void set_zero(const SpenConfig& config);
};

template <typename Scalar>
class SpenModel {
 public:
  SpenModel() = default;
  SpenModel(const SpenConfig& config, std::uint64_t seed);

  const SpenConfig& config() const { return config_; }
  SpenConfig& mutable_config() { return config_; }
  SpenParams<Scalar>& params() { return params_; }
  const SpenParams<Scalar>& params() const { return params_; }

  // The output projection: the embedding itself when tied.
  const Matrix<Scalar>& head() const { return config_.tie_embeddings ? params_.embedding : params_.head; }

  Index parameter_count() const;
  std::uint64_t hash() const;

  template <typename Other>
  SpenModel<Other> cast() const;

 private:
  SpenConfig config_;
  SpenParams<Scalar> params_;
};

// Elementwise helpers, exposed for tests.
template <typename Scalar>
Scalar gelu(Scalar u);
template <typename Scalar>
Scalar gelu_grad(Scalar u);

// Keeps the k largest entries of each row (ties to the lowest index).
// `mask` receives 1 at kept positions, 0 elsewhere.
template <typename Scalar>
SeqMatrix<Scalar> topk_rows(const SeqMatrix<Scalar>& z, Index k, SeqMatrix<Scalar>* mask = nullptr);

// d_ff * sum_i f_i p_i with f_i = (selections of unit i) / (T k) and p the
// token-mean softmax of `pre_acts`. Throws on an empty batch.
template <typename Scalar>
Scalar load_balance_loss(const SeqMatrix<Scalar>& pre_acts, const SeqMatrix<Scalar>& mask, Index k);

// Selection state captured from one forward pass. Replaying it keeps the
// top-k masks (and, in Identity mode, the offset g - z) fixed, so finite
// differences see the function the straight-through gradient belongs to.
template <typename Scalar>
struct FrozenSelection {
  std::vector<SeqMatrix<Scalar>> mask;
  std::vector<SeqMatrix<Scalar>> offset;
};

template <typename Scalar>
struct BlockCache {
  SeqMatrix<Scalar> x, hf, hm, hs, hbar;
  Vector<Scalar> hs_norm;
  SeqMatrix<Scalar> xhat, err, c, nrm;
  Vector<Scalar> inv_std;
  SeqMatrix<Scalar> ln, u, g, z, mask, p;
  RowVector<Scalar> f;
  Scalar lb = Scalar(0);
  PredictorCache<Scalar> pred;
};

template <typename Scalar>
struct ForwardPass {
  std::vector<int> inputs;
  std::vector<BlockCache<Scalar>> blocks;
  SeqMatrix<Scalar> x_out;
  SeqMatrix<Scalar> logits;  // T x vocab
};

struct LossParts {
  double ce = 0.0;
  double lb = 0.0;  // mean over blocks
  double total = 0.0;
};

template <typename Scalar>
ForwardPass<Scalar> forward_sequence(const SpenModel<Scalar>& model, const std::vector<int>& inputs,
                                     const FrozenSelection<Scalar>* frozen = nullptr);

template <typename Scalar>
FrozenSelection<Scalar> capture_selection(const ForwardPass<Scalar>& pass);

// Mean cross-entropy of logits row t against targets[t] plus the weighted
// load-balance term.
template <typename Scalar>
LossParts sequence_loss(const SpenModel<Scalar>& model, const ForwardPass<Scalar>& pass,
                        const std::vector<int>& targets);

// Accumulates scale * d(total loss)/d(params) into grad.
template <typename Scalar>
void backward_sequence(const SpenModel<Scalar>& model, const ForwardPass<Scalar>& pass,
                       const std::vector<int>& targets, Scalar scale, SpenParams<Scalar>& grad);

// Mean loss over sequences (each seq_len + 1 tokens: inputs then shifted
// targets); gradients of the mean go to `grad` when non-null.
template <typename Scalar>
LossParts batch_loss(const SpenModel<Scalar>& model, const std::vector<std::vector<int>>& batch,
                     SpenParams<Scalar>* grad, const std::vector<FrozenSelection<Scalar>>* frozen = nullptr);

// Hook for replacing the block predictor during inference (fast weights).
template <typename Scalar>
class PredictorAdapter {
 public:
  virtual ~PredictorAdapter() = default;
  virtual Vector<Scalar> predict(int block, const Vector<Scalar>& hbar) = 0;
  // Called after the block has consumed its prediction.
  virtual void observe(int block, const Vector<Scalar>& hbar, const Vector<Scalar>& x,
                       const Vector<Scalar>& xhat) = 0;
};

// Token-by-token evaluation with persistent traces.
template <typename Scalar>
class InferenceSession {
 public:
  explicit InferenceSession(const SpenModel<Scalar>& model, PredictorAdapter<Scalar>* adapter = nullptr);

  void reset();
  // Consumes one token and returns the next-token logits.
  Vector<Scalar> step(int token);

  const Vector<Scalar>& trace(int block, int which) const;  // which: 0 fast, 1 mid, 2 slow
  const Vector<Scalar>& last_hbar(int block) const { return hbar_.at(static_cast<std::size_t>(block)); }
  Index position() const { return position_; }

 private:
  const SpenModel<Scalar>* model_;
  PredictorAdapter<Scalar>* adapter_;
  std::vector<std::array<Vector<Scalar>, 3>> traces_;
  std::vector<Vector<Scalar>> hbar_;
  std::vector<PredictorState<Scalar>> pred_state_;
  Index position_ = 0;
};

// Per-token cross-entropy of stream[i + 1] given stream[0..i], inference mode.
template <typename Scalar>
std::vector<double> stream_token_ce(InferenceSession<Scalar>& session, const std::vector<int>& stream);

// exp(mean CE) over consecutive non-overlapping windows of predictions.
std::vector<double> windowed_ppl(const std::vector<double>& token_ce, Index window = 200);

// Windowed PPL of a fresh inference session over `stream`; throws when the
// stream holds fewer than window + 1 tokens.
template <typename Scalar>
std::vector<double> perplexity_stream(const SpenModel<Scalar>& model, const std::vector<int>& stream,
                                      Index window = 200, PredictorAdapter<Scalar>* adapter = nullptr);

void save_checkpoint(const std::filesystem::path& path, const SpenModel<float>& model,
                     const std::map<std::string, std::string>& extra = {});
SpenModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace ematrace::spen
