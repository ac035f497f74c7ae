#pragma once

// Predictor heads that map the normalised slow trace (and, for linear
// attention, the block input) to a prediction of the block input.
//
//   Static            x_hat_t = W h_t
//   LinearAttention   x_hat_t = sum_{s<t} gamma^(t-1-s) (q_t . k_s) v_s,
//                     q, k from h, v from x
//   SoftmaxAttention  multi-head causal attention, q from h_t, keys and
//                     values from h_s (s < t), output projection W_o
//   ProjectedStatic   x_hat_t = W (P h_t), P a fixed random projection
//
// Sequences are time-major: row t is token t.

#include "ematrace/types.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace ematrace::spen {

enum class PredictorKind { Static, LinearAttention, SoftmaxAttention, ProjectedStatic };

std::string_view predictor_name(PredictorKind kind);
PredictorKind predictor_from_name(std::string_view name);  // throws std::invalid_argument

struct PredictorShape {
  PredictorKind kind = PredictorKind::Static;
  Index d = 0;
  int n_heads = 4;
  double gamma = 0.999;
  Index proj_dim = 32;
};

template <typename Scalar>
struct PredictorWeights {
  Matrix<Scalar> w_pred;  // Static: d x d, ProjectedStatic: d x proj_dim
  Matrix<Scalar> w_q, w_k, w_v, w_o;
  Matrix<Scalar> proj;  // proj_dim x d, never trained

  // f(name, matrix, trainable) over the matrices used by `kind`.
  template <typename F>
  void visit(PredictorKind kind, F&& f) {
    switch (kind) {
      case PredictorKind::Static:
        f("w_pred", w_pred, true);
        break;
      case PredictorKind::LinearAttention:
        f("w_q", w_q, true);
        f("w_k", w_k, true);
        f("w_v", w_v, true);
        break;
      case PredictorKind::SoftmaxAttention:
        f("w_q", w_q, true);
        f("w_k", w_k, true);
        f("w_v", w_v, true);
        f("w_o", w_o, true);
        break;
      case PredictorKind::ProjectedStatic:
        f("w_pred", w_pred, true);
        f("proj", proj, false);
        break;
    }
  }
};

template <typename Scalar>
struct PredictorCache {
  SeqMatrix<Scalar> q, k, v;
  SeqMatrix<Scalar> ctx;                  // softmax: concatenated head outputs
  std::vector<Matrix<Scalar>> attn;       // softmax: per-head T x T weights
  Matrix<Scalar> scores;                  // linear: decayed (Q K^T) * D
  SeqMatrix<Scalar> hp;                   // projected: h P^T
};

// Training-mode prediction for a whole sequence.
template <typename Scalar>
SeqMatrix<Scalar> predictor_forward(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                                    const SeqMatrix<Scalar>& hbar, const SeqMatrix<Scalar>& x,
                                    PredictorCache<Scalar>* cache);

// Accumulates parameter gradients into `grad` and input gradients into
// `d_hbar` and `d_x` (both must be pre-sized).
template <typename Scalar>
void predictor_backward(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                        const SeqMatrix<Scalar>& hbar, const SeqMatrix<Scalar>& x, const PredictorCache<Scalar>& cache,
                        const SeqMatrix<Scalar>& d_xhat, PredictorWeights<Scalar>& grad, SeqMatrix<Scalar>& d_hbar,
                        SeqMatrix<Scalar>& d_x);

// Recurrent (inference-mode) state.
template <typename Scalar>
struct PredictorState {
  Matrix<Scalar> fast;                    // linear: sum gamma^(t-1-s) v_s k_s^T
  std::vector<Vector<Scalar>> keys;       // softmax history
  std::vector<Vector<Scalar>> values;
  void reset(const PredictorShape& shape);
};

// Prediction for the current token, then absorbs (hbar, x) into the state.
template <typename Scalar>
Vector<Scalar> predictor_step(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                              PredictorState<Scalar>& state, const Vector<Scalar>& hbar, const Vector<Scalar>& x);

// T x T causal weights of one head (softmax arm); row t sums to 1 for t > 0.
template <typename Scalar>
const Matrix<Scalar>& attention_weights(const PredictorCache<Scalar>& cache, int head);

}  // namespace ematrace::spen
