#include "ematrace/predictor.hpp"

#include <cmath>
#include <stdexcept>

namespace ematrace::spen {

std::string_view predictor_name(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::Static:
      return "static";
    case PredictorKind::LinearAttention:
      return "linear_attention";
    case PredictorKind::SoftmaxAttention:
      return "softmax_attention";
    case PredictorKind::ProjectedStatic:
      return "projected_static";
  }
  return "unknown";
}

PredictorKind predictor_from_name(std::string_view name) {
  for (auto k : {PredictorKind::Static, PredictorKind::LinearAttention, PredictorKind::SoftmaxAttention,
                 PredictorKind::ProjectedStatic}) {
    if (predictor_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown predictor '" + std::string(name) +
                              "' (static, linear_attention, softmax_attention, projected_static)");
}

namespace {

// D[t, s] = gamma^(t-1-s) for s < t, else 0.
template <typename Scalar>
Matrix<Scalar> decay_mask(Index T, double gamma) {
  std::vector<double> pw(static_cast<std::size_t>(std::max<Index>(T, 1)));
  pw[0] = 1.0;
  for (std::size_t i = 1; i < pw.size(); ++i) pw[i] = pw[i - 1] * gamma;
  Matrix<Scalar> d = Matrix<Scalar>::Zero(T, T);
  for (Index t = 1; t < T; ++t) {
    for (Index s = 0; s < t; ++s) d(t, s) = static_cast<Scalar>(pw[static_cast<std::size_t>(t - 1 - s)]);
  }
  return d;
}

template <typename Scalar>
Index head_dim(const PredictorShape& shape) {
  if (shape.n_heads < 1 || shape.d % shape.n_heads != 0) {
    throw std::invalid_argument("softmax predictor: d must be divisible by n_heads");
  }
  return shape.d / shape.n_heads;
}

}  // namespace

template <typename Scalar>
SeqMatrix<Scalar> predictor_forward(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                                    const SeqMatrix<Scalar>& hbar, const SeqMatrix<Scalar>& x,
                                    PredictorCache<Scalar>* cache) {
  const Index T = hbar.rows();
  PredictorCache<Scalar> local;
  PredictorCache<Scalar>& c = cache ? *cache : local;
  switch (shape.kind) {
    case PredictorKind::Static:
      return hbar * w.w_pred.transpose();

    case PredictorKind::ProjectedStatic:
      c.hp = hbar * w.proj.transpose();
      return c.hp * w.w_pred.transpose();

    case PredictorKind::LinearAttention: {
      c.q = hbar * w.w_q.transpose();
      c.k = hbar * w.w_k.transpose();
      c.v = x * w.w_v.transpose();
      c.scores = (c.q * c.k.transpose()).cwiseProduct(decay_mask<Scalar>(T, shape.gamma));
      return c.scores * c.v;
    }

    case PredictorKind::SoftmaxAttention: {
      const Index dh = head_dim<Scalar>(shape);
      const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
      c.q = hbar * w.w_q.transpose();
      c.k = hbar * w.w_k.transpose();
      c.v = hbar * w.w_v.transpose();
      c.ctx.setZero(T, shape.d);
      c.attn.assign(static_cast<std::size_t>(shape.n_heads), Matrix<Scalar>::Zero(T, T));
      for (int h = 0; h < shape.n_heads; ++h) {
        auto& a = c.attn[static_cast<std::size_t>(h)];
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        for (Index t = 1; t < T; ++t) {
          RowVector<Scalar> s = (kh.topRows(t) * qh.row(t).transpose()).transpose() * inv_sqrt;
          const Scalar m = s.maxCoeff();
          s = (s.array() - m).exp();
          a.row(t).head(t) = s / s.sum();
        }
        c.ctx.middleCols(h * dh, dh) = a * c.v.middleCols(h * dh, dh);
      }
      return c.ctx * w.w_o.transpose();
    }
  }
  throw std::logic_error("unhandled predictor kind");
}

template <typename Scalar>
void predictor_backward(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                        const SeqMatrix<Scalar>& hbar, const SeqMatrix<Scalar>& x, const PredictorCache<Scalar>& c,
                        const SeqMatrix<Scalar>& d_xhat, PredictorWeights<Scalar>& grad, SeqMatrix<Scalar>& d_hbar,
                        SeqMatrix<Scalar>& d_x) {
  const Index T = hbar.rows();
  switch (shape.kind) {
    case PredictorKind::Static:
      grad.w_pred.noalias() += d_xhat.transpose() * hbar;
      d_hbar.noalias() += d_xhat * w.w_pred;
      return;

    case PredictorKind::ProjectedStatic:
      grad.w_pred.noalias() += d_xhat.transpose() * c.hp;
      d_hbar.noalias() += (d_xhat * w.w_pred) * w.proj;
      return;

    case PredictorKind::LinearAttention: {
      const Matrix<Scalar> d_scores = (d_xhat * c.v.transpose()).cwiseProduct(decay_mask<Scalar>(T, shape.gamma));
      const SeqMatrix<Scalar> dv = c.scores.transpose() * d_xhat;
      const SeqMatrix<Scalar> dq = d_scores * c.k;
      const SeqMatrix<Scalar> dk = d_scores.transpose() * c.q;
      grad.w_q.noalias() += dq.transpose() * hbar;
      grad.w_k.noalias() += dk.transpose() * hbar;
      grad.w_v.noalias() += dv.transpose() * x;
      d_hbar.noalias() += dq * w.w_q + dk * w.w_k;
      d_x.noalias() += dv * w.w_v;
      return;
    }

    case PredictorKind::SoftmaxAttention: {
      const Index dh = head_dim<Scalar>(shape);
      const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
      grad.w_o.noalias() += d_xhat.transpose() * c.ctx;
      const SeqMatrix<Scalar> d_ctx = d_xhat * w.w_o;
      SeqMatrix<Scalar> dq = SeqMatrix<Scalar>::Zero(T, shape.d);
      SeqMatrix<Scalar> dk = SeqMatrix<Scalar>::Zero(T, shape.d);
      SeqMatrix<Scalar> dv = SeqMatrix<Scalar>::Zero(T, shape.d);
      for (int h = 0; h < shape.n_heads; ++h) {
        const auto& a = c.attn[static_cast<std::size_t>(h)];
        const auto dctx_h = d_ctx.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh) = a.transpose() * dctx_h;
        const Matrix<Scalar> da = dctx_h * c.v.middleCols(h * dh, dh).transpose();
        // softmax backward row by row: ds = a * (da - <a, da>)
        Matrix<Scalar> ds = Matrix<Scalar>::Zero(T, T);
        for (Index t = 1; t < T; ++t) {
          const Scalar dot = a.row(t).head(t).dot(da.row(t).head(t));
          ds.row(t).head(t) = a.row(t).head(t).cwiseProduct((da.row(t).head(t).array() - dot).matrix());
        }
        ds *= inv_sqrt;
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
      }
      grad.w_q.noalias() += dq.transpose() * hbar;
      grad.w_k.noalias() += dk.transpose() * hbar;
      grad.w_v.noalias() += dv.transpose() * hbar;
      d_hbar.noalias() += dq * w.w_q + dk * w.w_k + dv * w.w_v;
      (void)d_x;
      return;
    }
  }
  throw std::logic_error("unhandled predictor kind");
}

template <typename Scalar>
void PredictorState<Scalar>::reset(const PredictorShape& shape) {
  keys.clear();
  values.clear();
  if (shape.kind == PredictorKind::LinearAttention) {
    fast = Matrix<Scalar>::Zero(shape.d, shape.d);
  } else {
    fast.resize(0, 0);
  }
}

template <typename Scalar>
Vector<Scalar> predictor_step(const PredictorShape& shape, const PredictorWeights<Scalar>& w,
                              PredictorState<Scalar>& state, const Vector<Scalar>& hbar, const Vector<Scalar>& x) {
  switch (shape.kind) {
    case PredictorKind::Static:
      return w.w_pred * hbar;

    case PredictorKind::ProjectedStatic:
      return w.w_pred * (w.proj * hbar);

    case PredictorKind::LinearAttention: {
      if (state.fast.rows() != shape.d) state.reset(shape);
      const Vector<Scalar> q = w.w_q * hbar;
      const Vector<Scalar> k = w.w_k * hbar;
      const Vector<Scalar> v = w.w_v * x;
      Vector<Scalar> out = state.fast * q;
      state.fast = static_cast<Scalar>(shape.gamma) * state.fast + v * k.transpose();
      return out;
    }

    case PredictorKind::SoftmaxAttention: {
      const Index dh = head_dim<Scalar>(shape);
      const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
      const Vector<Scalar> q = w.w_q * hbar;
      Vector<Scalar> ctx = Vector<Scalar>::Zero(shape.d);
      const Index n = static_cast<Index>(state.keys.size());
      if (n > 0) {
        for (int h = 0; h < shape.n_heads; ++h) {
          Vector<Scalar> s(n);
          for (Index j = 0; j < n; ++j) {
            s[j] = state.keys[static_cast<std::size_t>(j)].segment(h * dh, dh).dot(q.segment(h * dh, dh)) * inv_sqrt;
          }
          const Scalar m = s.maxCoeff();
          s = (s.array() - m).exp();
          s /= s.sum();
          for (Index j = 0; j < n; ++j) {
            ctx.segment(h * dh, dh) += s[j] * state.values[static_cast<std::size_t>(j)].segment(h * dh, dh);
          }
        }
      }
      state.keys.push_back(w.w_k * hbar);
      state.values.push_back(w.w_v * hbar);
      return w.w_o * ctx;
    }
  }
  throw std::logic_error("unhandled predictor kind");
}

template <typename Scalar>
const Matrix<Scalar>& attention_weights(const PredictorCache<Scalar>& cache, int head) {
  return cache.attn.at(static_cast<std::size_t>(head));
}

#define EMATRACE_PREDICTOR_INSTANTIATE(S)                                                                          \
  template SeqMatrix<S> predictor_forward<S>(const PredictorShape&, const PredictorWeights<S>&,                  \
                                             const SeqMatrix<S>&, const SeqMatrix<S>&, PredictorCache<S>*);       \
  template void predictor_backward<S>(const PredictorShape&, const PredictorWeights<S>&, const SeqMatrix<S>&,    \
                                      const SeqMatrix<S>&, const PredictorCache<S>&, const SeqMatrix<S>&,         \
                                      PredictorWeights<S>&, SeqMatrix<S>&, SeqMatrix<S>&);                        \
  template struct PredictorState<S>;                                                                             \
  template Vector<S> predictor_step<S>(const PredictorShape&, const PredictorWeights<S>&, PredictorState<S>&,     \
                                       const Vector<S>&, const Vector<S>&);                                       \
  template const Matrix<S>& attention_weights<S>(const PredictorCache<S>&, int);

EMATRACE_PREDICTOR_INSTANTIATE(float)
EMATRACE_PREDICTOR_INSTANTIATE(double)

#undef EMATRACE_PREDICTOR_INSTANTIATE

}  // namespace ematrace::spen
