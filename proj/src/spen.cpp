#include "ematrace/spen.hpp"

#include "ematrace/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace ematrace::spen {

namespace {

constexpr double kNormGuard = 1e-8;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename Scalar>
void layer_norm_rows(const SeqMatrix<Scalar>& c, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias, double eps,
                     SeqMatrix<Scalar>& nrm, Vector<Scalar>& inv_std, SeqMatrix<Scalar>& out) {
  const Index T = c.rows();
  const Index d = c.cols();
  nrm.resize(T, d);
  out.resize(T, d);
  inv_std.resize(T);
  for (Index t = 0; t < T; ++t) {
    const Scalar mu = c.row(t).mean();
    const RowVector<Scalar> centered = c.row(t).array() - mu;
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(d);
    inv_std[t] = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    nrm.row(t) = centered * inv_std[t];
    out.row(t) = nrm.row(t).cwiseProduct(gain.col(0).transpose()) + bias.col(0).transpose();
  }
}

template <typename Scalar>
Vector<Scalar> layer_norm(const Vector<Scalar>& c, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias,
                          double eps) {
  const Scalar mu = c.mean();
  const Vector<Scalar> centered = c.array() - mu;
  const Scalar var = centered.squaredNorm() / static_cast<Scalar>(c.size());
  const Scalar inv = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
  return (centered * inv).cwiseProduct(gain.col(0)) + bias.col(0);
}

template <typename Scalar>
std::vector<Index> topk_indices(const Scalar* v, Index n, Index k) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  auto by_value = [&](Index a, Index b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), by_value);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

template <typename Scalar>
void require_finite(const SeqMatrix<Scalar>& m, const char* what) {
  if (!m.allFinite()) throw std::domain_error(std::string("non-finite values in ") + what);
}

}  // namespace

void SpenConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("spen config: " + m); };
  if (d_model < 1 || d_ff < 1 || n_blocks < 1 || seq_len < 1) fail("dimensions must be positive");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (k_active < 1 || k_active > d_ff) fail("k_active must be in [1, d_ff]");
  for (double a : {alpha_fast, alpha_mid, alpha_slow}) {
    if (!(a > 0.0 && a <= 1.0)) fail("decays must be in (0, 1]");
  }
  if (!(alpha_fast > alpha_mid && alpha_mid > alpha_slow)) fail("decays must satisfy alpha_fast > alpha_mid > alpha_slow");
  if (lb_weight < 0.0) fail("lb_weight must be >= 0");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (predictor == PredictorKind::SoftmaxAttention && (n_heads < 1 || d_model % n_heads != 0)) {
    fail("d_model must be divisible by n_heads");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must be in (0, 1]");
  if (proj_dim < 1) fail("proj_dim must be positive");
  if (chunk_len < 1) fail("chunk_len must be positive");
  if (!(init_std >= 0.0)) fail("init_std must be >= 0");
}

PredictorShape SpenConfig::predictor_shape() const {
  PredictorShape s;
  s.kind = predictor;
  s.d = d_model;
  s.n_heads = n_heads;
  s.gamma = gamma;
  s.proj_dim = proj_dim;
  return s;
}

std::map<std::string, std::string> SpenConfig::to_header() const {
  return {{"d_model", std::to_string(d_model)},
          {"d_ff", std::to_string(d_ff)},
          {"n_blocks", std::to_string(n_blocks)},
          {"k_active", std::to_string(k_active)},
          {"vocab_size", std::to_string(vocab_size)},
          {"seq_len", std::to_string(seq_len)},
          {"alpha_fast", fmt(alpha_fast)},
          {"alpha_mid", fmt(alpha_mid)},
          {"alpha_slow", fmt(alpha_slow)},
          {"lb_weight", fmt(lb_weight)},
          {"ln_eps", fmt(ln_eps)},
          {"predictor", std::string(predictor_name(predictor))},
          {"n_heads", std::to_string(n_heads)},
          {"gamma", fmt(gamma)},
          {"proj_dim", std::to_string(proj_dim)},
          {"ste", ste == SteMode::Identity ? "identity" : "masked"},
          {"tie_embeddings", tie_embeddings ? "1" : "0"},
          {"init_std", fmt(init_std)},
          {"chunk_len", std::to_string(chunk_len)},
          {"zero_traces", zero_traces ? "1" : "0"}};
}

SpenConfig SpenConfig::from_header(const std::map<std::string, std::string>& h) {
  SpenConfig c;
  auto get = [&](const char* key) -> const std::string& {
    const auto it = h.find(key);
    if (it == h.end()) throw std::runtime_error(std::string("checkpoint header lacks ") + key);
    return it->second;
  };
  c.d_model = std::stol(get("d_model"));
  c.d_ff = std::stol(get("d_ff"));
  c.n_blocks = std::stoi(get("n_blocks"));
  c.k_active = std::stol(get("k_active"));
  c.vocab_size = std::stol(get("vocab_size"));
  c.seq_len = std::stol(get("seq_len"));
  c.alpha_fast = std::stod(get("alpha_fast"));
  c.alpha_mid = std::stod(get("alpha_mid"));
  c.alpha_slow = std::stod(get("alpha_slow"));
  c.lb_weight = std::stod(get("lb_weight"));
  c.ln_eps = std::stod(get("ln_eps"));
  c.predictor = predictor_from_name(get("predictor"));
  c.n_heads = std::stoi(get("n_heads"));
  c.gamma = std::stod(get("gamma"));
  c.proj_dim = std::stol(get("proj_dim"));
  c.ste = get("ste") == "masked" ? SteMode::Masked : SteMode::Identity;
  c.tie_embeddings = get("tie_embeddings") == "1";
  c.init_std = std::stod(get("init_std"));
  c.chunk_len = std::stol(get("chunk_len"));
  c.zero_traces = get("zero_traces") == "1";
  c.validate();
  return c;
}

template <typename Scalar>
SpenParams<Scalar> SpenParams<Scalar>::zeros_like(const SpenConfig& config) const {
  SpenParams out = *this;
  out.set_zero(config);
  return out;
}

template <typename Scalar>
void SpenParams<Scalar>::set_zero(const SpenConfig& config) {
  visit(config, [](const std::string&, Matrix<Scalar>& m, bool, bool) { m.setZero(); });
}

namespace {

template <typename Scalar>
void allocate(const SpenConfig& c, SpenParams<Scalar>& p) {
  const Index d = c.d_model;
  p.embedding.resize(c.vocab_size, d);
  if (!c.tie_embeddings) p.head.resize(c.vocab_size, d);
  p.blocks.resize(static_cast<std::size_t>(c.n_blocks));
  for (auto& b : p.blocks) {
    for (auto* m : {&b.w_f, &b.w_m, &b.w_s, &b.w_e}) m->resize(d, d);
    b.w_up.resize(c.d_ff, d);
    b.w_down.resize(d, c.d_ff);
    b.ln_gain.resize(d, 1);
    b.ln_bias.resize(d, 1);
    switch (c.predictor) {
      case PredictorKind::Static:
        b.pred.w_pred.resize(d, d);
        break;
      case PredictorKind::LinearAttention:
        for (auto* m : {&b.pred.w_q, &b.pred.w_k, &b.pred.w_v}) m->resize(d, d);
        break;
      case PredictorKind::SoftmaxAttention:
        for (auto* m : {&b.pred.w_q, &b.pred.w_k, &b.pred.w_v, &b.pred.w_o}) m->resize(d, d);
        break;
      case PredictorKind::ProjectedStatic:
        b.pred.proj.resize(c.proj_dim, d);
        b.pred.w_pred.resize(d, c.proj_dim);
        break;
    }
  }
}

}  // namespace

template <typename Scalar>
SpenModel<Scalar>::SpenModel(const SpenConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  allocate(config_, params_);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  params_.visit(config_, [&](const std::string& name, Matrix<Scalar>& m, bool, bool) {
    const auto leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "w_down" || leaf == "ln_bias") {
      m.setZero();
    } else if (leaf == "ln_gain") {
      m.setOnes();
    } else {
      const double sd = leaf == "proj" ? 1.0 / std::sqrt(static_cast<double>(m.cols())) : config_.init_std;
      for (Index j = 0; j < m.cols(); ++j) {
        for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(sd * normal(rng));
      }
    }
  });
}

template <typename Scalar>
Index SpenModel<Scalar>::parameter_count() const {
  Index n = 0;
  const_cast<SpenParams<Scalar>&>(params_).visit(config_, [&](const std::string&, Matrix<Scalar>& m, bool trainable,
                                                              bool) {
    if (trainable) n += m.size();
  });
  return n;
}

template <typename Scalar>
std::uint64_t SpenModel<Scalar>::hash() const {
  std::uint64_t h = 0;
  const_cast<SpenParams<Scalar>&>(params_).visit(
      config_, [&](const std::string&, Matrix<Scalar>& m, bool, bool) { h = hash_combine(h, hash_bytes(m)); });
  return h;
}

template <typename Scalar>
template <typename Other>
SpenModel<Other> SpenModel<Scalar>::cast() const {
  SpenModel<Other> out(config_, 0);
  std::vector<const Matrix<Scalar>*> src;
  const_cast<SpenParams<Scalar>&>(params_).visit(
      config_, [&](const std::string&, Matrix<Scalar>& m, bool, bool) { src.push_back(&m); });
  std::size_t i = 0;
  out.params().visit(config_, [&](const std::string&, Matrix<Other>& m, bool, bool) {
    m = src[i++]->template cast<Other>();
  });
  return out;
}

template <typename Scalar>
Scalar gelu(Scalar u) {
  return Scalar(0.5) * u * (Scalar(1) + std::erf(u / std::sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_grad(Scalar u) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(u / std::sqrt(Scalar(2))));
  const Scalar pdf = std::exp(Scalar(-0.5) * u * u) / std::sqrt(Scalar(2) * Scalar(M_PI));
  return cdf + u * pdf;
}

template <typename Scalar>
SeqMatrix<Scalar> topk_rows(const SeqMatrix<Scalar>& z, Index k, SeqMatrix<Scalar>* mask) {
  if (k < 0 || k > z.cols()) throw std::invalid_argument("topk: k must be in [0, width]");
  SeqMatrix<Scalar> out = SeqMatrix<Scalar>::Zero(z.rows(), z.cols());
  if (mask) mask->setZero(z.rows(), z.cols());
  for (Index t = 0; t < z.rows(); ++t) {
    for (Index j : topk_indices(z.row(t).data(), z.cols(), k)) {
      out(t, j) = z(t, j);
      if (mask) (*mask)(t, j) = Scalar(1);
    }
  }
  return out;
}

namespace {

template <typename Scalar>
SeqMatrix<Scalar> softmax_rows(const SeqMatrix<Scalar>& u) {
  SeqMatrix<Scalar> p(u.rows(), u.cols());
  for (Index t = 0; t < u.rows(); ++t) {
    const Scalar m = u.row(t).maxCoeff();
    p.row(t) = (u.row(t).array() - m).exp();
    p.row(t) /= p.row(t).sum();
  }
  return p;
}

}  // namespace

template <typename Scalar>
Scalar load_balance_loss(const SeqMatrix<Scalar>& pre_acts, const SeqMatrix<Scalar>& mask, Index k) {
  const Index T = pre_acts.rows();
  if (T == 0) throw std::invalid_argument("load_balance_loss: empty batch");
  if (mask.rows() != T || mask.cols() != pre_acts.cols()) throw std::invalid_argument("load_balance_loss: shape mismatch");
  const RowVector<Scalar> f = mask.colwise().sum() / static_cast<Scalar>(T * k);
  const RowVector<Scalar> p = softmax_rows(pre_acts).colwise().mean();
  return static_cast<Scalar>(pre_acts.cols()) * f.dot(p);
}

template <typename Scalar>
ForwardPass<Scalar> forward_sequence(const SpenModel<Scalar>& model, const std::vector<int>& inputs,
                                     const FrozenSelection<Scalar>* frozen) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  const Index T = static_cast<Index>(inputs.size());
  if (T == 0) throw std::invalid_argument("forward: empty sequence");
  if (T > cfg.seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds seq_len " +
                                std::to_string(cfg.seq_len));
  }
  const Index d = cfg.d_model;
  const PredictorShape shape = cfg.predictor_shape();
  ema::ScanConfig scan;
  scan.chunk_len = cfg.chunk_len;

  ForwardPass<Scalar> fp;
  fp.inputs = inputs;
  fp.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  SeqMatrix<Scalar> x(T, d);
  for (Index t = 0; t < T; ++t) {
    const int tok = inputs[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");
    x.row(t) = P.embedding.row(tok);
  }

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const auto& bp = P.blocks[static_cast<std::size_t>(b)];
    auto& c = fp.blocks[static_cast<std::size_t>(b)];
    c.x = x;
    if (cfg.zero_traces) {
      c.hf.setZero(T, d);
      c.hm.setZero(T, d);
      c.hs.setZero(T, d);
    } else {
      c.hf = ema::chunked(x, static_cast<Scalar>(cfg.alpha_fast), scan);
      c.hm = ema::chunked(x, static_cast<Scalar>(cfg.alpha_mid), scan);
      c.hs = ema::chunked(x, static_cast<Scalar>(cfg.alpha_slow), scan);
    }
    c.hs_norm.resize(T);
    c.hbar.setZero(T, d);
    for (Index t = 0; t < T; ++t) {
      c.hs_norm[t] = c.hs.row(t).norm();
      if (c.hs_norm[t] >= static_cast<Scalar>(kNormGuard)) c.hbar.row(t) = c.hs.row(t) / c.hs_norm[t];
    }
    c.xhat = predictor_forward(shape, bp.pred, c.hbar, x, &c.pred);
    c.err = x - c.xhat;
    c.c = x + c.hf * bp.w_f.transpose() + c.hm * bp.w_m.transpose() + c.hs * bp.w_s.transpose() +
          c.err * bp.w_e.transpose();
    layer_norm_rows(c.c, bp.ln_gain, bp.ln_bias, cfg.ln_eps, c.nrm, c.inv_std, c.ln);
    c.u = c.ln * bp.w_up.transpose();
    c.g = c.u.unaryExpr([](Scalar v) { return gelu(v); });
    if (frozen) {
      c.mask = frozen->mask.at(static_cast<std::size_t>(b));
      c.z = cfg.ste == SteMode::Identity ? SeqMatrix<Scalar>(c.g - frozen->offset.at(static_cast<std::size_t>(b)))
                                         : SeqMatrix<Scalar>(c.g.cwiseProduct(c.mask));
    } else {
      c.z = topk_rows(c.g, cfg.k_active, &c.mask);
    }
    c.f = c.mask.colwise().sum() / static_cast<Scalar>(T * cfg.k_active);
    c.p = softmax_rows(c.u);
    c.lb = static_cast<Scalar>(cfg.d_ff) * c.f.dot(c.p.colwise().mean());
    x = x + c.z * bp.w_down.transpose();
    require_finite(x, "block output");
  }
  fp.x_out = x;
  fp.logits = x * model.head().transpose();
  return fp;
}

template <typename Scalar>
FrozenSelection<Scalar> capture_selection(const ForwardPass<Scalar>& pass) {
  FrozenSelection<Scalar> fs;
  for (const auto& c : pass.blocks) {
    fs.mask.push_back(c.mask);
    fs.offset.push_back(c.g - c.z);
  }
  return fs;
}

template <typename Scalar>
LossParts sequence_loss(const SpenModel<Scalar>& model, const ForwardPass<Scalar>& pass,
                        const std::vector<int>& targets) {
  const Index T = pass.logits.rows();
  if (static_cast<Index>(targets.size()) != T) throw std::invalid_argument("loss: target count mismatch");
  double ce = 0.0;
  for (Index t = 0; t < T; ++t) {
    const auto row = pass.logits.row(t);
    const double m = static_cast<double>(row.maxCoeff());
    const double lse = m + std::log((row.template cast<double>().array() - m).exp().sum());
    ce += lse - static_cast<double>(row(targets[static_cast<std::size_t>(t)]));
  }
  LossParts lp;
  lp.ce = ce / static_cast<double>(T);
  for (const auto& c : pass.blocks) lp.lb += static_cast<double>(c.lb);
  lp.lb /= static_cast<double>(pass.blocks.size());
  lp.total = lp.ce + model.config().lb_weight * lp.lb;
  return lp;
}

template <typename Scalar>
void backward_sequence(const SpenModel<Scalar>& model, const ForwardPass<Scalar>& pass,
                       const std::vector<int>& targets, Scalar scale, SpenParams<Scalar>& grad) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  const Index T = pass.logits.rows();
  const Index d = cfg.d_model;
  const PredictorShape shape = cfg.predictor_shape();

  // Cross-entropy: (softmax - onehot) / T.
  SeqMatrix<Scalar> dlogits(T, cfg.vocab_size);
  for (Index t = 0; t < T; ++t) {
    const auto row = pass.logits.row(t);
    const Scalar m = row.maxCoeff();
    dlogits.row(t) = (row.array() - m).exp();
    dlogits.row(t) /= dlogits.row(t).sum();
    dlogits(t, targets[static_cast<std::size_t>(t)]) -= Scalar(1);
  }
  dlogits *= scale / static_cast<Scalar>(T);

  Matrix<Scalar>& head_grad = cfg.tie_embeddings ? grad.embedding : grad.head;
  head_grad.noalias() += dlogits.transpose() * pass.x_out;
  SeqMatrix<Scalar> dx = dlogits * model.head();

  const Scalar lb_scale = scale * static_cast<Scalar>(cfg.lb_weight) / static_cast<Scalar>(cfg.n_blocks);
  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    const auto& bp = P.blocks[static_cast<std::size_t>(b)];
    auto& gb = grad.blocks[static_cast<std::size_t>(b)];
    const auto& c = pass.blocks[static_cast<std::size_t>(b)];

    SeqMatrix<Scalar> dx_in = dx;  // residual path
    gb.w_down.noalias() += dx.transpose() * c.z;
    SeqMatrix<Scalar> dz = dx * bp.w_down;
    if (cfg.ste == SteMode::Masked) dz = dz.cwiseProduct(c.mask);

    SeqMatrix<Scalar> du = dz.cwiseProduct(c.u.unaryExpr([](Scalar v) { return gelu_grad(v); }));
    if (lb_scale != Scalar(0)) {
      // d lb / d u_tj = (d_ff / T) p_tj (f_j - sum_i f_i p_ti)
      const Vector<Scalar> pf = c.p * c.f.transpose();
      SeqMatrix<Scalar> dlb = c.p.cwiseProduct((c.f.replicate(T, 1).colwise() - pf).eval());
      du += (lb_scale * static_cast<Scalar>(cfg.d_ff) / static_cast<Scalar>(T)) * dlb;
    }

    gb.w_up.noalias() += du.transpose() * c.ln;
    const SeqMatrix<Scalar> dln = du * bp.w_up;
    gb.ln_gain.col(0) += dln.cwiseProduct(c.nrm).colwise().sum().transpose();
    gb.ln_bias.col(0) += dln.colwise().sum().transpose();
    const SeqMatrix<Scalar> dn = dln.array().rowwise() * bp.ln_gain.col(0).transpose().array();
    SeqMatrix<Scalar> dc(T, d);
    for (Index t = 0; t < T; ++t) {
      const Scalar mean_dn = dn.row(t).mean();
      const Scalar mean_dn_n = dn.row(t).dot(c.nrm.row(t)) / static_cast<Scalar>(d);
      dc.row(t) = c.inv_std[t] * (dn.row(t).array() - mean_dn - c.nrm.row(t).array() * mean_dn_n).matrix();
    }

    dx_in += dc;
    gb.w_f.noalias() += dc.transpose() * c.hf;
    gb.w_m.noalias() += dc.transpose() * c.hm;
    gb.w_s.noalias() += dc.transpose() * c.hs;
    gb.w_e.noalias() += dc.transpose() * c.err;
    const SeqMatrix<Scalar> dhf = dc * bp.w_f;
    const SeqMatrix<Scalar> dhm = dc * bp.w_m;
    SeqMatrix<Scalar> dhs = dc * bp.w_s;
    const SeqMatrix<Scalar> derr = dc * bp.w_e;
    dx_in += derr;

    SeqMatrix<Scalar> dhbar = SeqMatrix<Scalar>::Zero(T, d);
    const SeqMatrix<Scalar> dxhat = -derr;
    predictor_backward(shape, bp.pred, c.hbar, c.x, c.pred, dxhat, gb.pred, dhbar, dx_in);
    for (Index t = 0; t < T; ++t) {
      const Scalar n = c.hs_norm[t];
      if (n >= static_cast<Scalar>(kNormGuard)) {
        const Scalar proj = c.hbar.row(t).dot(dhbar.row(t));
        dhs.row(t) += (dhbar.row(t) - proj * c.hbar.row(t)) / n;
      }
    }
    if (!cfg.zero_traces) {
      dx_in += ema::adjoint(dhf, static_cast<Scalar>(cfg.alpha_fast));
      dx_in += ema::adjoint(dhm, static_cast<Scalar>(cfg.alpha_mid));
      dx_in += ema::adjoint(dhs, static_cast<Scalar>(cfg.alpha_slow));
    }
    dx = std::move(dx_in);
  }

  for (Index t = 0; t < T; ++t) grad.embedding.row(pass.inputs[static_cast<std::size_t>(t)]) += dx.row(t);
}

template <typename Scalar>
LossParts batch_loss(const SpenModel<Scalar>& model, const std::vector<std::vector<int>>& batch,
                     SpenParams<Scalar>* grad, const std::vector<FrozenSelection<Scalar>>* frozen) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (frozen && frozen->size() != batch.size()) throw std::invalid_argument("batch_loss: frozen selection count mismatch");
  const Scalar scale = Scalar(1) / static_cast<Scalar>(batch.size());
  LossParts mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& seq = batch[i];
    if (seq.size() < 2) throw std::invalid_argument("batch_loss: sequences need at least two tokens");
    const std::vector<int> inputs(seq.begin(), seq.end() - 1);
    const std::vector<int> targets(seq.begin() + 1, seq.end());
    const auto pass = forward_sequence(model, inputs, frozen ? &(*frozen)[i] : nullptr);
    const LossParts lp = sequence_loss(model, pass, targets);
    mean.ce += lp.ce;
    mean.lb += lp.lb;
    mean.total += lp.total;
    if (grad) backward_sequence(model, pass, targets, scale, *grad);
  }
  const double n = static_cast<double>(batch.size());
  mean.ce /= n;
  mean.lb /= n;
  mean.total /= n;
  return mean;
}

template <typename Scalar>
InferenceSession<Scalar>::InferenceSession(const SpenModel<Scalar>& model, PredictorAdapter<Scalar>* adapter)
    : model_(&model), adapter_(adapter) {
  reset();
}

template <typename Scalar>
void InferenceSession<Scalar>::reset() {
  const auto& cfg = model_->config();
  const Index d = cfg.d_model;
  traces_.assign(static_cast<std::size_t>(cfg.n_blocks),
                 {Vector<Scalar>::Zero(d), Vector<Scalar>::Zero(d), Vector<Scalar>::Zero(d)});
  hbar_.assign(static_cast<std::size_t>(cfg.n_blocks), Vector<Scalar>::Zero(d));
  pred_state_.assign(static_cast<std::size_t>(cfg.n_blocks), PredictorState<Scalar>{});
  for (auto& s : pred_state_) s.reset(cfg.predictor_shape());
  position_ = 0;
}

template <typename Scalar>
const Vector<Scalar>& InferenceSession<Scalar>::trace(int block, int which) const {
  if (which < 0 || which > 2) throw std::invalid_argument("trace: which must be 0, 1 or 2");
  return traces_.at(static_cast<std::size_t>(block))[static_cast<std::size_t>(which)];
}

template <typename Scalar>
Vector<Scalar> InferenceSession<Scalar>::step(int token) {
  const auto& cfg = model_->config();
  const auto& P = model_->params();
  if (token < 0 || token >= cfg.vocab_size) throw std::invalid_argument("step: token id out of range");
  const PredictorShape shape = cfg.predictor_shape();
  const std::array<Scalar, 3> alphas{static_cast<Scalar>(cfg.alpha_fast), static_cast<Scalar>(cfg.alpha_mid),
                                     static_cast<Scalar>(cfg.alpha_slow)};
  Vector<Scalar> x = P.embedding.row(token).transpose();
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    const auto& bp = P.blocks[bi];
    auto& tr = traces_[bi];
    if (!cfg.zero_traces) {
      for (std::size_t j = 0; j < 3; ++j) tr[j] = (Scalar(1) - alphas[j]) * tr[j] + alphas[j] * x;
    }
    const Scalar n = tr[2].norm();
    hbar_[bi] = n >= static_cast<Scalar>(kNormGuard) ? Vector<Scalar>(tr[2] / n) : Vector<Scalar>::Zero(x.size());
    const Vector<Scalar> xhat =
        adapter_ ? adapter_->predict(b, hbar_[bi]) : predictor_step(shape, bp.pred, pred_state_[bi], hbar_[bi], x);
    const Vector<Scalar> err = x - xhat;
    const Vector<Scalar> c = x + bp.w_f * tr[0] + bp.w_m * tr[1] + bp.w_s * tr[2] + bp.w_e * err;
    const Vector<Scalar> u = bp.w_up * layer_norm(c, bp.ln_gain, bp.ln_bias, cfg.ln_eps);
    const Vector<Scalar> g = u.unaryExpr([](Scalar v) { return gelu(v); });
    Vector<Scalar> z = Vector<Scalar>::Zero(g.size());
    for (Index j : topk_indices(g.data(), g.size(), cfg.k_active)) z[j] = g[j];
    if (adapter_) adapter_->observe(b, hbar_[bi], x, xhat);
    x += bp.w_down * z;
  }
  ++position_;
  Vector<Scalar> logits = model_->head() * x;
  if (!logits.allFinite()) throw std::domain_error("non-finite logits in inference");
  return logits;
}

template <typename Scalar>
std::vector<double> stream_token_ce(InferenceSession<Scalar>& session, const std::vector<int>& stream) {
  std::vector<double> out;
  if (stream.size() < 2) return out;
  out.reserve(stream.size() - 1);
  for (std::size_t i = 0; i + 1 < stream.size(); ++i) {
    const Vector<Scalar> logits = session.step(stream[i]);
    const Eigen::VectorXd l = logits.template cast<double>();
    const double m = l.maxCoeff();
    const double lse = m + std::log((l.array() - m).exp().sum());
    out.push_back(lse - l[stream[i + 1]]);
  }
  return out;
}

std::vector<double> windowed_ppl(const std::vector<double>& token_ce, Index window) {
  if (window < 1) throw std::invalid_argument("windowed_ppl: window must be positive");
  std::vector<double> out;
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t start = 0; start + w <= token_ce.size(); start += w) {
    double s = 0.0;
    for (std::size_t i = start; i < start + w; ++i) s += token_ce[i];
    out.push_back(std::exp(s / static_cast<double>(w)));
  }
  return out;
}

template <typename Scalar>
std::vector<double> perplexity_stream(const SpenModel<Scalar>& model, const std::vector<int>& stream, Index window,
                                      PredictorAdapter<Scalar>* adapter) {
  if (window < 1 || static_cast<Index>(stream.size()) < window + 1) {
    throw std::invalid_argument("perplexity_stream: stream of " + std::to_string(stream.size()) +
                                " tokens is shorter than one window of " + std::to_string(window) + " predictions");
  }
  InferenceSession<Scalar> session(model, adapter);
  return windowed_ppl(stream_token_ce(session, stream), window);
}

void save_checkpoint(const std::filesystem::path& path, const SpenModel<float>& model,
                     const std::map<std::string, std::string>& extra) {
  io::TensorFile file;
  file.kind = "spen";
  file.header = model.config().to_header();
  for (const auto& [k, v] : extra) {
    if (file.header.count(k)) throw std::invalid_argument("checkpoint extra key collides with config key: " + k);
    file.header[k] = v;
  }
  auto& params = const_cast<SpenParams<float>&>(model.params());
  params.visit(model.config(), [&](const std::string& name, Matrix<float>& m, bool, bool) {
    file.tensors.push_back(io::NamedTensor::from(name, m));
  });
  write_tensor_file(path, file);
}

SpenModel<float> load_checkpoint(const std::filesystem::path& path) {
  const io::TensorFile file = io::read_tensor_file(path);
  if (file.kind != "spen") throw std::runtime_error("not a spen checkpoint: kind '" + file.kind + "'");
  SpenModel<float> model(SpenConfig::from_header(file.header), 0);
  model.params().visit(model.config(), [&](const std::string& name, Matrix<float>& m, bool, bool) {
    const auto& t = file.get(name);
    if (static_cast<Index>(t.rows) != m.rows() || static_cast<Index>(t.cols) != m.cols()) {
      throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
    }
    m = t.to_matrix<float>();
  });
  return model;
}

#define EMATRACE_SPEN_INSTANTIATE(S)                                                                              \
  template struct SpenParams<S>;                                                                                 \
  template class SpenModel<S>;                                                                                   \
  template S gelu<S>(S);                                                                                         \
  template S gelu_grad<S>(S);                                                                                    \
  template SeqMatrix<S> topk_rows<S>(const SeqMatrix<S>&, Index, SeqMatrix<S>*);                                \
  template S load_balance_loss<S>(const SeqMatrix<S>&, const SeqMatrix<S>&, Index);                              \
  template ForwardPass<S> forward_sequence<S>(const SpenModel<S>&, const std::vector<int>&,                      \
                                              const FrozenSelection<S>*);                                        \
  template FrozenSelection<S> capture_selection<S>(const ForwardPass<S>&);                                       \
  template LossParts sequence_loss<S>(const SpenModel<S>&, const ForwardPass<S>&, const std::vector<int>&);      \
  template void backward_sequence<S>(const SpenModel<S>&, const ForwardPass<S>&, const std::vector<int>&, S,     \
                                     SpenParams<S>&);                                                            \
  template LossParts batch_loss<S>(const SpenModel<S>&, const std::vector<std::vector<int>>&, SpenParams<S>*,    \
                                   const std::vector<FrozenSelection<S>>*);                                      \
  template class InferenceSession<S>;                                                                            \
  template std::vector<double> stream_token_ce<S>(InferenceSession<S>&, const std::vector<int>&);                \
  template std::vector<double> perplexity_stream<S>(const SpenModel<S>&, const std::vector<int>&, Index,         \
                                                    PredictorAdapter<S>*);

EMATRACE_SPEN_INSTANTIATE(float)
EMATRACE_SPEN_INSTANTIATE(double)

#undef EMATRACE_SPEN_INSTANTIATE

template SpenModel<double> SpenModel<float>::cast<double>() const;
template SpenModel<float> SpenModel<double>::cast<float>() const;
template SpenModel<float> SpenModel<float>::cast<float>() const;
template SpenModel<double> SpenModel<double>::cast<double>() const;

}  // namespace ematrace::spen
