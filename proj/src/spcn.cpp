#include "ematrace/spcn.hpp"

#include "ematrace/ema.hpp"
#include "ematrace/tensor_io.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace ematrace::spcn {

Index default_k_active(Index dim) {
  return std::max<Index>(4, static_cast<Index>(0.05 * static_cast<double>(dim)));
}

LevelConfig SpcnConfig::level(int l) const {
  const auto i = static_cast<std::size_t>(l);
  LevelConfig c;
  c.dim = dims[i];
  c.k_active = k_active[i] > 0 ? k_active[i] : default_k_active(dims[i]);
  c.alpha_fast = alpha_fast[i];
  c.alpha_slow = slow_ratio * alpha_fast[i];
  return c;
}

void SpcnConfig::validate() const {
  if (input_dim < 1) throw std::invalid_argument("spcn: input_dim must be positive");
  if (settle_steps < 1) throw std::invalid_argument("spcn: settle_steps must be >= 1");
  if (!(pi_min > 0.0 && pi_min <= pi_max)) throw std::invalid_argument("spcn: bad precision range");
  for (int l = 0; l < kLevels; ++l) {
    const LevelConfig c = level(l);
    if (c.dim < 1) throw std::invalid_argument("spcn: level dims must be positive");
    if (c.k_active < 1 || c.k_active > c.dim) {
      throw std::invalid_argument("spcn: level " + std::to_string(l) + " has k_active " + std::to_string(c.k_active) +
                                  " > dim " + std::to_string(c.dim));
    }
    ema::check_alpha(c.alpha_fast);
    ema::check_alpha(c.alpha_slow);
  }
}

template <typename Scalar>
Vector<Scalar> topk_positive(const Vector<Scalar>& v, Index k) {
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) {
    if (v[i] > Scalar(0)) idx.push_back(i);
  }
  Vector<Scalar> out = Vector<Scalar>::Zero(v.size());
  const auto keep = static_cast<std::size_t>(std::min<Index>(k, static_cast<Index>(idx.size())));
  auto by_value = [&](Index a, Index b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), by_value);
  for (std::size_t j = 0; j < keep; ++j) out[idx[j]] = v[idx[j]];
  return out;
}

namespace {

// W * x for a sparse x: only columns with nonzero coefficients are touched.
template <typename Scalar>
Vector<Scalar> sparse_times(const Matrix<Scalar>& w, const Vector<Scalar>& x) {
  Vector<Scalar> out = Vector<Scalar>::Zero(w.rows());
  for (Index j = 0; j < x.size(); ++j) {
    if (x[j] != Scalar(0)) out.noalias() += x[j] * w.col(j);
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(normal(rng));
  }
  return m;
}

}  // namespace

template <typename Scalar>
void SpaBuffer<Scalar>::push(const Vector<Scalar>& state) {
  ring_.push_back(state);
  while (static_cast<Index>(ring_.size()) > window_) ring_.pop_front();
}

template <typename Scalar>
std::vector<Index> SpaBuffer<Scalar>::rank(const Vector<Scalar>& query) const {
  const Scalar qn = query.norm();
  std::vector<Scalar> sim(ring_.size(), Scalar(0));
  for (std::size_t i = 0; i < ring_.size(); ++i) {
    const Scalar en = ring_[i].norm();
    if (qn > Scalar(0) && en > Scalar(0)) sim[i] = ring_[i].dot(query) / (qn * en);
  }
  std::vector<Index> order(ring_.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(b)];
  });
  return order;
}

template <typename Scalar>
Vector<Scalar> SpaBuffer<Scalar>::context(const Vector<Scalar>& query, Index dim) const {
  Vector<Scalar> out = Vector<Scalar>::Zero(dim);
  if (ring_.empty()) return out;
  const auto order = rank(query);
  const Index n = std::min<Index>(top_k_, static_cast<Index>(order.size()));
  for (Index i = 0; i < n; ++i) {
    const auto& e = ring_[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    const Scalar en = e.norm();
    if (!unit_norm_) {
      out += e;
    } else if (en > Scalar(0)) {
      out += e / en;
    }
  }
  return out / static_cast<Scalar>(n);
}

template <typename Scalar>
Hierarchy<Scalar>::Hierarchy(const SpcnConfig& config, std::uint64_t seed)
    : config_(config), spa_(config.spa_window, config.spa_top_k, config.spa_unit_norm) {
  config_.validate();
  std::mt19937_64 rng(seed);
  for (int l = 0; l < kLevels; ++l) levels_[static_cast<std::size_t>(l)] = config_.level(l);

  for (int l = 0; l < kLevels; ++l) {
    const auto i = static_cast<std::size_t>(l);
    const Index d = levels_[i].dim;
    const Index below = l == 0 ? config_.input_dim : levels_[i - 1].dim;
    auto& w = weights_[i];
    w.w_ff = gaussian<Scalar>(d, below, 1.0 / std::sqrt(static_cast<double>(below)), rng);
    w.w_lat = gaussian<Scalar>(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    if (l + 1 < kLevels) {
      const Index above = levels_[i + 1].dim;
      w.w_fb = gaussian<Scalar>(d, above, 1.0 / std::sqrt(static_cast<double>(above)), rng);
    }
    auto& s = states_[i];
    s.precision = Vector<Scalar>::Ones(d);
    s.err_var = Vector<Scalar>::Zero(d);
  }
  reset_sentence();
}

template <typename Scalar>
void Hierarchy<Scalar>::reset_sentence() {
  for (int l = 0; l < kLevels; ++l) {
    const auto i = static_cast<std::size_t>(l);
    const Index d = levels_[i].dim;
    states_[i].x = Vector<Scalar>::Zero(d);
    states_[i].trace_fast = Vector<Scalar>::Zero(d);
    states_[i].trace_slow = Vector<Scalar>::Zero(d);
  }
  spa_.clear();
}

template <typename Scalar>
Vector<Scalar> Hierarchy<Scalar>::l0_prediction_error() const {
  const auto& s0 = states_[0];
  const Vector<Scalar> pred = sparse_times(weights_[0].w_fb, states_[1].x);
  return s0.precision.cwiseProduct(s0.x - pred);
}

template <typename Scalar>
void Hierarchy<Scalar>::settle(const Vector<Scalar>& input) {
  if (input.size() != config_.input_dim) throw std::invalid_argument("settle: input has wrong dimension");
  Index hot = -1;
  for (Index i = 0; i < input.size(); ++i) {
    if (input[i] == Scalar(0)) continue;
    if (input[i] != Scalar(1) || hot >= 0) throw std::invalid_argument("settle: input is not one-hot");
    hot = i;
  }
  if (hot < 0) throw std::invalid_argument("settle: input is not one-hot");
  settle_index(hot);
}

template <typename Scalar>
void Hierarchy<Scalar>::settle_index(Index word) {
  if (word < 0 || word >= config_.input_dim) throw std::invalid_argument("settle: word index out of range");
  const Scalar a = static_cast<Scalar>(config_.ff_gain);
  const Scalar b = static_cast<Scalar>(config_.fb_gain);
  const Scalar g = static_cast<Scalar>(config_.lat_gain);

  for (int it = 0; it < config_.settle_steps; ++it) {
    Vector<Scalar> c_spa;
    const bool has_spa = config_.use_spa && !spa_.empty();
    if (has_spa) c_spa = spa_.context(l0_prediction_error(), levels_[0].dim);

    // Bottom-up sweep: the level below is already updated this iteration,
    // the level above and the lateral term still hold last iteration's state.
    for (int l = 0; l < kLevels; ++l) {
      const auto i = static_cast<std::size_t>(l);
      const auto& w = weights_[i];
      Vector<Scalar> pre = (l == 0) ? Vector<Scalar>(a * w.w_ff.col(word))
                                    : Vector<Scalar>(a * sparse_times(w.w_ff, states_[i - 1].x));
      if (l + 1 < kLevels) pre.noalias() += b * sparse_times(w.w_fb, states_[i + 1].x);
      pre.noalias() += g * sparse_times(w.w_lat, states_[i].x);
      if (l == 0 && has_spa) pre += c_spa;
      states_[i].x = topk_positive(pre, levels_[i].k_active);
    }
  }
}

template <typename Scalar>
void Hierarchy<Scalar>::pghu_update(int level) {
  if (level < 0 || level + 1 >= kLevels) throw std::invalid_argument("pghu_update: level has no feedback weights");
  const auto i = static_cast<std::size_t>(level);
  auto& s = states_[i];
  auto& w_fb = weights_[i].w_fb;
  const Vector<Scalar>& above = states_[i + 1].x;

  const Vector<Scalar> raw = s.x - sparse_times(w_fb, above);
  const Vector<Scalar> err = s.precision.cwiseProduct(raw);
  const Vector<Scalar> gated = static_cast<Scalar>(config_.eta) * s.precision.cwiseProduct(err);

  w_fb *= static_cast<Scalar>(1.0 - config_.weight_decay);
  for (Index k = 0; k < above.size(); ++k) {
    if (above[k] != Scalar(0)) w_fb.col(k).noalias() += above[k] * gated;
  }

  const Scalar rho = static_cast<Scalar>(config_.precision_rho);
  s.err_var = rho * s.err_var + (Scalar(1) - rho) * raw.cwiseAbs2();
  const Scalar eps = static_cast<Scalar>(config_.precision_eps);
  const Scalar lo = static_cast<Scalar>(config_.pi_min);
  const Scalar hi = static_cast<Scalar>(config_.pi_max);
  s.precision = (s.err_var.array() + eps).inverse().min(hi).max(lo).matrix();
}

template <typename Scalar>
void Hierarchy<Scalar>::update_traces(int level) {
  const auto i = static_cast<std::size_t>(level);
  auto& s = states_.at(i);
  ema::step(s.trace_fast, s.x, static_cast<Scalar>(levels_[i].alpha_fast));
  ema::step(s.trace_slow, s.x, static_cast<Scalar>(levels_[i].alpha_slow));
}

template <typename Scalar>
void Hierarchy<Scalar>::step(Index word, bool learn) {
  settle_index(word);
  if (learn) {
    for (int l = 0; l + 1 < kLevels; ++l) pghu_update(l);
  }
  for (int l = 0; l < kLevels; ++l) update_traces(l);
  if (config_.use_spa) spa_.push(states_[0].x);
}

template <typename Scalar>
std::uint64_t Hierarchy<Scalar>::frozen_hash() const {
  std::uint64_t h = 0;
  for (const auto& w : weights_) {
    h = hash_combine(h, hash_bytes(w.w_ff));
    h = hash_combine(h, hash_bytes(w.w_lat));
  }
  return h;
}

namespace {

Matrix<float> hcat(std::initializer_list<const Matrix<float>*> parts) {
  Index rows = (*parts.begin())->rows();
  Index cols = 0;
  for (const auto* p : parts) cols += p->cols();
  Matrix<float> out(rows, cols);
  Index c = 0;
  for (const auto* p : parts) {
    out.middleCols(c, p->cols()) = *p;
    c += p->cols();
  }
  return out;
}

}  // namespace

Matrix<float> Representations::activation(int level) const {
  const auto& r = levels.at(static_cast<std::size_t>(level));
  return hcat({&r.x_fwd, &r.x_bwd});
}

Matrix<float> Representations::traces(int level) const {
  const auto& r = levels.at(static_cast<std::size_t>(level));
  return hcat({&r.fast_fwd, &r.slow_fwd, &r.fast_bwd, &r.slow_bwd});
}

Matrix<float> Representations::combined(int level) const {
  const auto& r = levels.at(static_cast<std::size_t>(level));
  return hcat({&r.x_fwd, &r.x_bwd, &r.fast_fwd, &r.slow_fwd, &r.fast_bwd, &r.slow_bwd});
}

Matrix<float> Representations::forward_only(int level) const {
  const auto& r = levels.at(static_cast<std::size_t>(level));
  return hcat({&r.x_fwd, &r.fast_fwd, &r.slow_fwd});
}

template <typename Scalar>
Representations process_corpus(Hierarchy<Scalar>& fwd, Hierarchy<Scalar>& bwd,
                               const std::vector<grammar::LabeledSentence>& sentences, bool learn,
                               int record_levels) {
  if (record_levels < 0 || record_levels > kLevels) throw std::invalid_argument("record_levels out of range");
  const auto& vocab = grammar::Vocabulary::instance();
  Index n = 0;
  for (const auto& s : sentences) {
    if (s.tokens.empty()) throw std::invalid_argument("process_corpus: empty sentence");
    n += static_cast<Index>(s.tokens.size());
  }

  Representations rep;
  rep.labels.reserve(static_cast<std::size_t>(n));
  rep.levels.resize(static_cast<std::size_t>(record_levels));
  for (int l = 0; l < record_levels; ++l) {
    const Index d = fwd.level_config(l).dim;
    auto& r = rep.levels[static_cast<std::size_t>(l)];
    for (Matrix<float>* m : {&r.x_fwd, &r.x_bwd, &r.fast_fwd, &r.slow_fwd, &r.fast_bwd, &r.slow_bwd}) {
      m->setZero(n, d);
    }
  }

  Index row0 = 0;
  std::vector<Index> words;
  for (const auto& s : sentences) {
    const Index len = static_cast<Index>(s.tokens.size());
    words.resize(static_cast<std::size_t>(len));
    for (Index t = 0; t < len; ++t) words[static_cast<std::size_t>(t)] = vocab.index(s.tokens[static_cast<std::size_t>(t)]);
    for (grammar::Role r : s.roles) rep.labels.push_back(static_cast<int>(r));

    fwd.reset_sentence();
    for (Index t = 0; t < len; ++t) {
      fwd.step(words[static_cast<std::size_t>(t)], learn);
      for (int l = 0; l < record_levels; ++l) {
        auto& r = rep.levels[static_cast<std::size_t>(l)];
        const auto& st = fwd.state(l);
        r.x_fwd.row(row0 + t) = st.x.transpose().template cast<float>();
        r.fast_fwd.row(row0 + t) = st.trace_fast.transpose().template cast<float>();
        r.slow_fwd.row(row0 + t) = st.trace_slow.transpose().template cast<float>();
      }
    }
    bwd.reset_sentence();
    for (Index t = len - 1; t >= 0; --t) {
      bwd.step(words[static_cast<std::size_t>(t)], learn);
      for (int l = 0; l < record_levels; ++l) {
        auto& r = rep.levels[static_cast<std::size_t>(l)];
        const auto& st = bwd.state(l);
        r.x_bwd.row(row0 + t) = st.x.transpose().template cast<float>();
        r.fast_bwd.row(row0 + t) = st.trace_fast.transpose().template cast<float>();
        r.slow_bwd.row(row0 + t) = st.trace_slow.transpose().template cast<float>();
      }
    }
    row0 += len;
  }
  return rep;
}

template <typename Scalar>
void train_corpus(Hierarchy<Scalar>& fwd, Hierarchy<Scalar>& bwd,
                  const std::vector<grammar::LabeledSentence>& sentences) {
  (void)process_corpus(fwd, bwd, sentences, true, 0);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Hierarchy<Scalar>& fwd, const Hierarchy<Scalar>& bwd) {
  io::TensorFile f;
  f.kind = "spcn";
  const auto& c = fwd.config();
  f.header["input_dim"] = std::to_string(c.input_dim);
  for (int l = 0; l < kLevels; ++l) {
    const auto lc = c.level(l);
    const std::string p = "level" + std::to_string(l) + ".";
    f.header[p + "dim"] = std::to_string(lc.dim);
    f.header[p + "k_active"] = std::to_string(lc.k_active);
    f.header[p + "alpha_fast"] = std::to_string(lc.alpha_fast);
    f.header[p + "alpha_slow"] = std::to_string(lc.alpha_slow);
  }
  f.header["settle_steps"] = std::to_string(c.settle_steps);
  f.header["gains"] = std::to_string(c.ff_gain) + "," + std::to_string(c.fb_gain) + "," + std::to_string(c.lat_gain);
  f.header["eta"] = std::to_string(c.eta);
  f.header["weight_decay"] = std::to_string(c.weight_decay);
  f.header["precision_range"] = std::to_string(c.pi_min) + "," + std::to_string(c.pi_max);
  for (const auto* h : {&fwd, &bwd}) {
    const std::string dir = (h == &fwd) ? "fwd." : "bwd.";
    for (int l = 0; l < kLevels; ++l) {
      const std::string p = dir + "L" + std::to_string(l) + ".";
      const auto& w = h->weights(l);
      f.tensors.push_back(io::NamedTensor::from(p + "w_ff", w.w_ff));
      f.tensors.push_back(io::NamedTensor::from(p + "w_lat", w.w_lat));
      if (w.w_fb.size()) f.tensors.push_back(io::NamedTensor::from(p + "w_fb", w.w_fb));
      f.tensors.push_back(io::NamedTensor::from(p + "precision", h->state(l).precision));
    }
  }
  io::write_tensor_file(path, f);
}

#define EMATRACE_SPCN_INSTANTIATE(S)                                                                          \
  template Vector<S> topk_positive<S>(const Vector<S>&, Index);                                               \
  template class SpaBuffer<S>;                                                                                \
  template class Hierarchy<S>;                                                                                \
  template Representations process_corpus<S>(Hierarchy<S>&, Hierarchy<S>&,                                   \
                                             const std::vector<grammar::LabeledSentence>&, bool, int);        \
  template void train_corpus<S>(Hierarchy<S>&, Hierarchy<S>&, const std::vector<grammar::LabeledSentence>&); \
  template void save_checkpoint<S>(const std::filesystem::path&, const Hierarchy<S>&, const Hierarchy<S>&);

EMATRACE_SPCN_INSTANTIATE(float)
EMATRACE_SPCN_INSTANTIATE(double)

#undef EMATRACE_SPCN_INSTANTIATE

}  // namespace ematrace::spcn
