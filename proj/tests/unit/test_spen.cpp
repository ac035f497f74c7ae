#include "doctest.h"

#include "../support/spen_check.hpp"

#include "ematrace/spen.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace ematrace;
using namespace ematrace::spen;
using ematrace::testing::check_gradients;
using ematrace::testing::gradcheck_model;
using ematrace::testing::random_batch;

namespace {

const PredictorKind kAllKinds[] = {PredictorKind::Static, PredictorKind::LinearAttention,
                                   PredictorKind::SoftmaxAttention, PredictorKind::ProjectedStatic};

SpenConfig tiny_config(PredictorKind kind = PredictorKind::Static) {
  SpenConfig c;
  c.d_model = 8;
  c.d_ff = 16;
  c.k_active = 4;
  c.vocab_size = 13;
  c.seq_len = 64;
  c.predictor = kind;
  c.n_heads = 2;
  c.proj_dim = 4;
  c.chunk_len = 7;
  c.init_std = 0.3;
  return c;
}

SpenModel<double> randomised(const SpenConfig& c, std::uint64_t seed) {
  SpenModel<double> m(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& b : m.params().blocks) {
    b.w_down = Matrix<double>::NullaryExpr(b.w_down.rows(), b.w_down.cols(), [&] { return n(rng); });
  }
  return m;
}

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major scalar matrix

Mat to_mat(const Matrix<double>& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

Vec matvec(const Mat& a, const Vec& x) {
  Vec y(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += a[i][j] * x[j];
  return y;
}

// Step-by-step evaluation of the block recurrence with plain loops, static
// predictor, for every token of `tokens`. Returns the logits.
Mat scalar_oracle(const SpenModel<double>& model, const std::vector<int>& tokens) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const double a[3] = {cfg.alpha_fast, cfg.alpha_mid, cfg.alpha_slow};
  std::vector<std::array<Vec, 3>> traces(static_cast<std::size_t>(cfg.n_blocks), {Vec(d, 0.0), Vec(d, 0.0), Vec(d, 0.0)});
  const Mat emb = to_mat(P.embedding);
  Mat logits;
  for (int tok : tokens) {
    Vec x = emb[static_cast<std::size_t>(tok)];
    for (int b = 0; b < cfg.n_blocks; ++b) {
      const auto& bp = P.blocks[static_cast<std::size_t>(b)];
      auto& tr = traces[static_cast<std::size_t>(b)];
      for (int j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < d; ++i) tr[j][i] = (1.0 - a[j]) * tr[j][i] + a[j] * x[i];
      double norm = 0.0;
      for (double v : tr[2]) norm += v * v;
      norm = std::sqrt(norm);
      Vec hbar(d, 0.0);
      if (norm >= 1e-8)
        for (std::size_t i = 0; i < d; ++i) hbar[i] = tr[2][i] / norm;
      const Vec xhat = matvec(to_mat(bp.pred.w_pred), hbar);
      Vec e(d);
      for (std::size_t i = 0; i < d; ++i) e[i] = x[i] - xhat[i];
      const Vec wf = matvec(to_mat(bp.w_f), tr[0]), wm = matvec(to_mat(bp.w_m), tr[1]),
                ws = matvec(to_mat(bp.w_s), tr[2]), we = matvec(to_mat(bp.w_e), e);
      Vec c(d);
      for (std::size_t i = 0; i < d; ++i) c[i] = x[i] + wf[i] + wm[i] + ws[i] + we[i];
      double mu = 0.0, var = 0.0;
      for (double v : c) mu += v / static_cast<double>(d);
      for (double v : c) var += (v - mu) * (v - mu) / static_cast<double>(d);
      Vec ln(d);
      for (std::size_t i = 0; i < d; ++i)
        ln[i] = (c[i] - mu) / std::sqrt(var + cfg.ln_eps) * bp.ln_gain(static_cast<Index>(i), 0) +
                bp.ln_bias(static_cast<Index>(i), 0);
      const Vec u = matvec(to_mat(bp.w_up), ln);
      Vec g(u.size());
      for (std::size_t j = 0; j < u.size(); ++j) g[j] = 0.5 * u[j] * (1.0 + std::erf(u[j] / std::sqrt(2.0)));
      // k largest, lowest index on ties: repeated argmax.
      Vec z(g.size(), 0.0);
      std::vector<bool> taken(g.size(), false);
      for (Index r = 0; r < cfg.k_active; ++r) {
        std::size_t best = g.size();
        for (std::size_t j = 0; j < g.size(); ++j)
          if (!taken[j] && (best == g.size() || g[j] > g[best])) best = j;
        taken[best] = true;
        z[best] = g[best];
      }
      const Vec down = matvec(to_mat(bp.w_down), z);
      for (std::size_t i = 0; i < d; ++i) x[i] += down[i];
    }
    logits.push_back(matvec(emb, x));
  }
  return logits;
}

double max_gap(const Mat& a, const SeqMatrix<double>& b) {
  double g = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t v = 0; v < a[t].size(); ++v)
      g = std::max(g, std::abs(a[t][v] - b(static_cast<Index>(t), static_cast<Index>(v))));
  return g;
}

}  // namespace

TEST_CASE("GELU") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(gelu(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  for (double u : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
    CHECK(gelu_grad(u) == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("top-k rows") {
  SeqMatrix<double> z(1, 3);
  z << 3, 1, 2;
  SeqMatrix<double> mask;
  const auto out = topk_rows(z, 2, &mask);
  SeqMatrix<double> e(1, 3);
  e << 3, 0, 2;
  CHECK(out == e);
  CHECK(mask.sum() == 2.0);
  CHECK(topk_rows(z, 3, &mask) == z);
  CHECK(mask.minCoeff() == 1.0);

  SeqMatrix<double> tie(1, 4);
  tie << 1, 5, 5, 5;
  e.resize(1, 4);
  e << 0, 5, 5, 0;
  CHECK(topk_rows(tie, 2) == e);
  CHECK_THROWS_AS(topk_rows(z, 4), std::invalid_argument);
}

TEST_CASE("straight-through gradient equals the no-mask gradient") {
  // L(z) = sum w_j topk(z)_j. The identity estimator passes dL/dtopk through
  // unchanged, which is the gradient of the surrogate z -> z - frozen offset.
  SeqMatrix<double> z(1, 6);
  z << 0.3, -1.2, 2.0, 0.9, -0.1, 1.4;
  RowVector<double> w(6);
  w << 0.5, -0.3, 1.0, 2.0, -1.5, 0.7;
  const SeqMatrix<double> offset = z - topk_rows(z, 3);
  for (Index j = 0; j < 6; ++j) {
    SeqMatrix<double> zp = z, zm = z;
    zp(0, j) += 1e-6;
    zm(0, j) -= 1e-6;
    const double fd = ((w.array() * (zp - offset).array()).sum() - (w.array() * (zm - offset).array()).sum()) / 2e-6;
    CHECK(fd == doctest::Approx(w(j)).epsilon(1e-8));
  }
}

TEST_CASE("load-balance loss") {
  const Index d_ff = 4;
  // Uniform: 4 tokens, each selecting a different unit, equal pre-activations.
  SeqMatrix<double> u = SeqMatrix<double>::Zero(4, d_ff);
  SeqMatrix<double> mask = SeqMatrix<double>::Identity(4, 4);
  CHECK(load_balance_loss(u, mask, 1) == doctest::Approx(1.0));

  // Every token picks units 0 and 1.
  SeqMatrix<double> same = SeqMatrix<double>::Zero(3, d_ff);
  same.leftCols(2).setOnes();
  SeqMatrix<double> pre(3, d_ff);
  pre << 2, 1, 0, -1, 3, 2, 0, 0, 1, 1, -2, -2;
  CHECK(load_balance_loss(pre, same, 2) > 1.0);

  // Hand case: 2 tokens, 4 units, k = 2.
  SeqMatrix<double> p2(2, 4), m2(2, 4);
  p2 << 1.0, 0.0, 0.5, -1.0, 0.0, 2.0, 0.0, 1.0;
  m2 << 1, 0, 1, 0, 0, 1, 0, 1;
  double expected = 0.0;
  {
    double pbar[4] = {0, 0, 0, 0};
    for (int t = 0; t < 2; ++t) {
      double z = 0.0;
      for (int i = 0; i < 4; ++i) z += std::exp(p2(t, i));
      for (int i = 0; i < 4; ++i) pbar[i] += std::exp(p2(t, i)) / z / 2.0;
    }
    for (int i = 0; i < 4; ++i) expected += 4.0 * ((m2(0, i) + m2(1, i)) / (2.0 * 2.0)) * pbar[i];
  }
  CHECK(load_balance_loss(p2, m2, 2) == doctest::Approx(expected).epsilon(1e-14));

  CHECK_THROWS_AS(load_balance_loss(SeqMatrix<double>(0, 4), SeqMatrix<double>(0, 4), 1), std::invalid_argument);
}

TEST_CASE("load-balance bound holds per token, not per batch") {
  // One token whose selection is the top-k of its own pre-activations: the
  // selected units hold at least k / d_ff of the softmax mass.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    SeqMatrix<double> u = SeqMatrix<double>::NullaryExpr(1, 12, [&] { return n(rng); });
    SeqMatrix<double> mask;
    topk_rows(u, 3, &mask);
    CHECK(load_balance_loss(u, mask, 3) >= 1.0 - 1e-9);
  }
  // Two tokens: f = (1/2, 1/2, 0) and mean softmax (0.17, 0.415, 0.415) give
  // 3 * (0.085 + 0.2075), below one.
  SeqMatrix<double> u(2, 3), mask(2, 3);
  u << std::log(0.34), std::log(0.33), std::log(0.33), -1e3, 0.0, 0.0;
  mask << 1, 0, 0, 0, 1, 0;
  CHECK(load_balance_loss(u, mask, 1) == doctest::Approx(0.8775).epsilon(1e-9));
}

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.k_active = 17;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.alpha_mid = 0.6;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  const SpenConfig def;
  CHECK(static_cast<double>(def.k_active) / static_cast<double>(def.d_ff) ==
        doctest::Approx(184.0 / 3072.0).epsilon(0.05));
}

TEST_CASE("initialisation") {
  auto c = tiny_config();
  c.init_std = 0.02;
  SpenModel<double> m(c, 3);
  for (const auto& b : m.params().blocks) {
    CHECK(b.w_down.isZero());
    CHECK(b.ln_bias.isZero());
    CHECK(b.ln_gain == Matrix<double>::Ones(c.d_model, 1));
    CHECK(b.w_up.rows() == c.d_ff);
  }
  CHECK(m.params().head.size() == 0);
  CHECK(&m.head() == &m.params().embedding);
  CHECK(SpenModel<double>(c, 3).hash() == m.hash());
  CHECK(SpenModel<double>(c, 4).hash() != m.hash());
}

TEST_CASE("forward shapes and input checks") {
  auto m = randomised(tiny_config(), 1);
  const auto fp = forward_sequence(m, {3});
  CHECK(fp.logits.rows() == 1);
  CHECK(fp.logits.cols() == 13);
  CHECK_THROWS_AS(forward_sequence(m, std::vector<int>(65, 1)), std::invalid_argument);
  CHECK_THROWS_AS(forward_sequence(m, {13}), std::invalid_argument);
  CHECK_THROWS_AS(forward_sequence(m, {}), std::invalid_argument);
  m.params().blocks[0].w_up(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward_sequence(m, {1, 2}), std::domain_error);
}

TEST_CASE("zero weights and zero down-projection are the identity") {
  for (auto kind : kAllKinds) {
    auto m = randomised(tiny_config(kind), 2);
    const std::vector<int> in{1, 4, 4, 0, 12, 7};
    for (auto& b : m.params().blocks) b.w_down.setZero();
    auto fp = forward_sequence(m, in);
    for (std::size_t t = 0; t < in.size(); ++t) {
      CHECK(fp.x_out.row(static_cast<Index>(t)) == m.params().embedding.row(in[t]));
    }
    m.params().visit(m.config(), [](const std::string& name, Matrix<double>& w, bool, bool) {
      if (name != "embedding") w.setZero();
    });
    fp = forward_sequence(m, in);
    CHECK((fp.logits - fp.x_out * m.params().embedding.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t t = 0; t < in.size(); ++t) {
      CHECK(fp.x_out.row(static_cast<Index>(t)) == m.params().embedding.row(in[t]));
    }
  }
}

TEST_CASE("scalar oracle, d = 4") {
  SpenConfig c;
  c.d_model = 4;
  c.d_ff = 6;
  c.k_active = 2;
  c.vocab_size = 5;
  c.seq_len = 16;
  c.init_std = 0.5;
  c.chunk_len = 3;
  auto m = randomised(c, 11);
  for (auto& b : m.params().blocks) {
    b.ln_gain.array() += 0.25;
    b.ln_bias.setConstant(0.1);
  }
  const std::vector<int> in{0, 3, 1, 1, 4, 2, 0, 3};
  CHECK(max_gap(scalar_oracle(m, in), forward_sequence(m, in).logits) < 1e-10);

  // k = d_ff: the dense network.
  m.mutable_config().k_active = 6;
  CHECK(max_gap(scalar_oracle(m, in), forward_sequence(m, in).logits) < 1e-10);
}

TEST_CASE("dense k equals a forward with the selection removed") {
  auto c = tiny_config();
  c.k_active = c.d_ff;
  const auto m = randomised(c, 5);
  const std::vector<int> in{2, 3, 5, 7, 11, 0};
  const auto fp = forward_sequence(m, in);
  for (const auto& b : fp.blocks) {
    CHECK(b.z == b.g);
    CHECK(b.mask.minCoeff() == 1.0);
  }
}

TEST_CASE("exactly k units are active per token") {
  const auto m = randomised(tiny_config(), 6);
  std::vector<int> in(40);
  std::iota(in.begin(), in.end(), 0);
  for (auto& t : in) t %= 13;
  const auto fp = forward_sequence(m, in);
  for (const auto& b : fp.blocks) {
    for (Index t = 0; t < b.z.rows(); ++t) CHECK((b.z.row(t).array() != 0.0).count() == 4);
  }
}

TEST_CASE("causality") {
  for (auto kind : kAllKinds) {
    const auto m = randomised(tiny_config(kind), 7);
    std::vector<int> in{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const auto base = forward_sequence(m, in).logits;
    for (std::size_t t = 0; t + 1 < in.size(); ++t) {
      auto perturbed = in;
      for (std::size_t s = t + 1; s < in.size(); ++s) perturbed[s] = (perturbed[s] + 5) % 13;
      const auto l = forward_sequence(m, perturbed).logits;
      CHECK(l.topRows(static_cast<Index>(t + 1)) == base.topRows(static_cast<Index>(t + 1)));
      CHECK(l.row(static_cast<Index>(t + 1)) != base.row(static_cast<Index>(t + 1)));
    }
  }
}

TEST_CASE("frozen replay reproduces the forward pass exactly") {
  for (auto ste : {SteMode::Identity, SteMode::Masked}) {
    auto c = tiny_config();
    c.ste = ste;
    const auto m = randomised(c, 8);
    const std::vector<int> in{4, 8, 12, 1, 5, 9};
    const auto fp = forward_sequence(m, in);
    const auto frozen = capture_selection(fp);
    CHECK(forward_sequence(m, in, &frozen).logits == fp.logits);
  }
}

TEST_CASE("analytic gradients match finite differences") {
  for (auto kind : kAllKinds) {
    for (auto ste : {SteMode::Identity, SteMode::Masked}) {
      auto m = gradcheck_model(kind, ste);
      const auto batch = random_batch(2, 13, 11, 3);
      const auto r = check_gradients(m, batch, 1e-5, 3);
      INFO(predictor_name(kind), " ste=", ste == SteMode::Identity ? "identity" : "masked", " worst=", r.worst);
      CHECK(r.max_rel <= 1e-3);
      CHECK(r.checked > 300);
    }
  }
}

TEST_CASE("tied embedding gradient sums the input and output paths") {
  auto tied = gradcheck_model(PredictorKind::Static, SteMode::Identity, true);
  auto untied = gradcheck_model(PredictorKind::Static, SteMode::Identity, false);
  untied.params().embedding = tied.params().embedding;
  untied.params().head = tied.params().embedding;
  for (std::size_t b = 0; b < tied.params().blocks.size(); ++b) untied.params().blocks[b] = tied.params().blocks[b];

  const auto batch = random_batch(2, 9, 11, 4);
  auto gt = tied.params().zeros_like(tied.config());
  auto gu = untied.params().zeros_like(untied.config());
  const auto lt = batch_loss(tied, batch, &gt);
  const auto lu = batch_loss(untied, batch, &gu);
  CHECK(lt.total == doctest::Approx(lu.total).epsilon(1e-14));
  CHECK((gt.embedding - gu.embedding - gu.head).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(gu.head.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("embedding row changes both the input and the logit of its token") {
  auto m = randomised(tiny_config(), 9);
  const std::vector<int> without{0, 1, 2, 3};
  const std::vector<int> with{0, 5, 2, 3};
  const auto a = forward_sequence(m, without).logits;
  const auto b = forward_sequence(m, with).logits;
  m.params().embedding.row(5) *= -1.0;
  const auto a2 = forward_sequence(m, without).logits;
  const auto b2 = forward_sequence(m, with).logits;
  CHECK(a2.col(5) != a.col(5));           // output pathway
  for (Index v = 0; v < 13; ++v) {
    if (v != 5) CHECK(a2.col(v) == a.col(v));
  }
  CHECK(b2.col(0) != b.col(0));           // input pathway
}

TEST_CASE("training and inference paths agree") {
  for (auto kind : kAllKinds) {
    const auto m64 = randomised([&] {
      auto c = tiny_config(kind);
      c.seq_len = 256;
      c.chunk_len = 64;
      c.init_std = 0.1;
      return c;
    }(), 10);
    std::mt19937_64 rng(1);
    std::vector<int> seq(257);
    for (auto& t : seq) t = static_cast<int>(rng() % 13);
    const std::vector<int> in(seq.begin(), seq.end() - 1);

    const auto m32 = m64.cast<float>();
    CHECK(testing::dual_path_gap(m32, in) <= 1e-4);
    const auto [train, infer] = testing::dual_path_ce(m64, seq);
    CHECK(std::abs(train - infer) <= 1e-6);
  }
}

TEST_CASE("untrained cross-entropy is close to ln V") {
  SpenConfig c;
  c.vocab_size = 45;
  const SpenModel<double> m(c, 1);
  const auto batch = random_batch(2, 257, 45, 2);
  const double ce = batch_loss<double>(m, batch, nullptr).ce;
  CHECK(std::abs(ce - std::log(45.0)) < 0.02);
}

TEST_CASE("streaming perplexity") {
  SpenConfig c;
  c.vocab_size = 30;
  const SpenModel<float> m(c, 2);
  std::mt19937_64 rng(3);
  std::vector<int> stream(1001);
  for (auto& t : stream) t = static_cast<int>(rng() % 30);
  const auto ppl = perplexity_stream(m, stream, 200);
  CHECK(ppl.size() == 5);
  for (double p : ppl) CHECK(p == doctest::Approx(30.0).epsilon(0.03));
  CHECK_THROWS_AS(perplexity_stream(m, std::vector<int>(200, 1), 200), std::invalid_argument);

  const auto w = windowed_ppl({1.0, 1.0, 0.0, 2.0, 5.0}, 2);
  REQUIRE(w.size() == 2);
  CHECK(w[0] == doctest::Approx(std::exp(1.0)));
  CHECK(w[1] == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("zeroed traces remove every trace path") {
  auto c = tiny_config();
  c.zero_traces = true;
  const auto m = randomised(c, 12);
  // With the traces gone a token's logits depend on that token alone.
  const auto a = forward_sequence(m, {1, 2, 3}).logits;
  const auto b = forward_sequence(m, {7, 9, 3}).logits;
  CHECK((a.row(2) - b.row(2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(testing::dual_path_gap(m, {1, 2, 3, 4}) < 1e-12);
}

TEST_CASE("checkpoint round-trip") {
  auto c = tiny_config(PredictorKind::ProjectedStatic);
  c.ste = SteMode::Masked;
  const SpenModel<float> m = randomised(c, 13).cast<float>();
  const auto path = std::filesystem::temp_directory_path() / "ematrace_test_spen.ckpt";
  save_checkpoint(path, m, {{"note", "x"}});
  const auto back = load_checkpoint(path);
  CHECK(back.hash() == m.hash());
  CHECK(back.config().to_header() == m.config().to_header());
  CHECK(forward_sequence(back, {1, 2, 3}).logits == forward_sequence(m, {1, 2, 3}).logits);
  CHECK_THROWS(save_checkpoint(path, m, {{"d_model", "3"}}));
  std::filesystem::remove(path);
}
