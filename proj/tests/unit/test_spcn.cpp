#include "doctest.h"

#include "ematrace/spcn.hpp"

#include <cmath>
#include <random>

using namespace ematrace;
using namespace ematrace::spcn;

namespace {

SpcnConfig small_config(Index input_dim = 12) {
  SpcnConfig c;
  c.input_dim = input_dim;
  c.dims = {16, 8, 6, 4};
  c.k_active = {4, 4, 4, 4};
  return c;
}

Index nonzeros(const Vector<double>& v) { return (v.array() != 0.0).count(); }

}  // namespace

TEST_CASE("default configuration") {
  SpcnConfig c;
  Hierarchy<double> h(c, 0);
  CHECK(h.level_config(0).alpha_fast == doctest::Approx(0.5));
  CHECK(h.level_config(0).alpha_slow == doctest::Approx(0.075));
  for (int l = 0; l < kLevels; ++l) {
    CHECK(std::abs(h.level_config(l).alpha_slow - 0.15 * h.level_config(l).alpha_fast) < 1e-12);
  }
  CHECK(h.weights(0).w_ff.rows() == 512);
  CHECK(h.weights(0).w_ff.cols() == grammar::kVocabSize);
  CHECK(h.weights(kLevels - 1).w_fb.size() == 0);
  CHECK(h.k_active(0) == 25);
  CHECK(h.k_active(3) == 4);
  // Slow L0 window of about 13 tokens.
  CHECK(1.0 / h.level_config(0).alpha_slow == doctest::Approx(13.3).epsilon(0.01));
}

TEST_CASE("initialisation law") {
  SpcnConfig c;
  Hierarchy<double> a(c, 3), b(c, 3), other(c, 4);
  for (int l = 0; l < kLevels; ++l) {
    CHECK(a.weights(l).w_ff == b.weights(l).w_ff);
    CHECK(a.weights(l).w_lat == b.weights(l).w_lat);
    CHECK(a.weights(l).w_fb == b.weights(l).w_fb);
    CHECK(a.state(l).precision == Vector<double>::Ones(c.dims[static_cast<std::size_t>(l)]));
    CHECK(a.state(l).err_var.isZero());
    CHECK(a.state(l).trace_fast.isZero());
  }
  CHECK(a.weights(0).w_ff != other.weights(0).w_ff);

  // Rows of N(0, 1/fan_in) have unit expected squared norm.
  for (int l = 0; l < kLevels; ++l) {
    const auto& w = a.weights(l).w_ff;
    CHECK(w.rowwise().norm().mean() == doctest::Approx(1.0).epsilon(0.1));
    CHECK(std::abs(w.mean()) < 0.005);
  }
}

TEST_CASE("k_active larger than dim is rejected") {
  auto c = small_config();
  c.k_active = {17, 4, 4, 4};
  CHECK_THROWS_AS(Hierarchy<double>(c, 0), std::invalid_argument);
}

TEST_CASE("settle rejects inputs that are not one-hot") {
  Hierarchy<double> h(small_config(), 1);
  Vector<double> v = Vector<double>::Zero(12);
  CHECK_THROWS_AS(h.settle(v), std::invalid_argument);
  v[2] = 1.0;
  v[3] = 1.0;
  CHECK_THROWS_AS(h.settle(v), std::invalid_argument);
  v[3] = 0.0;
  CHECK_NOTHROW(h.settle(v));
  CHECK_THROWS_AS(h.settle(Vector<double>::Unit(5, 1)), std::invalid_argument);
}

TEST_CASE("all-zero weights settle to zero") {
  Hierarchy<double> h(small_config(), 1);
  for (int l = 0; l < kLevels; ++l) {
    h.weights(l).w_ff.setZero();
    h.weights(l).w_lat.setZero();
    h.weights(l).w_fb.setZero();
  }
  h.settle_index(5);
  for (int l = 0; l < kLevels; ++l) CHECK(h.state(l).x.isZero());
}

TEST_CASE("feedforward pathway in isolation") {
  auto c = small_config();
  c.fb_gain = 0.0;
  c.lat_gain = 0.0;
  c.settle_steps = 1;
  Hierarchy<double> h(c, 2);
  h.settle_index(7);
  const Vector<double> expected = topk_positive<double>(h.weights(0).w_ff.col(7), 4);
  CHECK(h.state(0).x == expected);
}

TEST_CASE("full k equals the rectified dense recursion") {
  auto c = small_config();
  c.dims = {8, 8, 8, 8};
  c.k_active = {8, 8, 8, 8};
  c.use_spa = false;
  Hierarchy<double> h(c, 5);
  h.step(3, false);
  h.step(9, false);

  // Oracle: same sweep written densely.
  std::array<Vector<double>, kLevels> x;
  for (int l = 0; l < kLevels; ++l) x[static_cast<std::size_t>(l)] = h.state(l).x;
  h.settle_index(4);
  const Vector<double> input = Vector<double>::Unit(12, 4);
  for (int it = 0; it < 3; ++it) {
    for (int l = 0; l < kLevels; ++l) {
      const auto i = static_cast<std::size_t>(l);
      const auto& w = h.weights(l);
      Vector<double> pre = c.ff_gain * w.w_ff * (l == 0 ? input : x[i - 1]);
      if (l + 1 < kLevels) pre += c.fb_gain * w.w_fb * x[i + 1];
      pre += c.lat_gain * w.w_lat * x[i];
      x[i] = pre.cwiseMax(0.0);
    }
  }
  for (int l = 0; l < kLevels; ++l) {
    CHECK((h.state(l).x - x[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("top-k keeps the largest positive entries") {
  Vector<double> v(6);
  v << 0.3, -1.0, 0.9, 0.3, 0.0, 0.5;
  Vector<double> e(6);
  e << 0.3, 0.0, 0.9, 0.0, 0.0, 0.5;
  CHECK(topk_positive<double>(v, 3) == e);  // tie at 0.3 goes to index 0
  CHECK(nonzeros(topk_positive<double>(v, 10)) == 4);
}

TEST_CASE("SPA buffer") {
  SpaBuffer<double> spa(8, 4);
  CHECK(spa.context(Vector<double>::Ones(8), 8).isZero());

  Vector<double> v(8);
  v << 1, 2, 0, 0, 0, 0, 0, 3;
  spa.push(v);
  CHECK(spa.context(Vector<double>::Unit(8, 4), 8) == v);
  CHECK(spa.context(-v, 8) == v);

  // Eight orthogonal entries, query aligned with entry 3.
  spa.clear();
  for (int i = 0; i < 12; ++i) spa.push(Vector<double>::Unit(8, i % 8));
  CHECK(spa.size() == 8);
  spa.clear();
  for (int i = 0; i < 8; ++i) spa.push((i + 1.0) * Vector<double>::Unit(8, i));
  Vector<double> q = Vector<double>::Unit(8, 3) + 0.01 * Vector<double>::Ones(8);
  const auto order = spa.rank(q);
  CHECK(order.front() == 3);
  // Brute force: entry 3 has the largest cosine among all eight.
  for (Index i = 0; i < 8; ++i) {
    const double cos_i = spa.entry(i).dot(q) / (spa.entry(i).norm() * q.norm());
    const double cos_3 = spa.entry(3).dot(q) / (spa.entry(3).norm() * q.norm());
    CHECK(cos_3 >= cos_i);
  }
  const Vector<double> ctx = spa.context(q, 8);
  CHECK(ctx[3] == doctest::Approx(4.0 / 4.0));  // entry 3 is 4 e_3, averaged over 4

  SpaBuffer<double> unit(8, 4, true);
  unit.push(3.0 * Vector<double>::Unit(4, 1));
  CHECK(unit.context(Vector<double>::Ones(4), 4) == Vector<double>::Unit(4, 1));
}

TEST_CASE("PGHU with no activity above is pure decay") {
  auto c = small_config();
  Hierarchy<double> h(c, 6);
  h.state(0).x = Vector<double>::Random(16).cwiseMax(0.0);
  h.state(1).x.setZero();
  const Matrix<double> before = h.weights(0).w_fb;
  h.pghu_update(0);
  CHECK((h.weights(0).w_fb - (1.0 - c.weight_decay) * before).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("PGHU with a perfect prediction has no Hebbian term") {
  auto c = small_config();
  Hierarchy<double> h(c, 6);
  h.state(1).x = Vector<double>::Unit(8, 2);
  h.state(0).x = h.weights(0).w_fb * h.state(1).x;
  const Matrix<double> before = h.weights(0).w_fb;
  h.pghu_update(0);
  CHECK((h.weights(0).w_fb - (1.0 - c.weight_decay) * before).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(h.state(0).err_var.isZero());
}

TEST_CASE("PGHU matches a scalar oracle on a 3 x 2 system") {
  SpcnConfig c;
  c.input_dim = 4;
  c.dims = {3, 2, 2, 2};
  c.k_active = {3, 2, 2, 2};
  c.precision_eps = 1e-2;
  Hierarchy<double> h(c, 7);
  auto& s = h.state(0);
  s.x << 0.5, 0.0, 1.2;
  h.state(1).x << 0.8, 0.3;
  s.precision << 1.0, 4.0, 0.5;
  s.err_var << 0.2, 0.0, 1.5;
  const Matrix<double> W = h.weights(0).w_fb;
  const Vector<double> x = s.x, above = h.state(1).x, pi = s.precision, ev = s.err_var;

  h.pghu_update(0);

  for (int j = 0; j < 3; ++j) {
    double pred = 0.0;
    for (int k = 0; k < 2; ++k) pred += W(j, k) * above[k];
    const double raw = x[j] - pred;
    const double e = pi[j] * raw;
    for (int k = 0; k < 2; ++k) {
      const double dw = c.eta * pi[j] * e * above[k] - c.weight_decay * W(j, k);
      CHECK(h.weights(0).w_fb(j, k) == doctest::Approx(W(j, k) + dw).epsilon(1e-12));
    }
    const double v = c.precision_rho * ev[j] + (1.0 - c.precision_rho) * raw * raw;
    CHECK(s.err_var[j] == doctest::Approx(v).epsilon(1e-12));
    const double p = std::clamp(1.0 / (v + c.precision_eps), c.pi_min, c.pi_max);
    CHECK(s.precision[j] == doctest::Approx(p).epsilon(1e-12));
  }
  CHECK_THROWS_AS(h.pghu_update(kLevels - 1), std::invalid_argument);
}

TEST_CASE("trace updates") {
  Hierarchy<double> h(small_config(), 8);
  h.state(0).x = Vector<double>::Unit(16, 1);
  h.update_traces(0);
  CHECK(h.state(0).trace_fast == 0.5 * Vector<double>::Unit(16, 1));

  const Vector<double> bar = Vector<double>::LinSpaced(16, 0.0, 1.0);
  h.reset_sentence();
  for (int t = 0; t < 1000; ++t) {
    h.state(0).x = bar;
    h.update_traces(0);
  }
  CHECK((h.state(0).trace_fast - bar).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((h.state(0).trace_slow - bar).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("trace updates are linear in the activation stream") {
  Hierarchy<double> a(small_config(), 9), b(small_config(), 9), sum(small_config(), 9);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 30; ++t) {
    const Vector<double> xa = Vector<double>::NullaryExpr(16, [&] { return u(rng); });
    const Vector<double> xb = Vector<double>::NullaryExpr(16, [&] { return u(rng); });
    a.state(0).x = xa;
    b.state(0).x = xb;
    sum.state(0).x = xa + xb;
    a.update_traces(0);
    b.update_traces(0);
    sum.update_traces(0);
  }
  CHECK((sum.state(0).trace_slow - a.state(0).trace_slow - b.state(0).trace_slow).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training keeps frozen weights, precision range and sparsity") {
  SpcnConfig c;
  c.dims = {64, 32, 16, 8};
  Hierarchy<double> fwd(c, 10), bwd(c, 11);
  const auto h_fwd = fwd.frozen_hash();
  const auto h_bwd = bwd.frozen_hash();
  const auto data = grammar::generate_dataset(grammar::build_grammar(grammar::Variant::A), 100, 3);
  const auto& vocab = grammar::Vocabulary::instance();
  for (const auto& s : data) {
    fwd.reset_sentence();
    for (const auto& w : s.tokens) {
      fwd.step(vocab.index(w), true);
      for (int l = 0; l < kLevels; ++l) {
        CHECK(nonzeros(fwd.state(l).x) <= fwd.k_active(l));
        CHECK(fwd.state(l).precision.minCoeff() >= c.pi_min);
        CHECK(fwd.state(l).precision.maxCoeff() <= c.pi_max);
      }
    }
  }
  train_corpus(fwd, bwd, data);
  CHECK(fwd.frozen_hash() == h_fwd);
  CHECK(bwd.frozen_hash() == h_bwd);
}

TEST_CASE("representation widths and per-sentence independence") {
  SpcnConfig c;
  Hierarchy<double> fwd(c, 1), bwd(c, 2);
  auto data = grammar::generate_dataset(grammar::build_grammar(grammar::Variant::A), 12, 5);
  const auto rep = process_corpus(fwd, bwd, data, false);
  CHECK(rep.activation().cols() == 1024);
  CHECK(rep.traces().cols() == 2048);
  CHECK(rep.combined().cols() == 3072);
  CHECK(rep.forward_only().cols() == 1536);
  CHECK(rep.levels.size() == 3);
  CHECK(rep.n_tokens() == static_cast<Index>(grammar::count_tokens(data)));

  // Permuting sentences in eval mode permutes rows only.
  std::vector<grammar::LabeledSentence> swapped{data[1], data[0]};
  std::vector<grammar::LabeledSentence> first_two{data[0], data[1]};
  const auto r1 = process_corpus(fwd, bwd, first_two, false);
  const auto r2 = process_corpus(fwd, bwd, swapped, false);
  const Index n0 = static_cast<Index>(data[0].tokens.size());
  const Index n1 = static_cast<Index>(data[1].tokens.size());
  CHECK(r1.combined().topRows(n0) == r2.combined().bottomRows(n0));
  CHECK(r1.combined().bottomRows(n1) == r2.combined().topRows(n1));

  CHECK_THROWS_AS(process_corpus(fwd, bwd, {grammar::LabeledSentence{}}, false), std::invalid_argument);
}

TEST_CASE("single-token sentence has the same sparsity in both directions") {
  SpcnConfig c;
  Hierarchy<double> fwd(c, 1), bwd(c, 2);
  grammar::LabeledSentence s{{"cat"}, {grammar::Role::NounSubject}, grammar::Structure::Intransitive,
                             grammar::Variant::A};
  const auto rep = process_corpus(fwd, bwd, {s}, false);
  const auto& r = rep.levels[0];
  CHECK((r.x_fwd.array() != 0.0f).count() == (r.x_bwd.array() != 0.0f).count());
  CHECK(r.x_fwd != r.x_bwd);
}

TEST_CASE("bidirectional symmetry under reversal and swapped seeds") {
  SpcnConfig c;
  c.dims = {64, 32, 16, 8};
  auto data = grammar::generate_dataset(grammar::build_grammar(grammar::Variant::A), 5, 9);
  std::vector<grammar::LabeledSentence> reversed = data;
  for (auto& s : reversed) {
    std::reverse(s.tokens.begin(), s.tokens.end());
    std::reverse(s.roles.begin(), s.roles.end());
  }
  Hierarchy<double> f1(c, 1), b1(c, 2), f2(c, 2), b2(c, 1);
  const auto r1 = process_corpus(f1, b1, data, false, 1);
  const auto r2 = process_corpus(f2, b2, reversed, false, 1);
  Index row = 0;
  for (const auto& s : data) {
    const Index n = static_cast<Index>(s.tokens.size());
    for (Index t = 0; t < n; ++t) {
      CHECK(r1.levels[0].x_fwd.row(row + t) == r2.levels[0].x_bwd.row(row + n - 1 - t));
      CHECK(r1.levels[0].slow_bwd.row(row + t) == r2.levels[0].slow_fwd.row(row + n - 1 - t));
    }
    row += n;
  }
}

TEST_CASE("one noun swap changes the final slow trace by a bounded amount") {
  // Two runs that differ only at one position. The difference in the final
  // slow trace is bounded by the settled-state difference at that token
  // propagated through the later decay and the downstream settles; the
  // paired-run oracle measures both terms directly.
  SpcnConfig c;
  c.use_spa = false;
  Hierarchy<double> h1(c, 4), h2(c, 4);
  const auto& vocab = grammar::Vocabulary::instance();
  const std::vector<std::string> a{"the", "cat", "chases", "the", "dog"};
  std::vector<std::string> b = a;
  b[1] = "fox";
  double bound = 0.0;
  const double as = h1.level_config(0).alpha_slow;
  for (std::size_t t = 0; t < a.size(); ++t) {
    h1.step(vocab.index(a[t]), false);
    h2.step(vocab.index(b[t]), false);
    const double dx = (h1.state(0).x - h2.state(0).x).norm();
    bound = (1.0 - as) * bound + as * dx;
  }
  const double diff = (h1.state(0).trace_slow - h2.state(0).trace_slow).norm();
  CHECK(diff > 0.0);
  CHECK(diff <= bound + 1e-12);
}
