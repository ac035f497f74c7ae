#include "ematrace/corpus.hpp"

#include "ematrace/grammar.hpp"
#include "ematrace/types.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ematrace::corpus {

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::string render(const grammar::LabeledSentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += s.tokens[i];
  }
  out += ". ";
  return out;
}

std::string expression(std::mt19937_64& rng, int depth) {
  if (depth == 0 || uniform_int(rng, 0, 2) == 0) return std::to_string(uniform_int(rng, 0, 9));
  static const char ops[] = {'+', '-', '*'};
  return "(" + expression(rng, depth - 1) + ops[uniform_int(rng, 0, 2)] + expression(rng, depth - 1) + ")";
}

struct Parser {
  const std::string& s;
  std::size_t pos = 0;

  [[noreturn]] void fail() const {
    throw std::invalid_argument("malformed expression at offset " + std::to_string(pos) + ": " + s);
  }
  long long term() {
    if (pos >= s.size()) fail();
    if (s[pos] == '(') {
      ++pos;
      const long long a = term();
      if (pos >= s.size()) fail();
      const char op = s[pos++];
      const long long b = term();
      if (pos >= s.size() || s[pos] != ')') fail();
      ++pos;
      switch (op) {
        case '+':
          return a + b;
        case '-':
          return a - b;
        case '*':
          return a * b;
        default:
          fail();
      }
    }
    if (s[pos] < '0' || s[pos] > '9') fail();
    long long v = 0;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') v = v * 10 + (s[pos++] - '0');
    return v;
  }
};

// Appends documents until `chars` is reached; arithmetic with probability p.
std::string build_text(std::mt19937_64& rng, const CorpusConfig& c, std::size_t chars, double p) {
  std::string out;
  std::bernoulli_distribution arith(p);
  while (out.size() < chars) {
    if (arith(rng)) {
      out += arithmetic_document(rng, uniform_int(rng, c.min_expressions, c.max_expressions), c.max_depth);
    } else {
      out += prose_document(rng, uniform_int(rng, c.min_sentences, c.max_sentences), c.topic_fraction);
    }
  }
  return out;
}

}  // namespace

std::string prose_document(std::mt19937_64& rng, int n_sentences, double topic_fraction) {
  if (!(topic_fraction > 0.0 && topic_fraction <= 1.0)) throw std::invalid_argument("topic_fraction must be in (0, 1]");
  static const grammar::Grammar full = grammar::build_grammar(grammar::Variant::A);
  grammar::Grammar g = full;
  for (auto& [category, words] : g.lexicon) {
    if (!grammar::is_content(category)) continue;
    std::shuffle(words.begin(), words.end(), rng);
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(topic_fraction * static_cast<double>(words.size()))));
    words.resize(std::min(keep, words.size()));
  }
  const auto sentences = grammar::generate_dataset(g, static_cast<std::size_t>(n_sentences), rng());
  std::string doc;
  for (const auto& s : sentences) doc += render(s);
  doc.back() = '\n';
  return doc;
}

std::string arithmetic_document(std::mt19937_64& rng, int n_expressions, int max_depth) {
  std::string doc;
  for (int i = 0; i < n_expressions; ++i) {
    std::string e = expression(rng, max_depth);
    if (e.front() != '(') e = "(" + e + "+0)";
    if (i) doc.push_back(' ');
    doc += e + "=" + std::to_string(evaluate_expression(e)) + ";";
  }
  doc.push_back('\n');
  return doc;
}

long long evaluate_expression(const std::string& expr) {
  Parser p{expr};
  const long long v = p.term();
  if (p.pos != expr.size()) p.fail();
  return v;
}

Corpus make_corpus(const CorpusConfig& config) {
  if (config.arithmetic_fraction < 0.0 || config.arithmetic_fraction > 1.0) {
    throw std::invalid_argument("arithmetic_fraction must be in [0, 1]");
  }
  if (config.min_sentences < 1 || config.max_sentences < config.min_sentences || config.min_expressions < 1 ||
      config.max_expressions < config.min_expressions || config.max_depth < 1) {
    throw std::invalid_argument("corpus document sizes must be positive and ordered");
  }
  if (!(config.topic_fraction > 0.0 && config.topic_fraction <= 1.0)) {
    throw std::invalid_argument("topic_fraction must be in (0, 1]");
  }
  Corpus c;
  std::mt19937_64 train_rng(hash_combine(config.seed, 0xc0));
  std::mt19937_64 held_rng(hash_combine(config.seed, 0xc1));
  std::mt19937_64 in_rng(hash_combine(config.seed, 0xc2));
  std::mt19937_64 shift_rng(hash_combine(config.seed, 0xc3));
  c.train = build_text(train_rng, config, config.train_chars, config.arithmetic_fraction);
  c.heldout = build_text(held_rng, config, config.heldout_chars, config.arithmetic_fraction);
  c.stream_in_distribution = build_text(in_rng, config, config.stream_chars, 0.0);
  c.stream_shifted = build_text(shift_rng, config, config.stream_chars, 1.0);
  c.stream_in_distribution.resize(config.stream_chars);
  c.stream_shifted.resize(config.stream_chars);
  return c;
}

double unigram_entropy(const std::vector<int>& tokens, int vocab_size) {
  if (tokens.empty()) throw std::invalid_argument("unigram_entropy: empty token list");
  std::vector<double> counts(static_cast<std::size_t>(vocab_size), 0.0);
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size) throw std::invalid_argument("unigram_entropy: token out of range");
    counts[static_cast<std::size_t>(t)] += 1.0;
  }
  double h = 0.0;
  const double n = static_cast<double>(tokens.size());
  for (double k : counts) {
    if (k > 0) h -= (k / n) * std::log(k / n);
  }
  return h;
}

double bigram_entropy(const std::vector<int>& tokens, int vocab_size) {
  if (tokens.size() < 2) throw std::invalid_argument("bigram_entropy: need at least two tokens");
  const auto v = static_cast<std::size_t>(vocab_size);
  std::vector<double> pair(v * v, 0.0), first(v, 0.0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const int a = tokens[i];
    const int b = tokens[i + 1];
    if (a < 0 || a >= vocab_size || b < 0 || b >= vocab_size) {
      throw std::invalid_argument("bigram_entropy: token out of range");
    }
    pair[static_cast<std::size_t>(a) * v + static_cast<std::size_t>(b)] += 1.0;
    first[static_cast<std::size_t>(a)] += 1.0;
  }
  const double n = static_cast<double>(tokens.size() - 1);
  double h = 0.0;
  for (std::size_t a = 0; a < v; ++a) {
    for (std::size_t b = 0; b < v; ++b) {
      const double k = pair[a * v + b];
      if (k > 0) h -= (k / n) * std::log(k / first[a]);
    }
  }
  return h;
}

}  // namespace ematrace::corpus
