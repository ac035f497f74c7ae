#pragma once

// Synthetic character corpus for the micro language model.
//
// Prose documents render grammar-A sentences ("the small cat chased a dog.")
// over a per-document subset of the content words.
// Arithmetic documents are bracketed integer expressions with their values
// ("((3+4)*2)=14;"). The training text mixes both genres; the evaluation
// streams are single-genre and generated from separate seeds.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ematrace::corpus {

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t train_chars = 400000;
  std::size_t heldout_chars = 40000;  // same mixture as train
  std::size_t stream_chars = 10000;   // each evaluation stream
  double arithmetic_fraction = 0.1;   // share of training documents
  // Share of each content-word category a prose document draws from; each
  // document gets its own random subset (a topic). 1 disables topics.
  double topic_fraction = 1.0;
  int min_sentences = 6;              // per prose document
  int max_sentences = 14;
  int min_expressions = 6;  // per arithmetic document
  int max_expressions = 14;
  int max_depth = 3;
};

struct Corpus {
  std::string train;
  std::string heldout;
  std::string stream_in_distribution;  // prose only
  std::string stream_shifted;          // arithmetic only
};

std::string prose_document(std::mt19937_64& rng, int n_sentences, double topic_fraction = 1.0);
std::string arithmetic_document(std::mt19937_64& rng, int n_expressions, int max_depth);

// Evaluates the integer expression grammar produced above (digits, + - *,
// parentheses). Throws on malformed input.
long long evaluate_expression(const std::string& expr);

Corpus make_corpus(const CorpusConfig& config);

// Entropy in nats of the empirical token distribution.
double unigram_entropy(const std::vector<int>& tokens, int vocab_size);

// Conditional entropy in nats of token t+1 given token t, empirical counts.
double bigram_entropy(const std::vector<int>& tokens, int vocab_size);

}  // namespace ematrace::corpus
