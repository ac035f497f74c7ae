#pragma once

// Micro-scale training loop: random windows of the token stream, AdamW,
// one loss record per step.

#include "ematrace/optim.hpp"
#include "ematrace/spen.hpp"
#include "ematrace/types.hpp"

#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ematrace::spen {

struct TrainConfig {
  SpenConfig model;
  AdamWConfig optim;
  int steps = 500;
  int batch_size = 8;
  std::uint64_t seed = 1;
  int eval_sequences = 32;  // held-out windows scored at the end
  int log_every = 50;
};

struct StepRecord {
  int step = 0;
  double ce = 0.0;
  double lb = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  SpenModel<float> model;
  std::vector<StepRecord> curve;
  double eval_ce = 0.0;  // NaN when no held-out tokens were given
  double seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// `count` windows of `len` tokens at uniformly random offsets.
std::vector<std::vector<int>> sample_windows(std::mt19937_64& rng, const std::vector<int>& tokens, int count,
                                             Index len);

// Mean next-token CE over `n_sequences` evenly spaced windows of seq_len + 1
// tokens, training mode, no load-balance term.
template <typename Scalar>
double evaluate_ce(const SpenModel<Scalar>& model, const std::vector<int>& tokens, int n_sequences);

// Throws DivergenceError when the loss or gradient goes non-finite.
TrainResult train_micro(const TrainConfig& config, const std::vector<int>& train_tokens,
                        const std::vector<int>& heldout_tokens = {}, const Logger& log = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve);

}  // namespace ematrace::spen
