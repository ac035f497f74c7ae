#include "ematrace/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace ematrace::spen {

std::vector<std::vector<int>> sample_windows(std::mt19937_64& rng, const std::vector<int>& tokens, int count,
                                             Index len) {
  if (static_cast<Index>(tokens.size()) < len) {
    throw std::invalid_argument("corpus has " + std::to_string(tokens.size()) + " tokens, need at least " +
                                std::to_string(len));
  }
  std::uniform_int_distribution<std::size_t> offset(0, tokens.size() - static_cast<std::size_t>(len));
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto o = static_cast<std::ptrdiff_t>(offset(rng));
    out.emplace_back(tokens.begin() + o, tokens.begin() + o + static_cast<std::ptrdiff_t>(len));
  }
  return out;
}

template <typename Scalar>
double evaluate_ce(const SpenModel<Scalar>& model, const std::vector<int>& tokens, int n_sequences) {
  const auto len = static_cast<std::size_t>(model.config().seq_len + 1);
  if (tokens.size() < len || n_sequences < 1) throw std::invalid_argument("evaluate_ce: not enough tokens");
  const std::size_t span = tokens.size() - len;
  double total = 0.0;
  for (int i = 0; i < n_sequences; ++i) {
    const std::size_t o = n_sequences == 1 ? 0 : span * static_cast<std::size_t>(i) / static_cast<std::size_t>(n_sequences - 1);
    const std::vector<int> inputs(tokens.begin() + static_cast<std::ptrdiff_t>(o),
                                  tokens.begin() + static_cast<std::ptrdiff_t>(o + len - 1));
    const std::vector<int> targets(tokens.begin() + static_cast<std::ptrdiff_t>(o + 1),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(o + len));
    total += sequence_loss(model, forward_sequence(model, inputs), targets).ce;
  }
  return total / n_sequences;
}

TrainResult train_micro(const TrainConfig& config, const std::vector<int>& train_tokens,
                        const std::vector<int>& heldout_tokens, const Logger& log) {
  if (config.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result{SpenModel<float>(config.model, config.seed), {}, std::numeric_limits<double>::quiet_NaN(), 0.0};
  auto& model = result.model;
  AdamW<float> opt(config.optim, model);
  SpenParams<float> grad = model.params().zeros_like(model.config());
  std::mt19937_64 rng(hash_combine(config.seed, 0xda7a));

  for (int step = 0; step < config.steps; ++step) {
    const auto batch = sample_windows(rng, train_tokens, config.batch_size, config.model.seq_len + 1);
    grad.set_zero(model.config());
    LossParts loss;
    try {
      loss = batch_loss(model, batch, &grad);
    } catch (const std::domain_error& e) {
      throw DivergenceError(step, "divergence at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss.total)) {
      throw DivergenceError(step, "divergence at step " + std::to_string(step) + ": loss is " +
                                      std::to_string(loss.total));
    }
    const double lr = lr_at(config.optim, step, config.steps);
    double norm = 0.0;
    try {
      norm = opt.step(model, grad, lr);
    } catch (const std::domain_error& e) {
      throw DivergenceError(step, "divergence at step " + std::to_string(step) + ": " + e.what());
    }
    result.curve.push_back({step, loss.ce, loss.lb, lr, norm});
    if (log && config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %d ce %.4f lb %.4f lr %.2e |g| %.3f", step, loss.ce, loss.lb, lr, norm);
      log(buf);
    }
  }
  if (!heldout_tokens.empty()) result.eval_ce = evaluate_ce(model, heldout_tokens, config.eval_sequences);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,ce,lb,lr,grad_norm\n";
  out.precision(9);
  for (const auto& r : curve) out << r.step << ',' << r.ce << ',' << r.lb << ',' << r.lr << ',' << r.grad_norm << '\n';
}

template double evaluate_ce<float>(const SpenModel<float>&, const std::vector<int>&, int);
template double evaluate_ce<double>(const SpenModel<double>&, const std::vector<int>&, int);

}  // namespace ematrace::spen
