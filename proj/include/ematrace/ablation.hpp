#pragma once

// Predictor ablation: identical training runs that differ only in the
// predictor head, compared on held-out cross-entropy.

#include "ematrace/train.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace ematrace::ablation {

using spen::PredictorKind;

struct AblationConfig {
  spen::TrainConfig train;
  std::vector<PredictorKind> arms{PredictorKind::Static, PredictorKind::LinearAttention,
                                  PredictorKind::SoftmaxAttention};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  PredictorKind reference = PredictorKind::SoftmaxAttention;  // deltas are taken against this arm
};

struct RunResult {
  PredictorKind kind = PredictorKind::Static;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string diagnostic;
  double final_train_ce = 0.0;
  double eval_ce = 0.0;
  double seconds = 0.0;
  std::uint64_t trace_hash = 0;  // block-0 traces of the untrained model on the first batch
};

struct ArmSummary {
  PredictorKind kind = PredictorKind::Static;
  int n_runs = 0;  // runs that did not diverge
  double ce_mean = 0.0;
  double ce_min = 0.0;
  double ce_max = 0.0;
  double delta = 0.0;  // ce_mean - reference ce_mean
};

struct AblationResult {
  std::vector<RunResult> runs;
  std::vector<ArmSummary> arms;
  const ArmSummary& arm(PredictorKind kind) const;  // throws if absent
};

// Hash of the three block-0 trace sequences for `inputs`.
std::uint64_t trace_hash(const spen::SpenModel<float>& model, const std::vector<int>& inputs);

AblationResult run_ablation(const AblationConfig& config, const std::vector<int>& train_tokens,
                            const std::vector<int>& heldout_tokens, const Logger& log = {});

// Held-out CE with every trace forced to zero.
double zero_trace_ce(const spen::SpenModel<float>& model, const std::vector<int>& heldout_tokens, int n_sequences);

void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result);
void write_runs_csv(const std::filesystem::path& path, const AblationResult& result);
nlohmann::json to_json(const AblationResult& result);

}  // namespace ematrace::ablation
