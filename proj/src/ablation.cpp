#include "ematrace/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

namespace ematrace::ablation {

const ArmSummary& AblationResult::arm(PredictorKind kind) const {
  for (const auto& a : arms) {
    if (a.kind == kind) return a;
  }
  throw std::out_of_range("no ablation arm " + std::string(spen::predictor_name(kind)));
}

std::uint64_t trace_hash(const spen::SpenModel<float>& model, const std::vector<int>& inputs) {
  const auto pass = spen::forward_sequence(model, inputs);
  const auto& b0 = pass.blocks.front();
  std::uint64_t h = hash_bytes(b0.hf);
  h = hash_combine(h, hash_bytes(b0.hm));
  return hash_combine(h, hash_bytes(b0.hs));
}

AblationResult run_ablation(const AblationConfig& config, const std::vector<int>& train_tokens,
                            const std::vector<int>& heldout_tokens, const Logger& log) {
  if (config.arms.empty() || config.seeds.empty()) throw std::invalid_argument("ablation needs arms and seeds");
  AblationResult result;
  for (std::uint64_t seed : config.seeds) {
    for (PredictorKind kind : config.arms) {
      spen::TrainConfig tc = config.train;
      tc.model.predictor = kind;
      tc.seed = seed;
      RunResult run;
      run.kind = kind;
      run.seed = seed;
      {
        // The same first batch the trainer will draw.
        std::mt19937_64 rng(hash_combine(seed, 0xda7a));
        const auto first = spen::sample_windows(rng, train_tokens, 1, tc.model.seq_len).front();
        run.trace_hash = trace_hash(spen::SpenModel<float>(tc.model, seed), first);
      }
      const std::string tag = std::string(spen::predictor_name(kind)) + " seed " + std::to_string(seed);
      try {
        const auto tr = spen::train_micro(tc, train_tokens, heldout_tokens,
                                          log ? Logger([&](const std::string& m) { log(tag + ": " + m); }) : Logger{});
        run.final_train_ce = tr.curve.back().ce;
        run.eval_ce = tr.eval_ce;
        run.seconds = tr.seconds;
      } catch (const spen::DivergenceError& e) {
        run.diverged = true;
        run.diagnostic = e.what();
        run.eval_ce = std::numeric_limits<double>::quiet_NaN();
        if (log) log(tag + ": " + e.what());
      }
      result.runs.push_back(run);
    }
  }

  for (PredictorKind kind : config.arms) {
    ArmSummary s;
    s.kind = kind;
    s.ce_min = std::numeric_limits<double>::infinity();
    s.ce_max = -std::numeric_limits<double>::infinity();
    for (const auto& r : result.runs) {
      if (r.kind != kind || r.diverged) continue;
      ++s.n_runs;
      s.ce_mean += r.eval_ce;
      s.ce_min = std::min(s.ce_min, r.eval_ce);
      s.ce_max = std::max(s.ce_max, r.eval_ce);
    }
    s.ce_mean = s.n_runs ? s.ce_mean / s.n_runs : std::numeric_limits<double>::quiet_NaN();
    result.arms.push_back(s);
  }
  const auto ref = std::find_if(result.arms.begin(), result.arms.end(),
                                [&](const ArmSummary& a) { return a.kind == config.reference; });
  const double ref_ce = ref == result.arms.end() ? std::numeric_limits<double>::quiet_NaN() : ref->ce_mean;
  for (auto& a : result.arms) a.delta = a.ce_mean - ref_ce;
  return result;
}

double zero_trace_ce(const spen::SpenModel<float>& model, const std::vector<int>& heldout_tokens, int n_sequences) {
  spen::SpenModel<float> blind = model;
  blind.mutable_config().zero_traces = true;
  return spen::evaluate_ce(blind, heldout_tokens, n_sequences);
}

void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "predictor,ce,delta,ce_min,ce_max,n_runs\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& a : result.arms) {
    out << spen::predictor_name(a.kind) << ',' << a.ce_mean << ',' << a.delta << ',' << a.ce_min << ',' << a.ce_max
        << ',' << a.n_runs << '\n';
  }
}

void write_runs_csv(const std::filesystem::path& path, const AblationResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "predictor,seed,eval_ce,final_train_ce,seconds,diverged,trace_hash\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : result.runs) {
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.trace_hash));
    out << spen::predictor_name(r.kind) << ',' << r.seed << ',' << r.eval_ce << ',' << r.final_train_ce << ','
        << r.seconds << ',' << (r.diverged ? 1 : 0) << ',' << hash << '\n';
  }
}

nlohmann::json to_json(const AblationResult& result) {
  nlohmann::json j;
  j["arms"] = nlohmann::json::array();
  for (const auto& a : result.arms) {
    j["arms"].push_back({{"predictor", spen::predictor_name(a.kind)},
                         {"ce", a.ce_mean},
                         {"delta", a.delta},
                         {"ce_min", a.ce_min},
                         {"ce_max", a.ce_max},
                         {"n_runs", a.n_runs}});
  }
  j["runs"] = nlohmann::json::array();
  for (const auto& r : result.runs) {
    nlohmann::json run{{"predictor", spen::predictor_name(r.kind)},
                       {"seed", r.seed},
                       {"eval_ce", r.eval_ce},
                       {"final_train_ce", r.final_train_ce},
                       {"seconds", r.seconds},
                       {"diverged", r.diverged},
                       {"trace_hash", r.trace_hash}};
    if (r.diverged) run["diagnostic"] = r.diagnostic;
    j["runs"].push_back(run);
  }
  return j;
}

}  // namespace ematrace::ablation
