#pragma once

// Inference-time precision-gated Hebbian adaptation of the static predictor.
//
// Per block and token, after the block has used its prediction:
//   r      = x - (base + delta) hbar
//   e      = pi * r
//   delta += eta (pi * e) hbar^T - decay delta
//   err_var = rho err_var + (1 - rho) r^2
//   pi      = clip(1 / (err_var + eps), pi_min, pi_max)
// base is a frozen copy of the trained predictor; delta starts at zero.

#include "ematrace/spen.hpp"
#include "ematrace/types.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace ematrace::fastweights {

struct FastWeightConfig {
  double eta = 0.0;
  double pi_min = 0.1;
  double pi_max = 100.0;
  double decay = 1e-3;  // lambda_d
  double rho = 0.99;
  double eps = 1e-2;
  bool use_base = true;  // test hook: false drops the trained base (delta only)

  void validate() const;
};

struct FastWeightState {
  Matrix<float> base;
  Matrix<float> delta;
  Vector<float> precision;
  Vector<float> err_var;
  bool touched = false;  // delta has received an update
};

FastWeightState init_fast_weights(const Matrix<float>& w_pred);

// Effective prediction (base + delta) hbar; exactly base * hbar until delta
// has been touched.
Vector<float> fast_predict(const FastWeightState& fw, const FastWeightConfig& config, const Vector<float>& hbar);

void pghu_infer_step(FastWeightState& fw, const FastWeightConfig& config, const Vector<float>& x,
                     const Vector<float>& hbar);

// mean(1 / pi)
double uncertainty(const FastWeightState& fw);

// P(ood > id) with ties as 1/2; throws on an empty list.
double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Plugs fast weights into an inference session. Requires the Static predictor.
class FastWeightAdapter : public spen::PredictorAdapter<float> {
 public:
  FastWeightAdapter(const spen::SpenModel<float>& model, const FastWeightConfig& config);
  Vector<float> predict(int block, const Vector<float>& hbar) override;
  void observe(int block, const Vector<float>& hbar, const Vector<float>& x, const Vector<float>& xhat) override;

  const FastWeightState& state(int block) const { return states_.at(static_cast<std::size_t>(block)); }
  // Mean uncertainty over blocks.
  double uncertainty() const;
  double max_delta_norm() const;

 private:
  FastWeightConfig config_;
  std::vector<FastWeightState> states_;
};

struct SweepArm {
  double eta = 0.0;
  double pi_max = 100.0;
  std::string label() const;
};

// eta in {1e-3, 1e-4, 1e-5, 0} x pi_max in {1, 100}.
std::vector<SweepArm> default_grid();

struct SweepConfig {
  std::vector<SweepArm> arms = default_grid();
  FastWeightConfig base;  // eta and pi_max are taken from each arm
  Index window = 200;
};

struct DomainStream {
  std::string name;
  std::vector<int> tokens;
  bool in_distribution = false;
};

struct StreamCurve {
  std::string domain;
  SweepArm arm;
  bool aborted = false;  // non-finite state; ppl reported as +inf
  std::string diagnostic;
  std::vector<double> window_ppl;
  std::vector<double> window_uncertainty;  // mean U over each window
  double ppl = 0.0;                        // exp(mean CE) over the whole stream
  double max_delta_norm = 0.0;
  double start() const { return window_ppl.front(); }
  double end() const { return window_ppl.back(); }
};

struct SweepRow {
  SweepArm arm;
  std::vector<double> ppl;        // per domain, in domain order
  std::vector<double> delta_pct;  // vs the eta = 0 arm with the same pi_max (first eta=0 arm if none)
  double auroc = 0.0;             // window uncertainty, in-distribution vs the rest
};

struct StreamReport {
  std::vector<std::string> domains;
  std::vector<StreamCurve> curves;
  std::vector<SweepRow> rows;
  const StreamCurve& curve(const std::string& domain, const SweepArm& arm) const;
};

StreamCurve stream_curve(const spen::SpenModel<float>& model, const DomainStream& stream, const SweepArm& arm,
                         const FastWeightConfig& base, Index window);

StreamReport streaming_eval(const spen::SpenModel<float>& model, const SweepConfig& config,
                            const std::vector<DomainStream>& domains, const Logger& log = {});

void write_sweep_csv(const std::filesystem::path& path, const StreamReport& report);
void write_curves_csv(const std::filesystem::path& path, const StreamReport& report);
nlohmann::json to_json(const StreamReport& report);

}  // namespace ematrace::fastweights
