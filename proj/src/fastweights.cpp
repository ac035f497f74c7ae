#include "ematrace/fastweights.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace ematrace::fastweights {

void FastWeightConfig::validate() const {
  if (eta < 0.0) throw std::invalid_argument("fast weights: eta must be >= 0");
  if (!(pi_min > 0.0 && pi_max >= pi_min)) throw std::invalid_argument("fast weights: need 0 < pi_min <= pi_max");
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("fast weights: decay must be in [0, 1)");
  if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("fast weights: rho must be in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("fast weights: eps must be positive");
}

FastWeightState init_fast_weights(const Matrix<float>& w_pred) {
  FastWeightState fw;
  fw.base = w_pred;
  fw.delta = Matrix<float>::Zero(w_pred.rows(), w_pred.cols());
  fw.precision = Vector<float>::Ones(w_pred.rows());
  fw.err_var = Vector<float>::Zero(w_pred.rows());
  return fw;
}

Vector<float> fast_predict(const FastWeightState& fw, const FastWeightConfig& config, const Vector<float>& hbar) {
  if (!config.use_base) return fw.delta * hbar;
  if (!fw.touched) return fw.base * hbar;
  const Matrix<float> w = fw.base + fw.delta;
  return w * hbar;
}

void pghu_infer_step(FastWeightState& fw, const FastWeightConfig& config, const Vector<float>& x,
                     const Vector<float>& hbar) {
  const Vector<float> r = x - fast_predict(fw, config, hbar);
  if (config.eta > 0.0 || config.decay > 0.0) {
    const Vector<float> gated = fw.precision.cwiseProduct(fw.precision.cwiseProduct(r));
    const auto eta = static_cast<float>(config.eta);
    const auto keep = static_cast<float>(1.0 - config.decay);
    if (config.eta > 0.0) {
      fw.delta = keep * fw.delta + eta * gated * hbar.transpose();
      fw.touched = true;
    } else if (fw.touched) {
      fw.delta *= keep;
    }
  }
  const auto rho = static_cast<float>(config.rho);
  fw.err_var = rho * fw.err_var + (1.0f - rho) * r.cwiseProduct(r);
  fw.precision = (fw.err_var.array() + static_cast<float>(config.eps))
                     .inverse()
                     .max(static_cast<float>(config.pi_min))
                     .min(static_cast<float>(config.pi_max));
}

double uncertainty(const FastWeightState& fw) {
  return fw.precision.template cast<double>().cwiseInverse().mean();
}

double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw std::invalid_argument("auroc: both score lists must be non-empty");
  // Rank-sum form: sort the pooled scores and give tied runs their mean rank.
  struct Item {
    double v;
    bool ood;
  };
  std::vector<Item> all;
  for (double v : id_scores) all.push_back({v, false});
  for (double v : ood_scores) all.push_back({v, true});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].ood) rank_sum += mean_rank;
    }
    i = j;
  }
  const auto n_ood = static_cast<double>(ood_scores.size());
  const auto n_id = static_cast<double>(id_scores.size());
  return (rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_ood * n_id);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) rank[idx[k]] = 0.5 * static_cast<double>(i + j - 1);
    i = j;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length lists");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), static_cast<Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> y(rb.data(), static_cast<Index>(rb.size()));
  const Eigen::VectorXd xc = x.array() - x.mean();
  const Eigen::VectorXd yc = y.array() - y.mean();
  const double denom = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  if (denom == 0.0) return 0.0;
  return xc.dot(yc) / denom;
}

FastWeightAdapter::FastWeightAdapter(const spen::SpenModel<float>& model, const FastWeightConfig& config)
    : config_(config) {
  config_.validate();
  if (model.config().predictor != spen::PredictorKind::Static) {
    throw std::invalid_argument("fast weights attach to the static predictor only");
  }
  for (const auto& b : model.params().blocks) states_.push_back(init_fast_weights(b.pred.w_pred));
}

Vector<float> FastWeightAdapter::predict(int block, const Vector<float>& hbar) {
  return fast_predict(states_.at(static_cast<std::size_t>(block)), config_, hbar);
}

void FastWeightAdapter::observe(int block, const Vector<float>& hbar, const Vector<float>& x, const Vector<float>&) {
  pghu_infer_step(states_.at(static_cast<std::size_t>(block)), config_, x, hbar);
}

double FastWeightAdapter::uncertainty() const {
  double u = 0.0;
  for (const auto& s : states_) u += fastweights::uncertainty(s);
  return u / static_cast<double>(states_.size());
}

double FastWeightAdapter::max_delta_norm() const {
  double m = 0.0;
  for (const auto& s : states_) m = std::max(m, static_cast<double>(s.delta.norm()));
  return m;
}

std::string SweepArm::label() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "eta=%g,pi_max=%g", eta, pi_max);
  return buf;
}

std::vector<SweepArm> default_grid() {
  std::vector<SweepArm> grid;
  for (double pi_max : {1.0, 100.0}) {
    for (double eta : {1e-3, 1e-4, 1e-5, 0.0}) grid.push_back({eta, pi_max});
  }
  return grid;
}

const StreamCurve& StreamReport::curve(const std::string& domain, const SweepArm& arm) const {
  for (const auto& c : curves) {
    if (c.domain == domain && c.arm.eta == arm.eta && c.arm.pi_max == arm.pi_max) return c;
  }
  throw std::out_of_range("no curve for " + domain + " " + arm.label());
}

StreamCurve stream_curve(const spen::SpenModel<float>& model, const DomainStream& stream, const SweepArm& arm,
                         const FastWeightConfig& base, Index window) {
  if (window < 1) throw std::invalid_argument("stream: window must be positive");
  if (static_cast<Index>(stream.tokens.size()) < window + 1) {
    throw std::invalid_argument("stream '" + stream.name + "' has " + std::to_string(stream.tokens.size()) +
                                " tokens, fewer than one window");
  }
  FastWeightConfig fc = base;
  fc.eta = arm.eta;
  fc.pi_max = arm.pi_max;
  FastWeightAdapter adapter(model, fc);
  spen::InferenceSession<float> session(model, &adapter);

  StreamCurve curve;
  curve.domain = stream.name;
  curve.arm = arm;
  std::vector<double> ce, u;
  try {
    for (std::size_t i = 0; i + 1 < stream.tokens.size(); ++i) {
      const Eigen::VectorXd l = session.step(stream.tokens[i]).cast<double>();
      const double m = l.maxCoeff();
      ce.push_back(m + std::log((l.array() - m).exp().sum()) - l[stream.tokens[i + 1]]);
      u.push_back(adapter.uncertainty());
      curve.max_delta_norm = std::max(curve.max_delta_norm, adapter.max_delta_norm());
      if (!std::isfinite(curve.max_delta_norm)) throw std::domain_error("fast-weight delta is non-finite");
    }
  } catch (const std::domain_error& e) {
    curve.aborted = true;
    curve.diagnostic = "aborted at token " + std::to_string(ce.size()) + ": " + e.what();
  }
  const std::size_t n_windows = (stream.tokens.size() - 1) / static_cast<std::size_t>(window);
  const auto w = static_cast<std::size_t>(window);
  if (curve.aborted) {
    curve.ppl = std::numeric_limits<double>::infinity();
    curve.window_ppl.assign(n_windows, std::numeric_limits<double>::infinity());
    curve.window_uncertainty.assign(n_windows, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < n_windows && (k + 1) * w <= ce.size(); ++k) {
      curve.window_ppl[k] = std::exp(std::accumulate(ce.begin() + k * w, ce.begin() + (k + 1) * w, 0.0) / w);
    }
    return curve;
  }
  curve.window_ppl = spen::windowed_ppl(ce, window);
  for (std::size_t k = 0; k < n_windows; ++k) {
    curve.window_uncertainty.push_back(std::accumulate(u.begin() + k * w, u.begin() + (k + 1) * w, 0.0) / w);
  }
  curve.ppl = std::exp(std::accumulate(ce.begin(), ce.end(), 0.0) / static_cast<double>(ce.size()));
  return curve;
}

StreamReport streaming_eval(const spen::SpenModel<float>& model, const SweepConfig& config,
                            const std::vector<DomainStream>& domains, const Logger& log) {
  if (domains.empty()) throw std::invalid_argument("streaming_eval: no domains");
  if (config.arms.empty()) throw std::invalid_argument("streaming_eval: empty sweep grid");
  if (std::none_of(config.arms.begin(), config.arms.end(), [](const SweepArm& a) { return a.eta == 0.0; })) {
    throw std::invalid_argument("streaming_eval: the sweep must include an eta = 0 arm");
  }
  StreamReport report;
  for (const auto& d : domains) report.domains.push_back(d.name);
  for (const auto& arm : config.arms) {
    SweepRow row;
    row.arm = arm;
    for (const auto& d : domains) {
      report.curves.push_back(stream_curve(model, d, arm, config.base, config.window));
      const auto& c = report.curves.back();
      row.ppl.push_back(c.ppl);
      if (log) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s %s: ppl %.3f start %.3f end %.3f%s", d.name.c_str(), arm.label().c_str(),
                      c.ppl, c.start(), c.end(), c.aborted ? " (aborted)" : "");
        log(buf);
      }
    }
    report.rows.push_back(row);
  }

  auto reference = [&](const SweepArm& arm) -> const SweepRow& {
    const SweepRow* first = nullptr;
    for (const auto& r : report.rows) {
      if (r.arm.eta != 0.0) continue;
      if (!first) first = &r;
      if (r.arm.pi_max == arm.pi_max) return r;
    }
    return *first;
  };
  for (auto& row : report.rows) {
    const SweepRow& ref = reference(row.arm);
    for (std::size_t i = 0; i < domains.size(); ++i) row.delta_pct.push_back(100.0 * (row.ppl[i] / ref.ppl[i] - 1.0));
    std::vector<double> id, ood;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto& c = report.curve(domains[i].name, row.arm);
      if (c.aborted) continue;
      auto& dst = domains[i].in_distribution ? id : ood;
      dst.insert(dst.end(), c.window_uncertainty.begin(), c.window_uncertainty.end());
    }
    row.auroc = id.empty() || ood.empty() ? std::numeric_limits<double>::quiet_NaN() : auroc(id, ood);
  }
  return report;
}

void write_sweep_csv(const std::filesystem::path& path, const StreamReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "config,eta,pi_max";
  for (const auto& d : report.domains) out << ",ppl_" << d;
  for (const auto& d : report.domains) out << ",delta_pct_" << d;
  out << ",auroc\n";
  out.precision(6);
  for (const auto& r : report.rows) {
    out << '"' << r.arm.label() << "\"," << r.arm.eta << ',' << r.arm.pi_max;
    for (double p : r.ppl) out << ',' << p;
    for (double p : r.delta_pct) out << ',' << p;
    out << ',' << r.auroc << '\n';
  }
}

void write_curves_csv(const std::filesystem::path& path, const StreamReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "domain,config,window_idx,ppl,uncertainty\n";
  out.precision(6);
  for (const auto& c : report.curves) {
    for (std::size_t k = 0; k < c.window_ppl.size(); ++k) {
      out << c.domain << ",\"" << c.arm.label() << "\"," << k << ',' << c.window_ppl[k] << ','
          << c.window_uncertainty[k] << '\n';
    }
  }
}

nlohmann::json to_json(const StreamReport& report) {
  nlohmann::json j;
  j["domains"] = report.domains;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    j["rows"].push_back({{"config", r.arm.label()},
                         {"eta", r.arm.eta},
                         {"pi_max", r.arm.pi_max},
                         {"ppl", r.ppl},
                         {"delta_pct", r.delta_pct},
                         {"auroc", r.auroc}});
  }
  j["curves"] = nlohmann::json::array();
  for (const auto& c : report.curves) {
    nlohmann::json cj{{"domain", c.domain},
                      {"config", c.arm.label()},
                      {"ppl", c.ppl},
                      {"start", c.start()},
                      {"end", c.end()},
                      {"aborted", c.aborted},
                      {"max_delta_norm", c.max_delta_norm}};
    if (c.aborted) cj["diagnostic"] = c.diagnostic;
    j["curves"].push_back(cj);
  }
  return j;
}

}  // namespace ematrace::fastweights
