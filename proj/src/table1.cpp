#include "ematrace/table1.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

namespace ematrace::table1 {

namespace {

Row probe_row(std::string name, std::string group, const Matrix<float>& train, const std::vector<int>& train_labels,
              const Matrix<float>& within, const std::vector<int>& within_labels, const Matrix<float>& transfer,
              const std::vector<int>& transfer_labels, double lambda) {
  Row row;
  row.name = std::move(name);
  row.group = std::move(group);
  row.dim = train.cols();
  const auto fit = probe::fit_ridge(train, train_labels, grammar::kNumRoles, lambda);
  row.report = probe::evaluate(fit, within, within_labels, transfer, transfer_labels);
  row.report.representation = row.name;
  row.within_mean = row.report.within.value;
  row.transfer_mean = row.report.transfer.value;
  row.deep_mean = row.report.deep.value;
  return row;
}

nlohmann::json acc_json(const probe::Accuracy& a) {
  return {{"acc", a.value}, {"low", a.ci.low}, {"high", a.ci.high}, {"n", a.total}};
}

}  // namespace

const Row& Table1Result::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw std::out_of_range("table1: no row named " + name);
}

Table1Result run_table1(const grammar::DatasetSplit& split, const Table1Config& config, const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  config.spcn.validate();
  if (config.levels < 1 || config.levels > spcn::kLevels) throw std::invalid_argument("table1: levels out of range");
  if (config.projection_seeds < 1) throw std::invalid_argument("table1: projection_seeds must be >= 1");

  Table1Result result;
  result.train_tokens = grammar::count_tokens(split.train);

  spcn::Hierarchy<float> fwd(config.spcn, hash_combine(config.seed, 0xf0));
  spcn::Hierarchy<float> bwd(config.spcn, hash_combine(config.seed, 0xb0));
  result.frozen_hash_before = hash_combine(fwd.frozen_hash(), bwd.frozen_hash());

  say("training on " + std::to_string(split.train.size()) + " sentences (" + std::to_string(result.train_tokens) +
      " tokens)");
  spcn::train_corpus(fwd, bwd, split.train);
  result.frozen_hash_after = hash_combine(fwd.frozen_hash(), bwd.frozen_hash());

  say("extracting representations");
  const auto tr = spcn::process_corpus(fwd, bwd, split.train, false, config.levels);
  const auto wi = spcn::process_corpus(fwd, bwd, split.test_within, false, config.levels);
  const auto tf = spcn::process_corpus(fwd, bwd, split.test_transfer, false, config.levels);

  const double lam = config.ridge_lambda;
  auto add = [&](const std::string& name, const std::string& group, auto getter) {
    say("probing " + name);
    result.rows.push_back(probe_row(name, group, getter(tr), tr.labels, getter(wi), wi.labels, getter(tf), tf.labels,
                                    lam));
  };
  add("activation", "representation", [](const spcn::Representations& r) { return r.activation(0); });
  add("traces", "representation", [](const spcn::Representations& r) { return r.traces(0); });
  add("combined", "representation", [](const spcn::Representations& r) { return r.combined(0); });
  add("fwd_only", "bidirectionality", [](const spcn::Representations& r) { return r.forward_only(0); });
  for (int l = 0; l < config.levels; ++l) {
    add("traces_L" + std::to_string(l), "level", [l](const spcn::Representations& r) { return r.traces(l); });
  }

  // Traces projected to the activation's width, accuracies averaged over seeds.
  const Index d_act = result.row("activation").dim;
  const Matrix<float> tr_traces = tr.traces(0), wi_traces = wi.traces(0), tf_traces = tf.traces(0);
  Row proj;
  proj.name = "traces_projected";
  proj.group = "projection";
  proj.dim = d_act;
  proj.n_seeds = config.projection_seeds;
  for (int s = 0; s < config.projection_seeds; ++s) {
    say("projection seed " + std::to_string(s));
    const auto p = probe::projection_matrix(tr_traces.cols(), d_act, hash_combine(config.seed, 0x500 + s));
    Row r = probe_row(proj.name, proj.group, probe::project(tr_traces, p), tr.labels, probe::project(wi_traces, p),
                      wi.labels, probe::project(tf_traces, p), tf.labels, lam);
    if (s == 0) proj.report = r.report;
    proj.within_mean += r.report.within.value / config.projection_seeds;
    proj.transfer_mean += r.report.transfer.value / config.projection_seeds;
    proj.deep_mean += r.report.deep.value / config.projection_seeds;
  }
  result.rows.push_back(std::move(proj));

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

nlohmann::json to_json(const Table1Result& result) {
  nlohmann::json j;
  j["train_tokens"] = result.train_tokens;
  j["frozen_weights_unchanged"] = result.frozen_hash_before == result.frozen_hash_after;
  j["seconds"] = result.seconds;
  auto& rows = j["rows"] = nlohmann::json::array();
  for (const auto& r : result.rows) {
    nlohmann::json o{{"representation", r.name},
                     {"group", r.group},
                     {"d", r.dim},
                     {"probe_params", r.dim + 1},
                     {"seeds", r.n_seeds},
                     {"within", r.within_mean},
                     {"transfer", r.transfer_mean},
                     {"deep", r.deep_mean}};
    if (r.n_seeds == 1) {
      o["within_ci"] = acc_json(r.report.within);
      o["transfer_ci"] = acc_json(r.report.transfer);
      o["deep_ci"] = acc_json(r.report.deep);
    }
    rows.push_back(std::move(o));
  }
  return j;
}

void write_table1_csv(const std::filesystem::path& path, const Table1Result& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "representation,group,d,seeds,within,within_low,within_high,transfer,transfer_low,transfer_high,deep,deep_low,"
         "deep_high\n";
  out.precision(6);
  for (const auto& r : result.rows) {
    const auto& rep = r.report;
    out << r.name << ',' << r.group << ',' << r.dim << ',' << r.n_seeds << ',' << r.within_mean << ','
        << rep.within.ci.low << ',' << rep.within.ci.high << ',' << r.transfer_mean << ',' << rep.transfer.ci.low
        << ',' << rep.transfer.ci.high << ',' << r.deep_mean << ',' << rep.deep.ci.low << ',' << rep.deep.ci.high
        << '\n';
  }
}

}  // namespace ematrace::table1
