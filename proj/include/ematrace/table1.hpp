#pragma once

// Grammar-role transfer benchmark: train the bidirectional hierarchy once on
// grammar A, extract representations with learning frozen, and probe them.

#include "ematrace/grammar.hpp"
#include "ematrace/probe.hpp"
#include "ematrace/spcn.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ematrace::table1 {

struct Table1Config {
  std::uint64_t seed = 1;
  std::size_t n_train = 5000;
  std::size_t n_test = 3000;
  spcn::SpcnConfig spcn;
  double ridge_lambda = 0.01;
  int projection_seeds = 5;
  int levels = 3;  // L0..L2 trace rows
};

struct Row {
  std::string name;
  std::string group;  // representation | bidirectionality | level | projection
  Index dim = 0;
  probe::ProbeReport report;
  int n_seeds = 1;  // > 1 for averaged projection rows
  double within_mean = 0.0;
  double transfer_mean = 0.0;
  double deep_mean = 0.0;
};

struct Table1Result {
  std::vector<Row> rows;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  std::size_t train_tokens = 0;
  double seconds = 0.0;

  const Row& row(const std::string& name) const;  // throws if absent
};

Table1Result run_table1(const grammar::DatasetSplit& split, const Table1Config& config, const Logger& log = {});

nlohmann::json to_json(const Table1Result& result);
void write_table1_csv(const std::filesystem::path& path, const Table1Result& result);

}  // namespace ematrace::table1
