#include "commands.hpp"

#include "ematrace/ablation.hpp"
#include "ematrace/corpus.hpp"
#include "ematrace/ema.hpp"
#include "ematrace/fastweights.hpp"
#include "ematrace/grammar.hpp"
#include "ematrace/table1.hpp"
#include "ematrace/tensor_io.hpp"
#include "ematrace/tokenizer.hpp"
#include "ematrace/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ematrace::cli {

namespace fs = std::filesystem;

namespace {

std::vector<KeySpec> corpus_keys() {
  return {
      {"corpus", "", "training text file (UTF-8); empty generates the synthetic corpus"},
      {"heldout", "", "held-out text file; empty uses the synthetic held-out slice"},
      {"corpus.seed", "1", "synthetic corpus seed"},
      {"corpus.train_chars", "400000", "synthetic training characters"},
      {"corpus.heldout_chars", "40000", "synthetic held-out characters"},
      {"corpus.stream_chars", "10000", "characters per synthetic evaluation stream"},
      {"corpus.arithmetic_fraction", "0.1", "share of arithmetic documents in the training mixture"},
      {"corpus.topic_fraction", "1", "share of each content-word category one prose document uses"},
  };
}

std::vector<KeySpec> train_keys() {
  auto keys = corpus_keys();
  const std::vector<KeySpec> more = {
      {"seed", "1", "initialisation and batch-sampling seed"},
      {"steps", "500", "optimizer steps"},
      {"batch_size", "8", "sequences per step"},
      {"eval_sequences", "32", "held-out windows scored after training"},
      {"d_model", "128", "model width"},
      {"d_ff", "512", "feed-forward width"},
      {"n_blocks", "2", "number of blocks"},
      {"k_active", "31", "active feed-forward units per token"},
      {"seq_len", "256", "training context length"},
      {"alpha_fast", "0.5", "fast trace decay"},
      {"alpha_mid", "0.1", "mid trace decay"},
      {"alpha_slow", "0.02", "slow trace decay"},
      {"lb_weight", "0.01", "load-balance loss weight"},
      {"predictor", "static", "static | linear_attention | softmax_attention | projected_static"},
      {"n_heads", "4", "softmax predictor heads"},
      {"gamma", "0.999", "linear-attention decay"},
      {"proj_dim", "32", "projected_static projection width"},
      {"ste", "identity", "top-k backward: identity | masked"},
      {"chunk_len", "64", "chunk length of the training-mode scan"},
      {"lr", "6e-4", "peak learning rate"},
      {"warmup_steps", "50", "linear warmup steps"},
      {"min_lr_ratio", "0.1", "cosine floor as a fraction of the peak"},
      {"weight_decay", "0.1", "AdamW decoupled weight decay"},
      {"clip", "1.0", "global gradient-norm clip (<= 0 disables)"},
  };
  keys.insert(keys.end(), more.begin(), more.end());
  return keys;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

corpus::Corpus load_corpus(const Config& c) {
  corpus::CorpusConfig cc;
  cc.seed = static_cast<std::uint64_t>(c.integer("corpus.seed"));
  cc.train_chars = static_cast<std::size_t>(c.integer("corpus.train_chars"));
  cc.heldout_chars = static_cast<std::size_t>(c.integer("corpus.heldout_chars"));
  cc.stream_chars = static_cast<std::size_t>(c.integer("corpus.stream_chars"));
  cc.arithmetic_fraction = c.real("corpus.arithmetic_fraction");
  cc.topic_fraction = c.real("corpus.topic_fraction");
  corpus::Corpus out;
  try {
    out = corpus::make_corpus(cc);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!c.str("corpus").empty()) out.train = read_text(c.str("corpus"));
  if (!c.str("heldout").empty()) out.heldout = read_text(c.str("heldout"));
  return out;
}

spen::TrainConfig train_config(const Config& c, int vocab_size) {
  spen::TrainConfig t;
  t.seed = static_cast<std::uint64_t>(c.integer("seed"));
  t.steps = static_cast<int>(c.integer("steps"));
  t.batch_size = static_cast<int>(c.integer("batch_size"));
  t.eval_sequences = static_cast<int>(c.integer("eval_sequences"));
  auto& m = t.model;
  m.vocab_size = vocab_size;
  m.d_model = c.integer("d_model");
  m.d_ff = c.integer("d_ff");
  m.n_blocks = static_cast<int>(c.integer("n_blocks"));
  m.k_active = c.integer("k_active");
  m.seq_len = c.integer("seq_len");
  m.alpha_fast = c.real("alpha_fast");
  m.alpha_mid = c.real("alpha_mid");
  m.alpha_slow = c.real("alpha_slow");
  m.lb_weight = c.real("lb_weight");
  m.n_heads = static_cast<int>(c.integer("n_heads"));
  m.gamma = c.real("gamma");
  m.proj_dim = c.integer("proj_dim");
  m.chunk_len = c.integer("chunk_len");
  const std::string ste = c.str("ste");
  if (ste != "identity" && ste != "masked") throw ConfigError("ste: expected identity or masked, got '" + ste + "'");
  m.ste = ste == "masked" ? spen::SteMode::Masked : spen::SteMode::Identity;
  auto& o = t.optim;
  o.lr = c.real("lr");
  o.warmup_steps = static_cast<int>(c.integer("warmup_steps"));
  o.min_lr_ratio = c.real("min_lr_ratio");
  o.weight_decay = c.real("weight_decay");
  o.clip = c.real("clip");
  try {
    m.predictor = spen::predictor_from_name(c.str("predictor"));
    m.validate();
    o.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (t.steps < 1 || t.batch_size < 1 || t.eval_sequences < 1) {
    throw ConfigError("steps, batch_size and eval_sequences must be positive");
  }
  return t;
}

struct Tokenized {
  CharTokenizer tokenizer;
  std::vector<int> train, heldout;
};

Tokenized tokenize(const corpus::Corpus& corpus) {
  Tokenized t;
  t.tokenizer = CharTokenizer::from_text(corpus.train);
  if (t.tokenizer.vocab_size() > 128) {
    throw ConfigError("corpus has " + std::to_string(t.tokenizer.vocab_size()) + " distinct bytes; at most 128 allowed");
  }
  t.train = t.tokenizer.encode(corpus.train);
  try {
    t.heldout = t.tokenizer.encode(corpus.heldout);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("held-out text: ") + e.what());
  }
  return t;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw InvariantError(what + " is not finite");
}

// ---------------------------------------------------------------- grammar

void cmd_grammar(const Config& c, const RunOptions& opt, const Logger& log) {
  const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
  const auto split = grammar::make_splits(seed, static_cast<std::size_t>(c.integer("n_train")),
                                          static_cast<std::size_t>(c.integer("n_test")));
  grammar::write_corpus(opt.out_dir / "train.txt", split.train, grammar::Variant::A, seed);
  grammar::write_corpus(opt.out_dir / "test_within.txt", split.test_within, grammar::Variant::A, seed);
  grammar::write_corpus(opt.out_dir / "test_transfer.txt", split.test_transfer, grammar::Variant::B, seed);
  const std::size_t tokens = grammar::count_tokens(split.train);
  log("train tokens: " + std::to_string(tokens));
  if (tokens < 30000 || tokens > 40000) log("warning: train token count outside [30000, 40000]");
  log("wrote train.txt, test_within.txt, test_transfer.txt (token/role pairs, one sentence per line)");
}

// ----------------------------------------------------------------- table1

void cmd_table1(const Config& c, const RunOptions& opt, const Logger& log) {
  const fs::path dir = c.str("corpus_dir");
  grammar::DatasetSplit split;
  for (const char* name : {"train.txt", "test_within.txt", "test_transfer.txt"}) {
    if (!fs::exists(dir / name)) throw ConfigError("missing corpus file " + (dir / name).string());
  }
  split.train = grammar::read_corpus(dir / "train.txt");
  split.test_within = grammar::read_corpus(dir / "test_within.txt");
  split.test_transfer = grammar::read_corpus(dir / "test_transfer.txt");
  table1::Table1Config tc;
  tc.seed = static_cast<std::uint64_t>(c.integer("seed"));
  split.seed = tc.seed;
  tc.ridge_lambda = c.real("ridge_lambda");
  tc.projection_seeds = static_cast<int>(c.integer("projection_seeds"));
  tc.spcn.precision_eps = c.real("spcn.precision_eps");
  tc.spcn.spa_unit_norm = c.flag("spcn.spa_unit_norm");
  tc.spcn.use_spa = c.flag("spcn.use_spa");
  tc.spcn.eta = c.real("spcn.eta");
  try {
    tc.spcn.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto result = table1::run_table1(split, tc, log);
  if (result.frozen_hash_before != result.frozen_hash_after) {
    throw InvariantError("frozen feedforward/lateral weights changed during training");
  }
  std::vector<probe::ProbeReport> reports;
  for (const auto& r : result.rows) {
    check_finite(r.within_mean, r.name + " within accuracy");
    reports.push_back(r.report);
  }
  table1::write_table1_csv(opt.out_dir / "table1.csv", result);
  probe::write_role_csv(opt.out_dir / "roles.csv", reports);
  write_json(opt.out_dir / "table1.json", table1::to_json(result));
  for (const auto& r : result.rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-18s dim %5lld  within %.3f  transfer %.3f  deep %.3f", r.name.c_str(),
                  static_cast<long long>(r.dim), r.within_mean, r.transfer_mean, r.deep_mean);
    log(buf);
  }
}

// ------------------------------------------------------------- spen-train

void cmd_spen_train(const Config& c, const RunOptions& opt, const Logger& log) {
  const auto corpus = load_corpus(c);
  const auto tok = tokenize(corpus);
  const auto tc = train_config(c, tok.tokenizer.vocab_size());
  const double h1 = corpus::unigram_entropy(tok.train, tok.tokenizer.vocab_size());
  log("vocab " + std::to_string(tok.tokenizer.vocab_size()) + ", train tokens " + std::to_string(tok.train.size()) +
      ", unigram entropy " + std::to_string(h1) + " nats");
  const auto result = spen::train_micro(tc, tok.train, tok.heldout, log);
  spen::write_loss_csv(opt.out_dir / "loss.csv", result.curve);
  const fs::path ckpt = opt.out_dir / "model.ckpt";
  spen::save_checkpoint(ckpt, result.model, {{"tokenizer", io::hex_encode(tok.tokenizer.table())}});
  if (spen::load_checkpoint(ckpt).hash() != result.model.hash()) {
    throw InvariantError("checkpoint does not round-trip");
  }
  check_finite(result.eval_ce, "held-out CE");
  nlohmann::json j{{"final_train_ce", result.curve.back().ce},
                   {"eval_ce", result.eval_ce},
                   {"unigram_entropy", h1},
                   {"steps", tc.steps},
                   {"parameters", result.model.parameter_count()},
                   {"vocab_size", tok.tokenizer.vocab_size()},
                   {"seconds", result.seconds}};
  write_json(opt.out_dir / "summary.json", j);
  log("held-out CE " + std::to_string(result.eval_ce) + " nats");
}

// ----------------------------------------------------------------- ablate

void cmd_ablate(const Config& c, const RunOptions& opt, const Logger& log) {
  const auto corpus = load_corpus(c);
  const auto tok = tokenize(corpus);
  ablation::AblationConfig ac;
  ac.train = train_config(c, tok.tokenizer.vocab_size());
  ac.arms.clear();
  ac.seeds.clear();
  try {
    for (const auto& a : c.list("arms")) ac.arms.push_back(spen::predictor_from_name(a));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (const auto& s : c.list("seeds")) {
    try {
      ac.seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("seeds: bad seed '" + s + "'");
    }
  }
  if (ac.arms.empty() || ac.seeds.empty()) throw ConfigError("arms and seeds must be non-empty");
  const auto result = ablation::run_ablation(ac, tok.train, tok.heldout, log);
  ablation::write_ablation_csv(opt.out_dir / "ablation.csv", result);
  ablation::write_runs_csv(opt.out_dir / "runs.csv", result);
  write_json(opt.out_dir / "ablation.json", ablation::to_json(result));
  for (std::uint64_t seed : ac.seeds) {
    std::uint64_t first = 0;
    bool have = false;
    for (const auto& r : result.runs) {
      if (r.seed != seed) continue;
      if (have && r.trace_hash != first) throw InvariantError("arms saw different traces for seed " + std::to_string(seed));
      first = r.trace_hash;
      have = true;
    }
  }
  for (const auto& a : result.arms) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-18s ce %.4f  delta %+.4f  [%.4f, %.4f]", std::string(spen::predictor_name(a.kind)).c_str(),
                  a.ce_mean, a.delta, a.ce_min, a.ce_max);
    log(buf);
  }
}

// ----------------------------------------------------------------- stream

std::vector<double> parse_reals(const Config& c, const std::string& key) {
  std::vector<double> out;
  for (const auto& s : c.list(key)) {
    try {
      out.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw ConfigError(key + ": bad number '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError(key + " must be non-empty");
  return out;
}

void cmd_stream(const Config& c, const RunOptions& opt, const Logger& log) {
  const auto corpus = load_corpus(c);
  spen::SpenModel<float> model;
  CharTokenizer tokenizer;
  if (!c.str("checkpoint").empty()) {
    if (!fs::exists(c.str("checkpoint"))) throw ConfigError("missing checkpoint " + c.str("checkpoint"));
    model = spen::load_checkpoint(c.str("checkpoint"));
    const auto file = io::read_tensor_file(c.str("checkpoint"));
    const auto it = file.header.find("tokenizer");
    if (it == file.header.end()) throw ConfigError("checkpoint carries no tokenizer table");
    tokenizer = CharTokenizer::from_table(io::hex_decode(it->second));
  } else {
    const auto tok = tokenize(corpus);
    tokenizer = tok.tokenizer;
    log("no checkpoint given; training one");
    model = spen::train_micro(train_config(c, tokenizer.vocab_size()), tok.train, tok.heldout, log).model;
    spen::save_checkpoint(opt.out_dir / "model.ckpt", model, {{"tokenizer", io::hex_encode(tokenizer.table())}});
  }
  std::string in_text = corpus.stream_in_distribution;
  std::string shifted_text = corpus.stream_shifted;
  if (!c.str("stream.in").empty()) in_text = read_text(c.str("stream.in"));
  if (!c.str("stream.shifted").empty()) shifted_text = read_text(c.str("stream.shifted"));
  std::vector<fastweights::DomainStream> domains;
  try {
    domains.push_back({"in_distribution", tokenizer.encode(in_text), true});
    domains.push_back({"shifted", tokenizer.encode(shifted_text), false});
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("stream text: ") + e.what());
  }

  fastweights::SweepConfig sc;
  sc.window = c.integer("window");
  sc.base.decay = c.real("fw.decay");
  sc.base.rho = c.real("fw.rho");
  sc.base.eps = c.real("fw.eps");
  sc.base.pi_min = c.real("fw.pi_min");
  sc.arms.clear();
  for (double pi_max : parse_reals(c, "pi_maxes")) {
    for (double eta : parse_reals(c, "etas")) sc.arms.push_back({eta, pi_max});
  }
  try {
    sc.base.validate();
    for (const auto& a : sc.arms) {
      auto fc = sc.base;
      fc.eta = a.eta;
      fc.pi_max = a.pi_max;
      fc.validate();
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (const auto& d : domains) {
    if (static_cast<Index>(d.tokens.size()) < sc.window + 1) throw ConfigError("stream '" + d.name + "' is shorter than one window");
  }
  fastweights::StreamReport report;
  try {
    report = fastweights::streaming_eval(model, sc, domains, log);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  // eta = 0 must reproduce the plain model exactly.
  const auto plain = spen::perplexity_stream(model, domains.front().tokens, sc.window);
  for (const auto& curve : report.curves) {
    if (curve.domain == domains.front().name && curve.arm.eta == 0.0 && curve.window_ppl != plain) {
      throw InvariantError("eta = 0 stream differs from the plain model (" + curve.arm.label() + ")");
    }
  }
  fastweights::write_sweep_csv(opt.out_dir / "sweep.csv", report);
  fastweights::write_curves_csv(opt.out_dir / "curves.csv", report);
  write_json(opt.out_dir / "stream.json", fastweights::to_json(report));
}

// ------------------------------------------------------------------ bench

void cmd_bench(const Config& c, const RunOptions& opt, const Logger& log) {
  const auto T = c.integer("T");
  const auto d = c.integer("d");
  const auto chunk = c.integer("chunk_len");
  const auto lanes = static_cast<int>(c.integer("lanes"));
  const auto repeats = static_cast<int>(c.integer("repeats"));
  if (T < 1 || d < 1 || chunk < 1 || lanes < 1 || repeats < 1) throw ConfigError("bench sizes must be positive");
  const auto report = ema::bench_scan(T, d, chunk, repeats, lanes, static_cast<std::uint64_t>(c.integer("seed")));
  write_text(opt.out_dir / "bench.json", report.to_json() + "\n");
  if (!(report.max_abs_diff <= 1e-5)) {
    throw InvariantError("chunked scan deviates from the sequential scan by " + std::to_string(report.max_abs_diff));
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "sequential %.3g tok/s, chunked %.3g tok/s, speedup %.2fx, max |diff| %.3g",
                report.tok_per_s_seq, report.tok_per_s_chunked, report.speedup, report.max_abs_diff);
  log(buf);
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"grammar", "table1", "spen-train", "ablate", "stream", "bench"};
  return names;
}

std::string command_summary(const std::string& command) {
  if (command == "grammar") return "Generate the grammar A/B corpora and splits";
  if (command == "table1") return "Train the hierarchy once and probe its representations";
  if (command == "spen-train") return "Train the micro language model";
  if (command == "ablate") return "Predictor ablation over arms and seeds";
  if (command == "stream") return "Streaming perplexity and fast-weight sweep";
  if (command == "bench") return "Chunked vs sequential scan throughput";
  throw ConfigError("unknown command " + command);
}

std::vector<KeySpec> command_keys(const std::string& command) {
  if (command == "grammar") {
    return {{"seed", "1", "dataset seed"},
            {"n_train", "5000", "grammar A training sentences"},
            {"n_test", "3000", "sentences per test split"}};
  }
  if (command == "table1") {
    return {{"corpus_dir", "corpus", "directory written by the grammar command"},
            {"seed", "1", "hierarchy and projection seed"},
            {"ridge_lambda", "0.01", "probe ridge penalty"},
            {"projection_seeds", "5", "seeds for the dimension-matched control"},
            {"spcn.eta", "0.01", "Hebbian learning rate"},
            {"spcn.precision_eps", "0.3", "precision floor added to the error variance"},
            {"spcn.use_spa", "1", "enable sparse predictive attention"},
            {"spcn.spa_unit_norm", "1", "scale retrieved states to unit norm"}};
  }
  if (command == "spen-train") return train_keys();
  if (command == "ablate") {
    auto keys = train_keys();
    keys.push_back({"arms", "static,linear_attention,softmax_attention", "predictor arms"});
    keys.push_back({"seeds", "1,2,3", "seeds per arm"});
    return keys;
  }
  if (command == "stream") {
    auto keys = train_keys();
    keys.push_back({"checkpoint", "", "trained model; empty trains one with the training keys"});
    keys.push_back({"stream.in", "", "in-distribution stream file; empty uses the synthetic prose stream"});
    keys.push_back({"stream.shifted", "", "shifted stream file; empty uses the synthetic arithmetic stream"});
    keys.push_back({"window", "200", "tokens per perplexity window"});
    keys.push_back({"etas", "1e-3,1e-4,1e-5,0", "fast-weight learning rates"});
    keys.push_back({"pi_maxes", "1,100", "precision ceilings"});
    keys.push_back({"fw.pi_min", "0.1", "precision floor"});
    keys.push_back({"fw.decay", "1e-3", "per-token decay of the fast-weight delta"});
    keys.push_back({"fw.rho", "0.99", "error-variance smoothing"});
    keys.push_back({"fw.eps", "1e-2", "precision epsilon"});
    return keys;
  }
  if (command == "bench") {
    return {{"T", "65536", "sequence length"},
            {"d", "128", "channels"},
            {"chunk_len", "256", "chunk length"},
            {"lanes", "1", "worker threads for the chunk phases"},
            {"repeats", "3", "timed repetitions (best is kept)"},
            {"seed", "0", "input seed"}};
  }
  throw ConfigError("unknown command " + command);
}

void run_command(const std::string& command, const Config& config, const RunOptions& options, const Logger& log) {
  if (command == "grammar") return cmd_grammar(config, options, log);
  if (command == "table1") return cmd_table1(config, options, log);
  if (command == "spen-train") return cmd_spen_train(config, options, log);
  if (command == "ablate") return cmd_ablate(config, options, log);
  if (command == "stream") return cmd_stream(config, options, log);
  if (command == "bench") return cmd_bench(config, options, log);
  throw ConfigError("unknown command " + command);
}

}  // namespace ematrace::cli
