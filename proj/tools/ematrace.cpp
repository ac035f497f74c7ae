// ematrace <command> [--config FILE] [--out DIR] [--force] [key=value ...]
//
// Exit codes: 0 success, 2 config error, 3 invariant violation,
// 4 divergence, 1 anything else.

#include "commands.hpp"
#include "config.hpp"

#include "ematrace/train.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace ematrace;

namespace {

struct SubOptions {
  std::string config_file;
  std::string out_dir;
  bool force = false;
  std::vector<std::string> overrides;
};

// An output directory is reused only with --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw cli::ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw cli::ConfigError(dir.string() + " is not empty; pass --force to overwrite");
    }
  }
  fs::create_directories(dir);
}

int run(const std::string& command, const SubOptions& so) {
  cli::Config config(cli::command_keys(command));
  if (!so.config_file.empty()) config.load_file(so.config_file);
  for (const auto& o : so.overrides) config.assign(o);

  cli::RunOptions opt;
  opt.out_dir = so.out_dir.empty() ? fs::path("runs") / command : fs::path(so.out_dir);
  opt.force = so.force;
  prepare_out_dir(opt.out_dir, opt.force);
  {
    std::ofstream snap(opt.out_dir / "config.txt");
    snap << "# resolved config for `ematrace " << command << "`\n" << config.snapshot();
  }
  std::ofstream log_file(opt.out_dir / "log.txt");
  const auto t0 = std::chrono::steady_clock::now();
  Logger log = [&](const std::string& line) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char stamp[32];
    std::snprintf(stamp, sizeof stamp, "[%8.1fs] ", s);
    std::cerr << stamp << line << '\n';
    log_file << stamp << line << '\n';
    log_file.flush();
  };
  cli::run_command(command, config, opt, log);
  log("done; outputs in " + opt.out_dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ematrace: EMA-trace experiment workbench"};
  app.require_subcommand(1);
  std::map<std::string, SubOptions> options;
  for (const auto& name : cli::command_names()) {
    auto& so = options[name];
    auto* sub = app.add_subcommand(name, cli::command_summary(name));
    sub->add_option("--config", so.config_file, "key=value config file");
    sub->add_option("--out", so.out_dir, "output directory (default runs/<command>)");
    sub->add_flag("--force", so.force, "reuse a non-empty output directory");
    sub->add_option("overrides", so.overrides, "key=value overrides applied after the config file");
    sub->footer(cli::Config(cli::command_keys(name)).help());
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  for (const auto& name : cli::command_names()) {
    if (!app.got_subcommand(name)) continue;
    try {
      return run(name, options[name]);
    } catch (const cli::ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return 2;
    } catch (const cli::InvariantError& e) {
      std::cerr << "invariant violated: " << e.what() << '\n';
      return 3;
    } catch (const spen::DivergenceError& e) {
      std::cerr << "diverged: " << e.what() << '\n';
      return 4;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}
