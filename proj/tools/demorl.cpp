// demorl command-line entry point. Exit codes: 0 ok, 1 runtime failure,
// 2 bad configuration or usage.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "demorl/demos.hpp"
#include "demorl/errors.hpp"
#include "demorl/replay.hpp"
#include "demorl/teleop.hpp"
#include "demorl/trainer.hpp"

namespace fs = std::filesystem;
using namespace demorl;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

const std::vector<std::string> kTaskKeys{"task", "reward", "horizon", "delta"};
const std::vector<std::string> kDemoKeys{"task",        "reward",         "horizon",       "delta", "seed",
                                         "demo_sigma", "demo_drop_prob", "demo_max_step", "n_demos"};

// Relative paths that do not exist are looked up in $DEMORL_CONFIG_DIR.
fs::path resolve_config(const std::string& path) {
  const fs::path p(path);
  if (fs::exists(p)) return p;
  if (const char* dir = std::getenv("DEMORL_CONFIG_DIR"); dir && p.is_relative()) {
    const fs::path q = fs::path(dir) / p;
    if (fs::exists(q)) return q;
  }
  throw ConfigError("config file not found: " + path);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// --config plus one --<key> option per TrainConfig key; flags override the file.
class ConfigFlags {
 public:
  void attach(CLI::App* app, const std::vector<std::string>& keys) {
    app->add_option("--config", config_path_, "Config file of key = value lines (also searched in $DEMORL_CONFIG_DIR)");
    const auto defaults = train::to_key_values(train::TrainConfig{});
    for (const auto& key : keys) {
      options_[key] = app->add_option("--" + key, values_[key], "Config key " + key)->default_str(defaults.at(key));
    }
  }

  bool explicit_key(const std::string& key) const {
    const auto it = options_.find(key);
    return (it != options_.end() && it->second->count() > 0) || file_keys_.count(key) > 0;
  }

  train::TrainConfig build() {
    train::TrainConfig cfg;
    if (!config_path_.empty()) {
      const auto kv = train::read_key_values(resolve_config(config_path_));
      for (const auto& [k, v] : kv) file_keys_[k] = v;
      train::apply(cfg, kv);
    }
    train::KeyValues overrides;
    for (const auto& [key, opt] : options_) {
      if (opt->count() > 0) overrides[key] = values_.at(key);
    }
    train::apply(cfg, overrides);
    train::validate(cfg);
    return cfg;
  }

 private:
  std::string config_path_;
  std::map<std::string, std::string> values_;
  std::map<std::string, CLI::Option*> options_;
  train::KeyValues file_keys_;
};

int cmd_train(ConfigFlags& flags, const std::string& out, bool resume) {
  const train::TrainConfig cfg = flags.build();
  const auto rows = train::train_to_dir(cfg, out, resume, &std::cerr);
  std::cout << "trained " << rows.size() << " epochs, best success " << train::best_success(rows) << ", metrics in "
            << (fs::path(out) / "metrics.csv").string() << '\n';
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& config_path, std::optional<std::uint64_t> seed,
             int episodes) {
  const fs::path dir(run_dir);
  train::TrainConfig cfg;
  train::apply(cfg, train::read_key_values(config_path.empty() ? dir / "config.cfg" : resolve_config(config_path)));
  train::Trainer trainer(cfg);
  trainer.load_checkpoint(dir / "checkpoint");
  Rng rng = derive_rng(seed.value_or(cfg.seed), train::kEval);
  Rng unused(0);
  const auto& ac = trainer.networks();
  const auto& enc = trainer.encoder();
  const train::Policy pi = [&](const world::WorldState& s, const world::Goal& g) {
    return agent::act(ac, enc, s, g, cfg.noise, unused, false);
  };
  const int n = episodes > 0 ? episodes : cfg.eval_episodes;
  const train::EvalResult r = train::evaluate(pi, trainer.task(), n, rng);
  const nlohmann::json report = {{"task", trainer.task().name()},     {"epoch", trainer.epoch()},
                                 {"episodes", n},                      {"success_rate", r.success_rate},
                                 {"mean_final_reward", r.mean_final_reward}};
  std::ofstream(dir / "eval.json") << report.dump(2) << '\n';
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_record(ConfigFlags& flags, const std::string& out, int n) {
  train::TrainConfig cfg = flags.build();
  if (n >= 0) cfg.n_demos = n;
  const world::TaskSpec task = cfg.task_spec();
  demos::DemonstratorConfig dc;
  dc.sigma = cfg.demo_sigma;
  dc.drop_prob = cfg.demo_drop_prob;
  dc.max_step = cfg.demo_max_step;
  dc.seed = cfg.seed;
  Rng rng = derive_rng(cfg.seed, train::kDemo);
  std::vector<demos::DemoEpisode> eps;
  int accepted = 0;
  for (int i = 0; i < cfg.n_demos; ++i) {
    eps.push_back(demos::scripted_demo(task, dc, rng));
    accepted += demos::accept_filter(eps.back(), task) ? 1 : 0;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  demos::save_demos(out, eps);
  std::cout << "wrote " << eps.size() << " " << task.name() << " demonstrations to " << out << " (" << accepted
            << " pass the acceptance filter)\n";
  return 0;
}

int cmd_filter(ConfigFlags& flags, const std::string& in, const std::string& out) {
  train::TrainConfig cfg = flags.build();
  const auto eps = demos::load_demos(in);
  if (!flags.explicit_key("task") && !eps.empty()) cfg.task = eps.front().task;
  const world::TaskSpec task = cfg.task_spec();
  std::vector<demos::DemoEpisode> kept;
  int replay_failures = 0;
  for (const auto& d : eps) {
    if (d.task != task.name()) throw ConfigError(in + " mixes tasks: found '" + d.task + "', expected '" + task.name() + "'");
    const bool replays = demos::replay_matches(d, task);
    if (!replays) ++replay_failures;
    if (replays && demos::accept_filter(d, task)) kept.push_back(d);
  }
  demos::save_demos(out, kept);
  std::cout << "kept " << kept.size() << " of " << eps.size() << " " << task.name() << " demonstrations";
  if (replay_failures) std::cout << " (" << replay_failures << " failed replay)";
  std::cout << "; wrote " << out << '\n';
  return 0;
}

int cmd_matrix(ConfigFlags& flags, const std::string& out, const std::string& tasks, const std::string& modes,
               const std::string& seeds) {
  const train::TrainConfig cfg = flags.build();
  std::vector<train::Mode> mode_list;
  try {
    for (const auto& m : split_list(modes)) mode_list.push_back(train::mode_from_string(m));
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) {
    try {
      seed_list.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + s + "'");
    }
  }
  const auto task_list = split_list(tasks);
  if (task_list.empty() || mode_list.empty() || seed_list.empty()) throw ConfigError("need tasks, modes and seeds");
  for (const auto& t : task_list) {
    train::TrainConfig probe = cfg;
    probe.task = t;
    train::validate(probe);
  }
  const auto cells = train::run_matrix(cfg, task_list, mode_list, seed_list, &std::cerr);
  fs::create_directories(out);
  const std::string table = train::matrix_csv(cells);
  std::ofstream(fs::path(out) / "matrix.csv") << table;
  std::cout << table;
  return 0;
}

int cmd_serve(ConfigFlags& flags, const std::string& out, const std::string& address, int port, double tick_hz,
              int max_sessions) {
  const train::TrainConfig cfg = flags.build();
  if (port < 0 || port > 65535) throw ConfigError("port must lie in [0, 65535]");
  if (!(tick_hz > 0.0)) throw ConfigError("tick rate must be positive");
  teleop::ServeOptions opts;
  opts.address = address;
  opts.port = static_cast<unsigned short>(port);
  opts.task = cfg.task_spec();
  opts.out_path = out;
  opts.seed = cfg.seed;
  opts.tick_hz = tick_hz;
  opts.max_sessions = max_sessions;
  opts.log = &std::cerr;
  opts.on_listening = [](unsigned short p) { std::cout << "listening " << p << std::endl; };
  teleop::serve(opts);
  return 0;
}

int cmd_audit(ConfigFlags& flags, const std::string& in, const std::string& out) {
  fs::path buffer_path(in);
  train::TrainConfig cfg = flags.build();
  if (fs::is_directory(buffer_path)) {
    if (fs::exists(buffer_path / "config.cfg") && !flags.explicit_key("task")) {
      train::apply(cfg, train::read_key_values(buffer_path / "config.cfg"));
    }
    buffer_path = buffer_path / "checkpoint" / "buffer.jsonl";
  }
  std::ifstream file(buffer_path);
  if (!file) throw InvalidInput("cannot read buffer snapshot " + buffer_path.string());
  std::string header;
  std::getline(file, header);
  if (!flags.explicit_key("task")) {
    const auto h = nlohmann::json::parse(header, nullptr, false);
    if (h.is_object() && h.contains("task")) cfg.task = h["task"].get<std::string>();
  }
  file.clear();
  file.seekg(0);
  const replay::ReplayBuffer buf = replay::ReplayBuffer::load(file);
  const auto report = replay::audit(buf, replay::reward_fn_for(cfg.task_spec()));
  const nlohmann::json j = {{"buffer", buffer_path.string()},
                            {"task", cfg.task_spec().name()},
                            {"reward", world::to_string(cfg.task_spec().reward)},
                            {"total", report.total},
                            {"reward_inconsistent", report.reward_inconsistent},
                            {"relabeled", report.relabeled}};
  if (!out.empty()) std::ofstream(out) << j.dump(2) << '\n';
  std::cout << j.dump() << '\n';
  return report.reward_inconsistent == 0 ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"demorl: goal-conditioned DDPG with demonstrations, hindsight relabeling and Q-filtered BC"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.");

  ConfigFlags train_flags, matrix_flags, record_flags, filter_flags, serve_flags, audit_flags;
  const std::vector<std::string> all_keys = train::config_keys();

  auto* train_cmd = app.add_subcommand("train", "Train one configuration; writes config.cfg, metrics.csv, timing.csv, checkpoint/");
  train_flags.attach(train_cmd, all_keys);
  std::string train_out = "runs/train";
  bool resume = false;
  train_cmd->add_option("--out", train_out, "Run directory")->capture_default_str();
  train_cmd->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run's checkpoint without exploration noise");
  std::string eval_out, eval_config;
  std::optional<std::uint64_t> eval_seed;
  int eval_episodes = 0;
  eval_cmd->add_option("--out", eval_out, "Run directory written by train")->required();
  eval_cmd->add_option("--config", eval_config, "Config file (default: <out>/config.cfg)");
  eval_cmd->add_option("--seed", eval_seed, "Evaluation seed (default: the run's seed)");
  eval_cmd->add_option("--episodes", eval_episodes, "Episodes (0: the run's eval_episodes)")->capture_default_str();

  auto* record_cmd = app.add_subcommand("record-scripted", "Record scripted demonstrations to a demo file");
  record_flags.attach(record_cmd, kDemoKeys);
  std::string record_out = "demos.jsonl";
  int record_n = -1;
  record_cmd->add_option("--out", record_out, "Demo file to write")->capture_default_str();
  record_cmd->add_option("--n", record_n, "Number of episodes (overrides n_demos)");

  auto* filter_cmd = app.add_subcommand("filter-demos", "Keep demonstrations that replay exactly and pass the acceptance filter");
  filter_flags.attach(filter_cmd, kTaskKeys);
  std::string filter_in, filter_out;
  filter_cmd->add_option("--in", filter_in, "Demo file to read")->required();
  filter_cmd->add_option("--out", filter_out, "Demo file to write")->required();

  auto* matrix_cmd = app.add_subcommand("run-matrix", "Best success per task and mode, median over seeds");
  matrix_flags.attach(matrix_cmd, all_keys);
  std::string matrix_out = "runs/matrix", matrix_tasks = "push,pick_place,stack_2", matrix_seeds = "1,2,3";
  std::string matrix_modes;
  for (const auto m : train::all_modes()) matrix_modes += (matrix_modes.empty() ? "" : ",") + train::to_string(m);
  matrix_cmd->add_option("--out", matrix_out, "Directory for matrix.csv")->capture_default_str();
  matrix_cmd->add_option("--tasks", matrix_tasks, "Comma-separated tasks")->capture_default_str();
  matrix_cmd->add_option("--modes", matrix_modes, "Comma-separated modes")->capture_default_str();
  matrix_cmd->add_option("--seeds", matrix_seeds, "Comma-separated seeds")->capture_default_str();

  auto* serve_cmd = app.add_subcommand("serve-teleop", "WebSocket teleoperation server recording human demonstrations");
  serve_flags.attach(serve_cmd, {"task", "reward", "horizon", "delta", "seed"});
  std::string serve_out = "teleop_demos.jsonl", serve_address = "127.0.0.1";
  int serve_port = 8765, serve_sessions = 0;
  double serve_hz = 20.0;
  serve_cmd->add_option("--out", serve_out, "Demo file accepted episodes are appended to")->capture_default_str();
  serve_cmd->add_option("--address", serve_address, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve_port, "Port (0 picks a free one)")->capture_default_str();
  serve_cmd->add_option("--tick-hz", serve_hz, "Action pacing rate")->capture_default_str();
  serve_cmd->add_option("--max-sessions", serve_sessions, "Exit after this many clients (0: never)")->capture_default_str();

  auto* audit_cmd = app.add_subcommand("audit-buffer", "Recompute every stored reward in a replay buffer snapshot");
  audit_flags.attach(audit_cmd, kTaskKeys);
  std::string audit_in, audit_out;
  audit_cmd->add_option("--in", audit_in, "buffer.jsonl or a run directory")->required();
  audit_cmd->add_option("--out", audit_out, "Optional JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags, train_out, resume);
    if (eval_cmd->parsed()) return cmd_eval(eval_out, eval_config, eval_seed, eval_episodes);
    if (record_cmd->parsed()) return cmd_record(record_flags, record_out, record_n);
    if (filter_cmd->parsed()) return cmd_filter(filter_flags, filter_in, filter_out);
    if (matrix_cmd->parsed()) return cmd_matrix(matrix_flags, matrix_out, matrix_tasks, matrix_modes, matrix_seeds);
    if (serve_cmd->parsed()) return cmd_serve(serve_flags, serve_out, serve_address, serve_port, serve_hz, serve_sessions);
    if (audit_cmd->parsed()) return cmd_audit(audit_flags, audit_in, audit_out);
  } catch (const ConfigError& e) {
    std::cerr << "demorl: configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "demorl: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
