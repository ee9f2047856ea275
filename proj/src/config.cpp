#include "demorl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "demorl/errors.hpp"

namespace demorl::train {

namespace {

const std::vector<std::pair<Mode, std::string>> kModeNames = {
    {Mode::ours, "ours"},     {Mode::ours_resets, "ours_resets"}, {Mode::bc, "bc"},
    {Mode::her, "her"},       {Mode::bc_her, "bc_her"},           {Mode::no_bc, "no_bc"},
    {Mode::no_qfilter, "no_qfilter"}, {Mode::no_her, "no_her"}};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename T>
Field int_field(std::string key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) {
            const long long x = parse_int(key, v);
            if (x < 0 || static_cast<unsigned long long>(x) > std::numeric_limits<T>::max()) {
              throw ConfigError("config key '" + key + "': value out of range");
            }
            c.*member = static_cast<T>(x);
          }};
}

Field double_field(std::string key, std::function<double&(TrainConfig&)> ref) {
  return {key, [ref](const TrainConfig& c) { return fmt_double(ref(const_cast<TrainConfig&>(c))); },
          [key, ref](TrainConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

Field bool_field(std::string key, bool TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

Field string_field(std::string key, std::string TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return c.*member; },
          [member](TrainConfig& c, const std::string& v) { c.*member = v; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      string_field("task", &TrainConfig::task),
      {"mode", [](const TrainConfig& c) { return to_string(c.mode); },
       [](TrainConfig& c, const std::string& v) {
         try {
           c.mode = mode_from_string(v);
         } catch (const InvalidInput& e) {
           throw ConfigError(e.what());
         }
       }},
      string_field("reward", &TrainConfig::reward),
      int_field("horizon", &TrainConfig::horizon),
      double_field("delta", [](TrainConfig& c) -> double& { return c.delta; }),
      int_field("epochs", &TrainConfig::epochs),
      int_field("cycles_per_epoch", &TrainConfig::cycles_per_epoch),
      int_field("rollouts_per_cycle", &TrainConfig::rollouts_per_cycle),
      int_field("updates_per_cycle", &TrainConfig::updates_per_cycle),
      int_field("eval_episodes", &TrainConfig::eval_episodes),
      double_field("reset_from_demo_prob", [](TrainConfig& c) -> double& { return c.reset_from_demo_prob; }),
      int_field("seed", &TrainConfig::seed),
      double_field("stop_success", [](TrainConfig& c) -> double& { return c.stop_success; }),
      double_field("lambda1", [](TrainConfig& c) -> double& { return c.weights.lambda1; }),
      {"lambda2",
       [](const TrainConfig& c) { return c.lambda2_auto ? std::string("auto") : fmt_double(c.weights.lambda2); },
       [](TrainConfig& c, const std::string& v) {
         c.lambda2_auto = v == "auto";
         if (!c.lambda2_auto) c.weights.lambda2 = parse_double("lambda2", v);
       }},
      double_field("lambda1_no_bc", [](TrainConfig& c) -> double& { return c.lambda1_no_bc; }),
      double_field("gamma", [](TrainConfig& c) -> double& { return c.hyper.gamma; }),
      double_field("tau", [](TrainConfig& c) -> double& { return c.hyper.tau; }),
      double_field("critic_l2", [](TrainConfig& c) -> double& { return c.hyper.critic_l2; }),
      double_field("actor_l2", [](TrainConfig& c) -> double& { return c.hyper.actor_l2; }),
      bool_field("clip_target", &TrainConfig::clip_target),
      double_field("actor_lr", [](TrainConfig& c) -> double& { return c.hyper.actor_lr; }),
      double_field("critic_lr", [](TrainConfig& c) -> double& { return c.hyper.critic_lr; }),
      double_field("eps_random", [](TrainConfig& c) -> double& { return c.noise.eps_random; }),
      double_field("uniform_frac", [](TrainConfig& c) -> double& { return c.noise.uniform_frac; }),
      {"hidden",
       [](const TrainConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.hidden[i]);
         return s;
       },
       [](TrainConfig& c, const std::string& v) {
         c.hidden.clear();
         std::stringstream ss(v);
         std::string part;
         while (std::getline(ss, part, ',')) {
           const long long w = parse_int("hidden", trim(part));
           if (w <= 0) throw ConfigError("config key 'hidden': widths must be positive");
           c.hidden.push_back(static_cast<std::size_t>(w));
         }
         if (c.hidden.empty()) throw ConfigError("config key 'hidden': need at least one layer width");
       }},
      int_field("batch_size", &TrainConfig::batch_size),
      int_field("demo_batch_size", &TrainConfig::demo_batch_size),
      int_field("buffer_capacity", &TrainConfig::buffer_capacity),
      string_field("demo_path", &TrainConfig::demo_path),
      int_field("n_demos", &TrainConfig::n_demos),
      double_field("demo_sigma", [](TrainConfig& c) -> double& { return c.demo_sigma; }),
      double_field("demo_drop_prob", [](TrainConfig& c) -> double& { return c.demo_drop_prob; }),
      double_field("demo_max_step", [](TrainConfig& c) -> double& { return c.demo_max_step; }),
      int_field("bc_pretrain_steps", &TrainConfig::bc_pretrain_steps),
      int_field("checkpoint_every", &TrainConfig::checkpoint_every),
      bool_field("save_buffer", &TrainConfig::save_buffer),
  };
  return f;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

std::string to_string(Mode m) {
  for (const auto& [mode, name] : kModeNames)
    if (mode == m) return name;
  return "?";
}

Mode mode_from_string(const std::string& s) {
  for (const auto& [mode, name] : kModeNames)
    if (name == s) return mode;
  throw InvalidInput("unknown mode '" + s + "'");
}

const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> m = [] {
    std::vector<Mode> out;
    for (const auto& p : kModeNames) out.push_back(p.first);
    return out;
  }();
  return m;
}

world::TaskSpec TrainConfig::task_spec() const {
  world::TaskSpec t;
  try {
    t = world::TaskSpec::from_name(task);
    if (reward != "default") t.reward = world::reward_kind_from_string(reward);
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (horizon > 0) t.horizon = static_cast<std::size_t>(horizon);
  t.delta = delta;
  return t;
}

void validate(const TrainConfig& c) {
  (void)c.task_spec();  // throws on unknown task or reward names
  require(c.delta > 0.0, "delta must be positive");
  require(c.epochs >= 1, "epochs must be at least 1");
  require(c.cycles_per_epoch >= 1 && c.rollouts_per_cycle >= 1, "need at least one rollout per epoch");
  require(c.eval_episodes >= 1, "eval_episodes must be at least 1");
  require(c.batch_size >= 1, "batch_size must be at least 1");
  require(c.hyper.gamma >= 0.0 && c.hyper.gamma < 1.0, "gamma must lie in [0, 1)");
  require(c.hyper.tau > 0.0 && c.hyper.tau <= 1.0, "tau must lie in (0, 1]");
  require(c.hyper.critic_l2 >= 0.0 && c.hyper.actor_l2 >= 0.0, "L2 coefficients must be non-negative");
  require(c.hyper.actor_lr >= 0.0 && c.hyper.critic_lr >= 0.0, "learning rates must be non-negative");
  require(c.weights.lambda1 >= 0.0 && c.weights.lambda2 >= 0.0 && c.lambda1_no_bc >= 0.0,
          "loss weights must be non-negative");
  require(c.noise.eps_random >= 0.0 && c.noise.eps_random <= 1.0, "eps_random must lie in [0, 1]");
  require(c.noise.uniform_frac >= 0.0 && c.noise.uniform_frac <= 1.0, "uniform_frac must lie in [0, 1]");
  require(c.reset_from_demo_prob >= 0.0 && c.reset_from_demo_prob <= 1.0, "reset_from_demo_prob must lie in [0, 1]");
  require(c.stop_success >= 0.0 && c.stop_success <= 1.0, "stop_success must lie in [0, 1]");
  require(c.demo_sigma >= 0.0, "demo_sigma must be non-negative");
  require(c.demo_max_step > 0.0 && c.demo_max_step <= world::kStepMax, "demo_max_step must lie in (0, 0.1]");
  require(c.demo_drop_prob >= 0.0 && c.demo_drop_prob <= 1.0, "demo_drop_prob must lie in [0, 1]");
  require(c.buffer_capacity >= 1, "buffer_capacity must be at least 1");
  require(!c.hidden.empty(), "hidden must list at least one layer");
}

ModeFlags resolve_flags(const TrainConfig& c) {
  validate(c);
  ModeFlags f;
  f.demo_batch_size = c.demo_batch_size;
  switch (c.mode) {
    case Mode::ours:
    case Mode::ours_resets:
      break;
    case Mode::bc:
      f.rl_enabled = false;
      f.her_enabled = false;
      f.q_filter = false;
      break;
    case Mode::her:
      f.bc_enabled = false;
      f.q_filter = false;
      f.needs_demos = false;
      f.demo_batch_size = 0;
      break;
    case Mode::bc_her:
      f.bc_enabled = false;
      f.q_filter = false;
      f.bc_pretrain = true;
      f.demo_batch_size = 0;
      break;
    case Mode::no_bc:
      f.bc_enabled = false;
      f.q_filter = false;
      break;
    case Mode::no_qfilter:
      f.q_filter = false;
      break;
    case Mode::no_her:
      f.her_enabled = false;
      break;
  }
  if (c.mode == Mode::ours_resets) {
    require(c.reset_from_demo_prob > 0.0, "mode ours_resets needs reset_from_demo_prob > 0");
    f.reset_from_demo_prob = c.reset_from_demo_prob;
  }
  const bool uses_demo_batch = f.bc_enabled || c.mode == Mode::no_bc;
  if (uses_demo_batch) require(f.demo_batch_size >= 1, "mode " + to_string(c.mode) + " needs demo_batch_size >= 1");
  if (f.needs_demos) require(c.n_demos >= 1 || !c.demo_path.empty(), "mode " + to_string(c.mode) + " needs demonstrations");
  if (f.bc_pretrain) require(c.bc_pretrain_steps >= 0, "bc_pretrain_steps must be non-negative");
  if (!f.rl_enabled) require(c.updates_per_cycle >= 1, "mode bc needs updates_per_cycle >= 1");
  f.lambda1 = f.bc_enabled ? c.weights.lambda1 : c.lambda1_no_bc;
  if (!f.rl_enabled) f.lambda1 = 0.0;
  f.lambda2 = c.lambda2_auto ? (f.demo_batch_size > 0 ? 1.0 / f.demo_batch_size : 0.0) : c.weights.lambda2;
  return f;
}

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void apply(TrainConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == key) {
        f.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
}

KeyValues to_key_values(const TrainConfig& cfg) {
  KeyValues kv;
  for (const auto& f : fields()) kv[f.key] = f.get(cfg);
  return kv;
}

std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  // Run length settings may change between a checkpoint and its resume.
  TrainConfig c = cfg;
  const TrainConfig defaults;
  c.epochs = defaults.epochs;
  c.stop_success = defaults.stop_success;
  c.checkpoint_every = defaults.checkpoint_every;
  std::uint64_t h = 1469598103934665603ull;
  for (const char ch : to_text(c)) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

}  // namespace demorl::train
