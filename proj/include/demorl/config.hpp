#pragma once

// Training configuration: one flat struct, a key = value text format, and the
// mode -> component wiring.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "demorl/agent.hpp"
#include "demorl/world.hpp"

namespace demorl::train {

enum class Mode { ours, ours_resets, bc, her, bc_her, no_bc, no_qfilter, no_her };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);
const std::vector<Mode>& all_modes();

struct TrainConfig {
  std::string task = "push";
  Mode mode = Mode::ours;
  std::string reward = "default";  // or sparse | stack_sparse | step
  int horizon = 0;                 // 0 = task default
  double delta = 0.05;

  int epochs = 50;
  int cycles_per_epoch = 10;
  int rollouts_per_cycle = 2;
  int updates_per_cycle = 40;
  int eval_episodes = 50;
  double reset_from_demo_prob = 0.5;  // used by ours_resets only
  std::uint64_t seed = 0;
  double stop_success = 0.0;  // stop once eval success reaches this; 0 disables

  agent::LossWeights weights{.lambda1 = 1.0};  // q_filter / bc_enabled are set by the mode
  bool lambda2_auto = true;    // lambda2 = 1 / demo_batch_size
  double lambda1_no_bc = 1.0;  // lambda1 for modes without the BC term
  agent::TrainHyper hyper;
  bool clip_target = false;  // clip Bellman targets to the discounted return range of the reward
  agent::NoiseConfig noise;
  std::vector<std::size_t> hidden{64, 64};

  int batch_size = 256;
  int demo_batch_size = 32;
  std::size_t buffer_capacity = 1'000'000;

  std::string demo_path;  // empty: generate scripted demos in-process
  int n_demos = 100;
  double demo_sigma = 0.01;
  double demo_drop_prob = 0.1;
  double demo_max_step = 0.1;
  int bc_pretrain_steps = 2000;  // bc_her only

  int checkpoint_every = 0;  // epochs; 0 = final checkpoint only
  bool save_buffer = true;   // include the replay buffer in checkpoints

  /// Task with reward / horizon / delta overrides applied.
  world::TaskSpec task_spec() const;
};

/// Component switches implied by a mode. Logged at startup.
struct ModeFlags {
  bool her_enabled = true;
  bool bc_enabled = true;
  bool q_filter = true;
  bool rl_enabled = true;     // false for pure behavior cloning
  bool bc_pretrain = false;
  bool needs_demos = true;
  double reset_from_demo_prob = 0.0;
  int demo_batch_size = 0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

/// Throws ConfigError on inconsistent settings.
ModeFlags resolve_flags(const TrainConfig& cfg);
void validate(const TrainConfig& cfg);

/// `key = value` lines; '#' starts a comment. Unknown keys and bad values
/// raise ConfigError.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text, const std::string& origin = "config");
KeyValues read_key_values(const std::filesystem::path& path);
void apply(TrainConfig& cfg, const KeyValues& kv);
/// Every key with its current value, in canonical order.
KeyValues to_key_values(const TrainConfig& cfg);
std::string to_text(const TrainConfig& cfg);
/// FNV-1a of to_text, ignoring epochs, stop_success and checkpoint_every.
std::uint64_t config_hash(const TrainConfig& cfg);
/// Known keys in canonical order.
const std::vector<std::string>& config_keys();

}  // namespace demorl::train
