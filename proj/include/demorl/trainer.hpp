#pragma once

// Training loop: rollouts (optionally restarted from demonstration states),
// hindsight storage, actor-critic updates, noise-free evaluation, metrics,
// checkpoints and the baseline/ablation comparison matrix.

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "demorl/agent.hpp"
#include "demorl/config.hpp"
#include "demorl/demos.hpp"
#include "demorl/replay.hpp"
#include "demorl/world.hpp"

namespace demorl::train {

/// derive_rng stream ids; one independent generator per consumer.
enum Stream : std::uint64_t { kInit = 1, kRollout = 2, kSample = 3, kDemo = 4, kEval = 5, kPretrain = 6 };

struct MetricsRow {
  int epoch = 0;
  double success_rate = 0.0;
  double mean_final_reward = 0.0;
  double critic_loss = 0.0;
  double bc_loss = 0.0;
  double masked_fraction = 0.0;
  double wall_time = 0.0;  // seconds since start; written to timing.csv only
};

inline constexpr const char* kMetricsHeader = "epoch,success_rate,mean_final_reward,critic_loss,bc_loss,masked_fraction";
std::string metrics_line(const MetricsRow& row);

struct EvalResult {
  double success_rate = 0.0;
  double mean_final_reward = 0.0;
};

/// Demo chosen uniformly, state index uniform on {0..L}, goal achieved by the
/// demo's final state.
std::pair<world::WorldState, world::Goal> reset_from_demo(Rng& rng, const std::vector<demos::DemoEpisode>& demos);

/// Noise-free rollouts from sample_task starts. `policy` is any state/goal -> action map.
using Policy = std::function<world::Action(const world::WorldState&, const world::Goal&)>;
EvalResult evaluate(const Policy& policy, const world::TaskSpec& task, int episodes, Rng& rng);

/// Minibatch regression of actor outputs onto demonstration actions with the
/// loss lambda2 * sum ||pi(s) - a||^2. Returns the last minibatch loss.
double bc_pretrain(agent::ActorCritic& ac, const replay::DemoBuffer& demos, const agent::Encoder& enc, int steps,
                   int batch, double lambda2, const agent::TrainHyper& hyper, Rng& rng);

/// Recorded demos (n_demos scripted, or loaded from demo_path) filtered by accept_filter.
std::vector<demos::DemoEpisode> prepare_demos(const TrainConfig& cfg);

struct UpdateInfo {
  double critic_loss = 0.0;
  double bc_loss = 0.0;
  std::vector<int> mask;
};

/// Called between the critic and actor updates with the networks the actor
/// update sees and its result.
using UpdateHook = std::function<void(const agent::ActorCritic& before_actor_step, const agent::Batch& batch,
                                      const agent::ActorUpdateResult& result)>;

class Trainer {
 public:
  /// `demos_in` overrides demo preparation when given.
  explicit Trainer(TrainConfig cfg, std::optional<std::vector<demos::DemoEpisode>> demos_in = std::nullopt);

  const TrainConfig& config() const { return cfg_; }
  const ModeFlags& flags() const { return flags_; }
  const world::TaskSpec& task() const { return task_; }
  const agent::Encoder& encoder() const { return enc_; }
  agent::ActorCritic& networks() { return ac_; }
  const agent::ActorCritic& networks() const { return ac_; }
  const replay::ReplayBuffer& buffer() const { return buffer_; }
  replay::ReplayBuffer& buffer() { return buffer_; }
  const replay::DemoBuffer& demo_buffer() const { return demo_buffer_; }
  const std::vector<demos::DemoEpisode>& demos() const { return demos_; }
  Rng& sample_rng() { return sample_rng_; }
  int epoch() const { return epoch_; }
  const std::vector<MetricsRow>& history() const { return history_; }

  void set_update_hook(UpdateHook hook) { hook_ = std::move(hook); }

  /// One exploratory episode, optionally from a demonstration state; stored per mode.
  replay::Episode rollout();
  /// One minibatch update (critic, actor, targets; actor only for mode bc).
  UpdateInfo update();
  EvalResult evaluate_policy() const;
  /// Rollouts + updates + evaluation; appends and returns the row.
  MetricsRow run_epoch();
  /// Runs to cfg.epochs (or stop_success). Returns the full history.
  const std::vector<MetricsRow>& run(const std::function<void(const MetricsRow&)>& on_epoch = {});

  /// Checkpoint JSON (networks, optimizer and rng states, epoch, history,
  /// config hash). The replay buffer is written beside it when enabled.
  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

  std::string flags_summary() const;

 private:
  world::Action policy_action(const world::WorldState& s, const world::Goal& g, bool explore);

  TrainConfig cfg_;
  ModeFlags flags_;
  world::TaskSpec task_;
  agent::Encoder enc_;
  replay::RewardFn reward_fn_;
  agent::ActorCritic ac_;
  replay::ReplayBuffer buffer_;
  std::vector<demos::DemoEpisode> demos_;
  replay::DemoBuffer demo_buffer_;
  Rng rollout_rng_;
  Rng sample_rng_;
  int epoch_ = 0;
  std::vector<MetricsRow> history_;
  UpdateHook hook_;
  double start_time_ = 0.0;
  double wall_offset_ = 0.0;
};

/// Writes config.cfg, metrics.csv and timing.csv under `out_dir` while
/// training, plus checkpoints. With `resume`, continues from out_dir's checkpoint.
std::vector<MetricsRow> train_to_dir(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool resume,
                                     std::ostream* log);

double best_success(const std::vector<MetricsRow>& rows);
/// First epoch whose success reaches `threshold`, if any.
std::optional<int> first_epoch_reaching(const std::vector<MetricsRow>& rows, double threshold);

struct MatrixCell {
  std::string task;
  Mode mode;
  std::vector<double> best;  // per seed
  double median() const;
};

/// Runs every (task, mode, seed) from `base`, returns cells in task-major order.
std::vector<MatrixCell> run_matrix(const TrainConfig& base, const std::vector<std::string>& tasks,
                                   const std::vector<Mode>& modes, const std::vector<std::uint64_t>& seeds,
                                   std::ostream* log = nullptr);
/// CSV: header "task,<mode>...", one row per task of per-cell medians.
std::string matrix_csv(const std::vector<MatrixCell>& cells);

}  // namespace demorl::train
