#pragma once

// Agent replay buffer R (FIFO ring), the immutable demonstration buffer R_D,
// final-state hindsight relabeling and mixed minibatch sampling.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "demorl/rng.hpp"
#include "demorl/world.hpp"

namespace demorl::replay {

using world::Action;
using world::Goal;
using world::WorldState;

using RewardFn = std::function<double(const WorldState& next_state, const Goal& goal)>;

/// Reward function for a task's configured reward kind.
RewardFn reward_fn_for(const world::TaskSpec& task);

struct Transition {
  WorldState state;
  Action action;
  WorldState next_state;
  Goal goal;
  double reward = 0.0;
  bool relabeled = false;  // hindsight copy

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct Episode {
  std::vector<Transition> transitions;

  std::size_t size() const { return transitions.size(); }
  /// next_state of step k equals state of step k+1 and every step shares one goal.
  bool well_formed() const;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1'000'000);

  void push(Transition t);
  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }
  /// Slot the next push overwrites once full.
  std::size_t cursor() const { return cursor_; }
  std::uint64_t total_inserted() const { return total_inserted_; }

  /// Storage-order access; index < size().
  const Transition& at(std::size_t i) const { return storage_[i]; }
  /// Insertion-order access: 0 is the oldest surviving transition.
  const Transition& oldest(std::size_t i) const;

  void save(std::ostream& out, const std::string& task_name) const;
  static ReplayBuffer load(std::istream& in);

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::uint64_t total_inserted_ = 0;
  std::vector<Transition> storage_;
};

/// Demonstration transitions; fixed at construction.
class DemoBuffer {
 public:
  DemoBuffer() = default;
  DemoBuffer(std::vector<Episode> episodes, const RewardFn& reward_fn, bool her_enabled);

  const std::vector<Episode>& episodes() const { return episodes_; }
  const std::vector<Transition>& transitions() const { return transitions_; }
  std::size_t size() const { return transitions_.size(); }
  bool empty() const { return transitions_.empty(); }
  std::uint64_t content_hash() const;

 private:
  std::vector<Episode> episodes_;
  std::vector<Transition> transitions_;
};

/// Inserts `episode` with its own goal and, when her_enabled, a second time with
/// the goal achieved in its final next_state (rewards recomputed).
void store_episode_with_her(ReplayBuffer& buffer, const Episode& episode, const RewardFn& reward_fn,
                            bool her_enabled, std::size_t horizon);

/// The episode with every goal replaced by the goal achieved in its final
/// next_state and rewards recomputed; flagged relabeled.
Episode hindsight_copy(const Episode& episode, const RewardFn& reward_fn);

/// Hindsight copy of `episode` computed from scratch; test oracle for the store path.
Episode her_relabel_oracle(const Episode& episode, const RewardFn& reward_fn);

struct Sample {
  const Transition* transition = nullptr;
  bool is_demo = false;
};

/// n uniform draws (with replacement) from r followed by n_demo draws from demos.
std::vector<Sample> sample_minibatch(Rng& rng, const ReplayBuffer& r, const DemoBuffer& demos, std::size_t n,
                                     std::size_t n_demo);

struct AuditReport {
  std::size_t total = 0;
  std::size_t reward_inconsistent = 0;
  std::size_t relabeled = 0;
};

AuditReport audit(const ReplayBuffer& buffer, const RewardFn& reward_fn);

std::uint64_t transition_hash(const Transition& t, std::uint64_t seed = 1469598103934665603ull);

void to_json(nlohmann::json& j, const Transition& t);
void from_json(const nlohmann::json& j, Transition& t);

}  // namespace demorl::replay
