#pragma once

// Scripted (deliberately imperfect) demonstrator, demonstration acceptance
// filtering and the JSON-Lines demo file shared with human teleoperation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "demorl/replay.hpp"
#include "demorl/rng.hpp"
#include "demorl/world.hpp"

namespace demorl::demos {

using world::Action;
using world::Goal;
using world::TaskSpec;
using world::WorldState;

enum class Source { scripted, human };

std::string to_string(Source s);
Source source_from_string(const std::string& s);

struct DemoStep {
  WorldState state;
  Action action;

  friend bool operator==(const DemoStep&, const DemoStep&) = default;
};

/// x_0, u_0, ..., x_{L-1}, u_{L-1}, x_L. initial == steps[0].state when L > 0.
struct DemoEpisode {
  std::string task;  // TaskSpec::name()
  WorldState initial;
  Goal goal;
  std::vector<DemoStep> steps;
  WorldState final_state;
  Source source = Source::scripted;
  bool success = false;

  std::size_t length() const { return steps.size(); }
  /// State i for i in [0, length()]; length() is final_state.
  const WorldState& state_at(std::size_t i) const;

  friend bool operator==(const DemoEpisode&, const DemoEpisode&) = default;
};

struct DemonstratorConfig {
  double sigma = 0.01;      // waypoint jitter, m
  double drop_prob = 0.1;   // chance that a placement attempt drops the block off target
  double max_step = 0.1;    // per-axis gripper speed, m/tick
  std::uint64_t seed = 0;
};

/// Closed-loop waypoint controller. One instance drives one episode; call
/// next() with the current state each tick.
class ScriptedDemonstrator {
 public:
  ScriptedDemonstrator(TaskSpec task, DemonstratorConfig cfg, Rng& rng);
  Action next(const WorldState& state, const Goal& goal);

 private:
  enum class Phase { approach, descend, close, lift, transport, lower, release, retreat, hold, done };

  Action next_pick(const WorldState& s, const Goal& g);
  Action next_push(const WorldState& s, const Goal& g, bool slide);
  world::Vec3 jitter(bool vertical);
  void start_block(std::size_t idx);
  world::Vec3 plan_drop(const world::Vec3& block, const world::Vec3& target, const world::Vec3& offset, double carry_z);

  TaskSpec task_;
  DemonstratorConfig cfg_;
  Rng* rng_;
  Phase phase_ = Phase::approach;
  std::size_t order_pos_ = 0;
  std::vector<std::size_t> order_;
  world::Vec3 jitter_ = world::Vec3::Zero();
  std::optional<world::Vec3> waypoint_;
  std::optional<world::Vec3> drop_point_;
  bool repositioning_ = true;
  bool struck_ = false;
};

DemoEpisode scripted_demo(const TaskSpec& task, const DemonstratorConfig& cfg, Rng& rng);

/// Keeps successful demonstrations; slide demonstrations are kept regardless;
/// stack demonstrations are also rejected when a block that had reached its
/// target is out of place at the end.
bool accept_filter(const DemoEpisode& demo, const TaskSpec& task);

/// Re-simulates the actions from the initial state; true iff every stored
/// state (and the final one) is reproduced bit-exactly.
bool replay_matches(const DemoEpisode& demo, const TaskSpec& task);

/// Transitions with rewards for `task`'s reward kind, goal = demo goal.
replay::Episode to_episode(const DemoEpisode& demo, const TaskSpec& task);

inline constexpr const char* kDemoFormat = "demorl-demo";
inline constexpr int kDemoFormatVersion = 1;

/// One self-describing JSON episode per line.
void save_demos(const std::filesystem::path& path, const std::vector<DemoEpisode>& episodes);
void append_demo(const std::filesystem::path& path, const DemoEpisode& episode);
/// Empty file -> empty list. Malformed lines raise InvalidInput naming the line.
std::vector<DemoEpisode> load_demos(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const DemoEpisode& d);
void from_json(const nlohmann::json& j, DemoEpisode& d);

}  // namespace demorl::demos
