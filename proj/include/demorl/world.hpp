#pragma once

// Deterministic kinematic block world. A spherical fingertip moves in a box
// above a table; cylindrical blocks are grasped, pushed, carried, released and
// settle by instantaneous vertical drops. No dynamics beyond an exponential
// velocity decay used by the slide task.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "demorl/rng.hpp"

namespace demorl::world {

using Vec3 = Eigen::Vector3d;

inline constexpr double kBlockSize = 0.05;
inline constexpr double kBlockHalf = kBlockSize / 2.0;
inline constexpr double kGraspRadius = 0.03;
inline constexpr double kFingerRadius = 0.015;
inline constexpr double kFriction = 0.92;  // velocity multiplier per tick
inline constexpr double kMinSpeed = 1e-3;  // m/tick; slower blocks stop
inline constexpr double kMaxSpeed = 0.1;   // cap on imparted block speed, m/tick
inline constexpr double kTableZ = 0.0;
inline constexpr double kStepMax = 0.1;   // per-axis gripper displacement per tick
inline constexpr double kSubstep = 0.005;  // contact resolution granularity
inline constexpr double kControlHz = 50.0;  // nominal rate, metadata only
/// Ticks after which a released block at kMaxSpeed has come to rest.
int settle_ticks();

struct Block {
  Vec3 pos = Vec3::Zero();  // centre, m
  Vec3 vel = Vec3::Zero();  // m/tick

  friend bool operator==(const Block&, const Block&) = default;
};

struct WorldState {
  Vec3 gripper = Vec3::Zero();
  double finger_gap = 1.0;  // 1 = open
  std::vector<Block> blocks;
  std::optional<std::size_t> attached;
  long tick = 0;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

struct Action {
  Vec3 delta = Vec3::Zero();  // m per tick
  double grip = 0.0;           // < 0 closes, > 0 opens; finger_gap integrates it

  friend bool operator==(const Action&, const Action&) = default;
};

struct Goal {
  std::vector<Vec3> targets;

  friend bool operator==(const Goal&, const Goal&) = default;
};

enum class TaskKind { push, slide, pick_place, stack };
enum class RewardKind { sparse, stack_sparse, step };

struct Box {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  Vec3 clamp(const Vec3& p) const { return p.cwiseMax(lo).cwiseMin(hi); }
  bool contains(const Vec3& p, double slack = 1e-9) const;
};

struct TaskSpec {
  TaskKind kind = TaskKind::push;
  std::size_t n_blocks = 1;
  std::size_t horizon = 50;
  double delta = 0.05;  // success threshold, m
  RewardKind reward = RewardKind::sparse;
  Box gripper_bounds;   // reachable fingertip positions
  Box table;            // block centres stay inside (x, y); z unused
  Box spawn;            // initial block centres (x, y)
  Box goal_region;      // goals; z range used by pick_place
  Vec3 gripper_start = Vec3::Zero();
  double min_spawn_separation = 0.08;

  bool fingers_locked() const { return kind == TaskKind::push || kind == TaskKind::slide; }
  /// "push", "slide", "pick_place", "stack_3".
  std::string name() const;

  static TaskSpec make(TaskKind kind, std::size_t n_blocks = 1);
  /// Parses names produced by name(); throws InvalidInput otherwise.
  static TaskSpec from_name(const std::string& name);
};

std::string to_string(RewardKind r);
RewardKind reward_kind_from_string(const std::string& s);

/// Clamps each delta component to +-kStepMax and grip to [-1, 1]; NaN becomes 0.
Action clamp_action(const Action& a);

WorldState step(const WorldState& state, const Action& action, const TaskSpec& task);

double reward_sparse(const WorldState& state, const Goal& goal, double delta);
double reward_stack_sparse(const WorldState& state, const Goal& goal, double delta);
double reward_step(const WorldState& state, const Goal& goal, double delta);
/// Dispatches on task.reward.
double reward(const TaskSpec& task, const WorldState& state, const Goal& goal);
/// The reward value meaning "every object at its target" for a reward kind.
double success_reward(const TaskSpec& task);
/// Smallest and largest per-step reward of the task's reward kind.
std::pair<double, double> reward_range(const TaskSpec& task);

std::size_t blocks_in_place(const WorldState& state, const Goal& goal, double delta);
bool is_success(const WorldState& state, const Goal& goal, const TaskSpec& task);

Goal achieved_goal(const WorldState& state);

/// Throws InvalidInput with a description when `state` breaks a WorldState
/// invariant or does not fit `task`.
void validate_state(const WorldState& state, const TaskSpec& task);

std::pair<WorldState, Goal> sample_task(Rng& rng, const TaskSpec& task);

/// Owns one live state; set_state lets episodes start anywhere.
class Simulator {
 public:
  explicit Simulator(TaskSpec task);
  void set_state(const WorldState& state);
  const WorldState& state() const { return state_; }
  const TaskSpec& task() const { return task_; }
  const WorldState& step(const Action& action);

 private:
  TaskSpec task_;
  WorldState state_;
};

/// FNV-1a over the bit patterns of every field; used by golden trajectories.
std::uint64_t state_hash(const WorldState& state);

void to_json(nlohmann::json& j, const WorldState& s);
void from_json(const nlohmann::json& j, WorldState& s);
void to_json(nlohmann::json& j, const Action& a);
void from_json(const nlohmann::json& j, Action& a);
void to_json(nlohmann::json& j, const Goal& g);
void from_json(const nlohmann::json& j, Goal& g);
void to_json(nlohmann::json& j, const TaskSpec& t);

}  // namespace demorl::world
