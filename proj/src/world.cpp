#include "demorl/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "demorl/errors.hpp"

namespace demorl::world {

namespace {

constexpr double kContactDist = kBlockHalf + kFingerRadius;
constexpr int kSampleRetries = 1000;

double horizontal_norm(const Vec3& v) { return std::hypot(v.x(), v.y()); }

// Resolves fingertip/block contact for one substep from `from` to `to`.
// `to` may be raised when the fingertip lands on a block top.
void resolve_contacts(const Vec3& from, Vec3& to, WorldState& s, const TaskSpec& task,
                      std::vector<Vec3>& pushed) {
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    if (s.attached == i) continue;
    Block& b = s.blocks[i];
    const double top = b.pos.z() + kBlockHalf;
    if (to.z() >= top) continue;
    if (to.z() < b.pos.z() - kBlockHalf - kFingerRadius) continue;
    Vec3 h = b.pos - to;
    h.z() = 0.0;
    const double d = horizontal_norm(h);
    if (d >= kContactDist) continue;
    if (from.z() >= top && d < kBlockHalf) {
      to.z() = top;  // coming down onto the block
      continue;
    }
    Vec3 dir;
    if (d > 1e-12) {
      dir = h / d;
    } else {
      Vec3 m = to - from;
      m.z() = 0.0;
      const double mn = horizontal_norm(m);
      dir = mn > 1e-12 ? Vec3(m / mn) : Vec3(1.0, 0.0, 0.0);
    }
    Vec3 next = to + dir * kContactDist;
    next.z() = b.pos.z();
    next.x() = std::clamp(next.x(), task.table.lo.x(), task.table.hi.x());
    next.y() = std::clamp(next.y(), task.table.lo.y(), task.table.hi.y());
    pushed[i] += next - b.pos;
    b.pos = next;
  }
}

// Drops every unattached block onto the table or the highest block below it
// whose centre is within one block width horizontally.
void settle(WorldState& s) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    if (s.attached != i) order.push_back(i);
  }
  std::vector<double> z0(s.blocks.size());
  for (std::size_t i = 0; i < s.blocks.size(); ++i) z0[i] = s.blocks[i].pos.z();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z0[a] < z0[b]; });
  for (std::size_t k = 0; k < order.size(); ++k) {
    Block& b = s.blocks[order[k]];
    double rest = kTableZ + kBlockHalf;
    for (std::size_t j = 0; j < k; ++j) {
      const Block& under = s.blocks[order[j]];
      if (z0[order[j]] >= z0[order[k]] - 1e-9) continue;
      if (horizontal_norm(b.pos - under.pos) < kBlockSize) rest = std::max(rest, under.pos.z() + kBlockSize);
    }
    b.pos.z() = rest;
  }
}

void slide_dynamics(WorldState& s, const TaskSpec& task, const std::vector<Vec3>& pushed) {
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    Block& b = s.blocks[i];
    if (s.attached == i) {
      b.vel.setZero();
      continue;
    }
    if (pushed[i].squaredNorm() > 0.0) {
      Vec3 v = pushed[i];
      v.z() = 0.0;
      const double n = v.norm();
      if (n > kMaxSpeed) v *= kMaxSpeed / n;
      b.vel = v;
      continue;
    }
    if (b.vel.squaredNorm() == 0.0) continue;
    Vec3 next = b.pos + b.vel;
    bool hit = false;
    for (int ax = 0; ax < 2; ++ax) {
      if (next[ax] < task.table.lo[ax] || next[ax] > task.table.hi[ax]) {
        next[ax] = std::clamp(next[ax], task.table.lo[ax], task.table.hi[ax]);
        hit = true;
      }
    }
    b.pos = next;
    b.vel = hit ? Vec3::Zero() : Vec3(b.vel * kFriction);
    if (b.vel.norm() < kMinSpeed) b.vel.setZero();
  }
}

bool within(const Vec3& a, const Vec3& b, double delta) { return (a - b).norm() < delta; }

}  // namespace

int settle_ticks() {
  return static_cast<int>(std::ceil(std::log(kMinSpeed / kMaxSpeed) / std::log(kFriction))) + 1;
}

bool Box::contains(const Vec3& p, double slack) const {
  return (p.array() >= lo.array() - slack).all() && (p.array() <= hi.array() + slack).all();
}

std::string TaskSpec::name() const {
  switch (kind) {
    case TaskKind::push:
      return "push";
    case TaskKind::slide:
      return "slide";
    case TaskKind::pick_place:
      return "pick_place";
    case TaskKind::stack:
      return "stack_" + std::to_string(n_blocks);
  }
  return "push";
}

TaskSpec TaskSpec::make(TaskKind kind, std::size_t n_blocks) {
  TaskSpec t;
  t.kind = kind;
  t.delta = 0.05;
  t.gripper_bounds = {Vec3(-0.2, -0.2, 0.01), Vec3(0.2, 0.2, 0.35)};
  t.table = {Vec3(-0.25, -0.25, 0.0), Vec3(0.25, 0.25, 0.0)};
  t.spawn = {Vec3(-0.15, -0.15, 0.0), Vec3(0.15, 0.15, 0.0)};
  t.goal_region = {Vec3(-0.15, -0.15, kBlockHalf), Vec3(0.15, 0.15, kBlockHalf)};
  t.gripper_start = Vec3(0.0, 0.0, 0.1);
  switch (kind) {
    case TaskKind::push:
      t.n_blocks = 1;
      t.horizon = 50;
      t.reward = RewardKind::sparse;
      break;
    case TaskKind::slide:
      t.n_blocks = 1;
      t.horizon = 50;
      t.reward = RewardKind::sparse;
      t.gripper_bounds = {Vec3(-0.2, -0.15, 0.01), Vec3(0.05, 0.15, 0.35)};
      t.table = {Vec3(-0.25, -0.25, 0.0), Vec3(0.5, 0.25, 0.0)};
      t.spawn = {Vec3(-0.12, -0.1, 0.0), Vec3(-0.05, 0.1, 0.0)};
      t.goal_region = {Vec3(0.2, -0.1, kBlockHalf), Vec3(0.4, 0.1, kBlockHalf)};
      t.gripper_start = Vec3(-0.15, 0.0, 0.1);
      break;
    case TaskKind::pick_place:
      t.n_blocks = 1;
      t.horizon = 50;
      t.reward = RewardKind::sparse;
      t.goal_region = {Vec3(-0.15, -0.15, 0.1), Vec3(0.15, 0.15, 0.2)};
      break;
    case TaskKind::stack:
      if (n_blocks < 2 || n_blocks > 6) throw InvalidInput("stack tasks need 2..6 blocks");
      t.n_blocks = n_blocks;
      t.horizon = 50 * (n_blocks - 1);
      t.reward = RewardKind::stack_sparse;
      break;
  }
  return t;
}

TaskSpec TaskSpec::from_name(const std::string& name) {
  if (name == "push") return make(TaskKind::push);
  if (name == "slide") return make(TaskKind::slide);
  if (name == "pick_place") return make(TaskKind::pick_place);
  if (name.rfind("stack_", 0) == 0) {
    const std::string n = name.substr(6);
    if (n.size() == 1 && n[0] >= '2' && n[0] <= '6') return make(TaskKind::stack, static_cast<std::size_t>(n[0] - '0'));
  }
  throw InvalidInput("unknown task '" + name + "' (expected push, slide, pick_place or stack_2..stack_6)");
}

std::string to_string(RewardKind r) {
  switch (r) {
    case RewardKind::sparse:
      return "sparse";
    case RewardKind::stack_sparse:
      return "stack_sparse";
    case RewardKind::step:
      return "step";
  }
  return "sparse";
}

RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "sparse") return RewardKind::sparse;
  if (s == "stack_sparse") return RewardKind::stack_sparse;
  if (s == "step") return RewardKind::step;
  throw InvalidInput("unknown reward kind '" + s + "'");
}

Action clamp_action(const Action& a) {
  Action out;
  for (int i = 0; i < 3; ++i) {
    const double d = std::isnan(a.delta[i]) ? 0.0 : a.delta[i];
    out.delta[i] = std::clamp(d, -kStepMax, kStepMax);
  }
  out.grip = std::isnan(a.grip) ? 0.0 : std::clamp(a.grip, -1.0, 1.0);
  return out;
}

WorldState step(const WorldState& state, const Action& action, const TaskSpec& task) {
  const Action a = clamp_action(action);
  WorldState s = state;
  s.tick += 1;

  Vec3 offset = Vec3::Zero();
  Box bounds = task.gripper_bounds;
  if (s.attached) {
    offset = s.blocks[*s.attached].pos - s.gripper;
    bounds.lo.z() = std::max(bounds.lo.z(), kBlockHalf - offset.z());
  }
  const Vec3 start = s.gripper;
  const Vec3 target = bounds.clamp(start + a.delta);
  const Vec3 move = target - start;
  const int n = std::max(1, static_cast<int>(std::ceil(move.cwiseAbs().maxCoeff() / kSubstep)));
  std::vector<Vec3> pushed(s.blocks.size(), Vec3::Zero());
  Vec3 g = start;
  for (int k = 1; k <= n; ++k) {
    const Vec3 from = g;
    Vec3 to = bounds.clamp(g + move / n);
    resolve_contacts(from, to, s, task, pushed);
    g = to;
    if (s.attached) s.blocks[*s.attached].pos = g + offset;
  }
  s.gripper = g;

  if (task.fingers_locked()) {
    s.finger_gap = 1.0;
  } else {
    s.finger_gap = std::clamp(s.finger_gap + a.grip, 0.0, 1.0);
    if (s.attached && a.grip > 0.0) {
      s.attached.reset();
    } else if (!s.attached && a.grip < 0.0) {
      double best = kGraspRadius;
      for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        const Vec3 top = s.blocks[i].pos + Vec3(0.0, 0.0, kBlockHalf);
        const double d = (top - s.gripper).norm();
        if (d < best) {
          best = d;
          s.attached = i;
        }
      }
      if (s.attached) s.blocks[*s.attached].vel.setZero();
    }
  }

  if (task.kind == TaskKind::slide) slide_dynamics(s, task, pushed);
  settle(s);
  return s;
}

double reward_sparse(const WorldState& state, const Goal& goal, double delta) {
  if (state.blocks.empty() || goal.targets.empty()) throw InvalidInput("reward_sparse needs one tracked object");
  return within(state.blocks[0].pos, goal.targets[0], delta) ? 0.0 : -1.0;
}

std::size_t blocks_in_place(const WorldState& state, const Goal& goal, double delta) {
  if (state.blocks.size() != goal.targets.size()) throw InvalidInput("goal does not match block count");
  std::size_t n = 0;
  for (std::size_t i = 0; i < state.blocks.size(); ++i) n += within(state.blocks[i].pos, goal.targets[i], delta);
  return n;
}

double reward_stack_sparse(const WorldState& state, const Goal& goal, double delta) {
  if (state.blocks.empty()) throw InvalidInput("reward_stack_sparse needs at least one block");
  return blocks_in_place(state, goal, delta) == state.blocks.size() ? 1.0 : 0.0;
}

double reward_step(const WorldState& state, const Goal& goal, double delta) {
  if (state.blocks.empty()) throw InvalidInput("reward_step needs at least one block");
  return -1.0 + static_cast<double>(blocks_in_place(state, goal, delta));
}

double reward(const TaskSpec& task, const WorldState& state, const Goal& goal) {
  switch (task.reward) {
    case RewardKind::sparse:
      return reward_sparse(state, goal, task.delta);
    case RewardKind::stack_sparse:
      return reward_stack_sparse(state, goal, task.delta);
    case RewardKind::step:
      return reward_step(state, goal, task.delta);
  }
  return 0.0;
}

std::pair<double, double> reward_range(const TaskSpec& task) {
  switch (task.reward) {
    case RewardKind::sparse:
      return {-1.0, 0.0};
    case RewardKind::stack_sparse:
      return {0.0, 1.0};
    case RewardKind::step:
      return {-1.0, -1.0 + static_cast<double>(task.n_blocks)};
  }
  return {0.0, 0.0};
}

double success_reward(const TaskSpec& task) {
  switch (task.reward) {
    case RewardKind::sparse:
      return 0.0;
    case RewardKind::stack_sparse:
      return 1.0;
    case RewardKind::step:
      return -1.0 + static_cast<double>(task.n_blocks);
  }
  return 0.0;
}

bool is_success(const WorldState& state, const Goal& goal, const TaskSpec& task) {
  return blocks_in_place(state, goal, task.delta) == state.blocks.size();
}

Goal achieved_goal(const WorldState& state) {
  Goal g;
  g.targets.reserve(state.blocks.size());
  for (const auto& b : state.blocks) g.targets.push_back(b.pos);
  return g;
}

void validate_state(const WorldState& s, const TaskSpec& task) {
  if (s.blocks.size() != task.n_blocks) {
    throw InvalidInput("state has " + std::to_string(s.blocks.size()) + " blocks, task needs " +
                       std::to_string(task.n_blocks));
  }
  if (!s.gripper.allFinite()) throw InvalidInput("gripper position is not finite");
  if (!(s.finger_gap >= 0.0 && s.finger_gap <= 1.0)) throw InvalidInput("finger_gap outside [0, 1]");
  if (s.tick < 0) throw InvalidInput("negative tick");
  for (const auto& b : s.blocks) {
    if (!b.pos.allFinite() || !b.vel.allFinite()) throw InvalidInput("block with non-finite position or velocity");
    if (b.pos.z() < kTableZ + kBlockHalf - 1e-9) throw InvalidInput("block below the table");
  }
  if (s.attached) {
    if (*s.attached >= s.blocks.size()) throw InvalidInput("attached index out of range");
    if (task.fingers_locked()) throw InvalidInput("task keeps the fingers open; nothing can be attached");
  }
}

std::pair<WorldState, Goal> sample_task(Rng& rng, const TaskSpec& task) {
  for (int attempt = 0; attempt < kSampleRetries; ++attempt) {
    WorldState s;
    s.gripper = task.gripper_start;
    s.finger_gap = 1.0;
    bool ok = true;
    for (std::size_t i = 0; i < task.n_blocks && ok; ++i) {
      Block b;
      b.pos = Vec3(uniform(rng, task.spawn.lo.x(), task.spawn.hi.x()),
                   uniform(rng, task.spawn.lo.y(), task.spawn.hi.y()), kTableZ + kBlockHalf);
      for (const auto& other : s.blocks) {
        if (horizontal_norm(b.pos - other.pos) < task.min_spawn_separation) ok = false;
      }
      if (horizontal_norm(b.pos - s.gripper) < kContactDist + 0.01) ok = false;
      s.blocks.push_back(b);
    }
    if (!ok) continue;

    Goal g;
    if (task.kind == TaskKind::stack) {
      g.targets.push_back(s.blocks[0].pos);
      for (std::size_t i = 1; i < task.n_blocks; ++i) g.targets.push_back(g.targets.back() + Vec3(0.0, 0.0, kBlockSize));
    } else {
      const Box& r = task.goal_region;
      Vec3 t(uniform(rng, r.lo.x(), r.hi.x()), uniform(rng, r.lo.y(), r.hi.y()), uniform(rng, r.lo.z(), r.hi.z()));
      if ((t - s.blocks[0].pos).norm() < task.delta) continue;  // no episodes that start solved
      g.targets.push_back(t);
    }
    return {std::move(s), std::move(g)};
  }
  throw InvalidInput("sample_task: could not place " + std::to_string(task.n_blocks) + " blocks after " +
                     std::to_string(kSampleRetries) + " attempts");
}

Simulator::Simulator(TaskSpec task) : task_(std::move(task)) {
  Rng rng(0);
  state_ = sample_task(rng, task_).first;
}

void Simulator::set_state(const WorldState& state) {
  validate_state(state, task_);
  state_ = state;
}

const WorldState& Simulator::step(const Action& action) {
  state_ = world::step(state_, action, task_);
  return state_;
}

std::uint64_t state_hash(const WorldState& s) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  auto mixd = [&mix](double d) { mix(std::bit_cast<std::uint64_t>(d)); };
  for (int i = 0; i < 3; ++i) mixd(s.gripper[i]);
  mixd(s.finger_gap);
  mix(s.blocks.size());
  for (const auto& b : s.blocks) {
    for (int i = 0; i < 3; ++i) mixd(b.pos[i]);
    for (int i = 0; i < 3; ++i) mixd(b.vel[i]);
  }
  mix(s.attached ? *s.attached + 1 : 0);
  mix(static_cast<std::uint64_t>(s.tick));
  return h;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace

void to_json(nlohmann::json& j, const WorldState& s) {
  auto blocks = nlohmann::json::array();
  for (const auto& b : s.blocks) blocks.push_back({{"pos", vec_json(b.pos)}, {"vel", vec_json(b.vel)}});
  j = {{"gripper_pos", vec_json(s.gripper)},
       {"finger_gap", s.finger_gap},
       {"blocks", blocks},
       {"attached", s.attached ? nlohmann::json(*s.attached) : nlohmann::json(nullptr)},
       {"tick", s.tick}};
}

void from_json(const nlohmann::json& j, WorldState& s) {
  s.gripper = vec_from(j.at("gripper_pos"));
  s.finger_gap = j.at("finger_gap").get<double>();
  s.blocks.clear();
  for (const auto& b : j.at("blocks")) s.blocks.push_back({vec_from(b.at("pos")), vec_from(b.at("vel"))});
  const auto& att = j.at("attached");
  if (att.is_null()) {
    s.attached.reset();
  } else {
    s.attached = att.get<std::size_t>();
  }
  s.tick = j.at("tick").get<long>();
}

void to_json(nlohmann::json& j, const Action& a) { j = {{"delta", vec_json(a.delta)}, {"grip", a.grip}}; }

void from_json(const nlohmann::json& j, Action& a) {
  a.delta = vec_from(j.at("delta"));
  a.grip = j.at("grip").get<double>();
}

void to_json(nlohmann::json& j, const Goal& g) {
  j = nlohmann::json::array();
  for (const auto& t : g.targets) j.push_back(vec_json(t));
}

void from_json(const nlohmann::json& j, Goal& g) {
  if (!j.is_array()) throw InvalidInput("goal must be an array of 3-vectors");
  g.targets.clear();
  for (const auto& t : j) g.targets.push_back(vec_from(t));
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"name", t.name()},
       {"n_blocks", t.n_blocks},
       {"horizon", t.horizon},
       {"delta", t.delta},
       {"reward", to_string(t.reward)},
       {"fingers_locked", t.fingers_locked()},
       {"gripper_bounds", {vec_json(t.gripper_bounds.lo), vec_json(t.gripper_bounds.hi)}}};
}

}  // namespace demorl::world
