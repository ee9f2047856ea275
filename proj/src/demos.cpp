#include "demorl/demos.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "demorl/errors.hpp"

namespace demorl::demos {

namespace {

using world::kBlockHalf;
using world::kFingerRadius;
using world::Vec3;

constexpr double kReachTol = 1e-6;
constexpr double kHoverAbove = 0.04;
constexpr double kClearance = 0.03;
constexpr double kPushHeight = 0.025;
constexpr double kRouteHeight = 0.08;

Action move_toward(const Vec3& from, const Vec3& to, double grip, double max_step) {
  Action a;
  a.delta = (to - from).cwiseMax(-max_step).cwiseMin(max_step);
  a.grip = grip;
  return a;
}

Action idle(double grip = 0.0) {
  Action a;
  a.grip = grip;
  return a;
}

bool reached(const Vec3& a, const Vec3& b) { return (a - b).cwiseAbs().maxCoeff() < kReachTol; }

double horizontal_dist(const Vec3& a, const Vec3& b) { return std::hypot(a.x() - b.x(), a.y() - b.y()); }

}  // namespace

std::string to_string(Source s) { return s == Source::human ? "human" : "scripted"; }

Source source_from_string(const std::string& s) {
  if (s == "scripted") return Source::scripted;
  if (s == "human") return Source::human;
  throw InvalidInput("unknown demo source '" + s + "'");
}

const WorldState& DemoEpisode::state_at(std::size_t i) const {
  if (i < steps.size()) return steps[i].state;
  if (i == steps.size()) return final_state;
  throw InvalidInput("demo state index out of range");
}

ScriptedDemonstrator::ScriptedDemonstrator(TaskSpec task, DemonstratorConfig cfg, Rng& rng)
    : task_(std::move(task)), cfg_(cfg), rng_(&rng) {
  if (cfg_.sigma < 0.0) throw InvalidInput("demonstrator sigma must be non-negative");
  if (!(cfg_.max_step > 0.0)) throw InvalidInput("demonstrator speed must be positive");
  if (task_.kind == world::TaskKind::stack) {
    for (std::size_t i = 1; i < task_.n_blocks; ++i) order_.push_back(i);
  } else {
    order_.push_back(0);
  }
  start_block(0);
}

Vec3 ScriptedDemonstrator::jitter(bool vertical) {
  Vec3 j(cfg_.sigma * standard_normal(*rng_), cfg_.sigma * standard_normal(*rng_), 0.0);
  if (vertical) j.z() = cfg_.sigma * standard_normal(*rng_);
  return j;
}

void ScriptedDemonstrator::start_block(std::size_t pos) {
  order_pos_ = pos;
  phase_ = Phase::approach;
  jitter_ = jitter(false);
  waypoint_.reset();
  drop_point_.reset();
}

Action ScriptedDemonstrator::next(const WorldState& state, const Goal& goal) {
  if (task_.kind == world::TaskKind::push) return next_push(state, goal, false);
  if (task_.kind == world::TaskKind::slide) return next_push(state, goal, true);
  return next_pick(state, goal);
}

// Gripper waypoint at carry height whose block lands at least 2 delta from
// the target horizontally, on the side the block comes from so the carry
// never passes over the target.
Vec3 ScriptedDemonstrator::plan_drop(const Vec3& block, const Vec3& target, const Vec3& offset, double carry_z) {
  const world::Box& box = task_.gripper_bounds;
  const double r = uniform(*rng_, 2.0, 3.0) * task_.delta;
  const double a0 = std::atan2(block.y() - target.y(), block.x() - target.x()) +
                    uniform(*rng_, -std::numbers::pi / 4.0, std::numbers::pi / 4.0);
  for (int k = 0; k < 16; ++k) {
    const double a = a0 + (k % 2 ? 1 : -1) * ((k + 1) / 2) * std::numbers::pi / 8.0;
    const Vec3 land(target.x() + r * std::cos(a), target.y() + r * std::sin(a), 0.0);
    if (!task_.table.contains(Vec3(land.x(), land.y(), task_.table.lo.z()))) continue;
    const Vec3 w = box.clamp(Vec3(land.x() - offset.x(), land.y() - offset.y(), carry_z));
    if (horizontal_dist(w + offset, target) >= 2.0 * task_.delta) return w;
  }
  return box.clamp(Vec3(target.x() - offset.x() + r, target.y() - offset.y(), carry_z));
}

Action ScriptedDemonstrator::next_pick(const WorldState& s, const Goal& g) {
  const Vec3 gp = s.gripper;
  const world::Box& box = task_.gripper_bounds;
  for (int guard = 0; guard < 12; ++guard) {
    if (order_pos_ >= order_.size()) return idle();
    const std::size_t idx = order_[order_pos_];
    const Vec3& bpos = s.blocks[idx].pos;
    const Vec3& target = g.targets[idx];
    const bool holding = s.attached == idx;
    double max_top = 0.0;
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      if (s.attached == i) continue;
      max_top = std::max(max_top, s.blocks[i].pos.z() + kBlockHalf);
    }
    const Vec3 offset = holding ? Vec3(bpos - gp) : Vec3(0.0, 0.0, -kBlockHalf);
    const double carry_z =
        std::max(max_top + kBlockHalf + 0.02 - offset.z(), target.z() - offset.z() + 0.02);

    switch (phase_) {
      case Phase::approach: {
        if (s.attached && !holding) return idle(1.0);
        if (holding) {
          phase_ = Phase::lift;
          continue;
        }
        if (task_.kind == world::TaskKind::stack && (bpos - target).norm() < task_.delta) {
          start_block(order_pos_ + 1);
          continue;
        }
        const Vec3 hover = box.clamp(bpos + Vec3(jitter_.x(), jitter_.y(), kBlockHalf + kHoverAbove));
        if (reached(gp, hover)) {
          phase_ = Phase::descend;
          jitter_.z() = std::abs(cfg_.sigma * standard_normal(*rng_));
          continue;
        }
        const double route_z = std::max(hover.z(), max_top + kClearance);
        Vec3 w = hover;
        if (horizontal_dist(gp, hover) > kReachTol) {
          w = gp.z() < route_z - 1e-9 ? Vec3(gp.x(), gp.y(), route_z) : Vec3(hover.x(), hover.y(), gp.z());
        }
        return move_toward(gp, box.clamp(w), 1.0, cfg_.max_step);
      }
      case Phase::descend: {
        const Vec3 w = box.clamp(bpos + Vec3(jitter_.x(), jitter_.y(), kBlockHalf + 0.004 + jitter_.z()));
        if (reached(gp, w)) {
          phase_ = Phase::close;
          continue;
        }
        return move_toward(gp, w, 1.0, cfg_.max_step);
      }
      case Phase::close:
        phase_ = Phase::lift;
        return idle(-1.0);
      case Phase::lift: {
        if (!holding) {
          start_block(order_pos_);
          continue;
        }
        const Vec3 w = box.clamp(Vec3(gp.x(), gp.y(), carry_z));
        if (reached(gp, w)) {
          phase_ = Phase::transport;
          jitter_ = jitter(false);
          drop_point_.reset();
          if (uniform01(*rng_) < cfg_.drop_prob) drop_point_ = plan_drop(bpos, target, offset, carry_z);
          continue;
        }
        return move_toward(gp, w, -1.0, cfg_.max_step);
      }
      case Phase::transport: {
        if (!holding) {
          start_block(order_pos_);
          continue;
        }
        if (drop_point_) {
          if (reached(gp, *drop_point_)) {
            start_block(order_pos_);
            return idle(1.0);
          }
          return move_toward(gp, *drop_point_, -1.0, cfg_.max_step);
        }
        const Vec3 w = box.clamp(Vec3(target.x() - offset.x() + jitter_.x(), target.y() - offset.y() + jitter_.y(), carry_z));
        if (reached(gp, w)) {
          phase_ = Phase::lower;
          continue;
        }
        return move_toward(gp, w, -1.0, cfg_.max_step);
      }
      case Phase::lower: {
        if (!holding) {
          start_block(order_pos_);
          continue;
        }
        const bool keep = task_.kind == world::TaskKind::pick_place;
        const Vec3 w = box.clamp(Vec3(gp.x(), gp.y(), target.z() - offset.z() + (keep ? 0.0 : 0.003)));
        if (reached(gp, w)) {
          phase_ = keep ? Phase::hold : Phase::release;
          continue;
        }
        return move_toward(gp, w, -1.0, cfg_.max_step);
      }
      case Phase::release:
        phase_ = Phase::retreat;
        waypoint_ = box.clamp(gp + Vec3(0.0, 0.0, kHoverAbove));
        return idle(1.0);
      case Phase::retreat: {
        const Vec3 w = waypoint_ ? *waypoint_ : gp;
        if (reached(gp, w)) {
          start_block(order_pos_ + 1);
          continue;
        }
        return move_toward(gp, w, 1.0, cfg_.max_step);
      }
      case Phase::hold:
        if (!holding) {
          start_block(order_pos_);
          continue;
        }
        return idle(-1.0);
      case Phase::done:
        return idle();
    }
  }
  return idle();
}

Action ScriptedDemonstrator::next_push(const WorldState& s, const Goal& g, bool slide) {
  const world::Box& box = task_.gripper_bounds;
  const Vec3 gp = s.gripper;
  const Vec3 b = s.blocks[0].pos;
  const Vec3 t = g.targets[0];
  const double contact = kBlockHalf + kFingerRadius;
  Vec3 e = t - b;
  e.z() = 0.0;
  const double dist = e.norm();

  if (phase_ == Phase::done || (!slide && dist < 0.01) || (slide && struck_)) {
    phase_ = Phase::done;
    const Vec3 up(gp.x(), gp.y(), std::max(gp.z(), kRouteHeight));
    return reached(gp, up) ? idle() : move_toward(gp, box.clamp(up), 0.0, cfg_.max_step);
  }
  const Vec3 dir = e / dist;

  for (int guard = 0; guard < 4; ++guard) {
    if (repositioning_) {
      Vec3 behind = b - dir * (contact + 0.01) + Vec3(jitter_.x(), jitter_.y(), 0.0);
      behind.z() = kPushHeight;
      behind = box.clamp(behind);
      if (horizontal_dist(gp, behind) > kReachTol) {
        const Vec3 w = (gp.z() < kRouteHeight - 1e-9 && horizontal_dist(gp, behind) > 0.002)
                           ? Vec3(gp.x(), gp.y(), kRouteHeight)
                           : Vec3(behind.x(), behind.y(), gp.z());
        return move_toward(gp, box.clamp(w), 0.0, cfg_.max_step);
      }
      if (gp.z() > kPushHeight + kReachTol) return move_toward(gp, behind, 0.0, cfg_.max_step);
      repositioning_ = false;
    }
    Vec3 rel = gp - b;
    rel.z() = 0.0;
    const double along = rel.dot(dir);
    const double lateral = (rel - along * dir).norm();
    const bool in_zone = gp.z() < b.z() + kBlockHalf - 0.005 && along < -(contact - 0.012) &&
                         along > -(contact + 0.03) && lateral < 0.02;
    if (!in_zone) {
      repositioning_ = true;
      jitter_ = jitter(false);
      continue;
    }
    if (slide) {
      // Travel after a strike of speed v is about v * (1 + 1 / (1 - friction)).
      const double v = (dist / (1.0 + 1.0 / (1.0 - world::kFriction))) *
                       std::max(0.0, 1.0 + 10.0 * cfg_.sigma * standard_normal(*rng_));
      struck_ = true;
      Action a;
      a.delta = (dir * (-along - contact + std::min(v, world::kMaxSpeed))).cwiseMax(-world::kStepMax).cwiseMin(world::kStepMax);
      return a;
    }
    Vec3 w = b - dir * contact + dir * std::min(dist, 0.06);
    w.z() = kPushHeight;
    return move_toward(gp, box.clamp(w), 0.0, cfg_.max_step);
  }
  return idle();
}

DemoEpisode scripted_demo(const TaskSpec& task, const DemonstratorConfig& cfg, Rng& rng) {
  auto [state, goal] = world::sample_task(rng, task);
  ScriptedDemonstrator demo(task, cfg, rng);
  DemoEpisode ep;
  ep.task = task.name();
  ep.initial = state;
  ep.goal = goal;
  ep.source = Source::scripted;
  for (std::size_t k = 0; k < task.horizon; ++k) {
    const Action a = world::clamp_action(demo.next(state, goal));
    ep.steps.push_back({state, a});
    state = world::step(state, a, task);
  }
  ep.final_state = state;
  ep.success = world::is_success(state, goal, task);
  return ep;
}

bool accept_filter(const DemoEpisode& demo, const TaskSpec& task) {
  if (task.kind == world::TaskKind::slide) return true;
  if (demo.goal.targets.size() != task.n_blocks || demo.final_state.blocks.size() != task.n_blocks) return false;
  if (!world::is_success(demo.final_state, demo.goal, task)) return false;
  if (task.kind == world::TaskKind::stack) {
    for (std::size_t i = 0; i < task.n_blocks; ++i) {
      bool placed = false;
      for (std::size_t k = 0; k <= demo.length() && !placed; ++k) {
        placed = (demo.state_at(k).blocks[i].pos - demo.goal.targets[i]).norm() < task.delta;
      }
      if (placed && (demo.final_state.blocks[i].pos - demo.goal.targets[i]).norm() >= task.delta) return false;
    }
  }
  return true;
}

bool replay_matches(const DemoEpisode& demo, const TaskSpec& task) {
  if (!demo.steps.empty() && !(demo.steps.front().state == demo.initial)) return false;
  WorldState s = demo.initial;
  for (std::size_t k = 0; k < demo.steps.size(); ++k) {
    if (!(s == demo.steps[k].state)) return false;
    s = world::step(s, demo.steps[k].action, task);
  }
  return s == demo.final_state;
}

replay::Episode to_episode(const DemoEpisode& demo, const TaskSpec& task) {
  replay::Episode ep;
  for (std::size_t k = 0; k < demo.steps.size(); ++k) {
    replay::Transition t;
    t.state = demo.steps[k].state;
    t.action = demo.steps[k].action;
    t.next_state = demo.state_at(k + 1);
    t.goal = demo.goal;
    t.reward = world::reward(task, t.next_state, t.goal);
    ep.transitions.push_back(std::move(t));
  }
  return ep;
}

void to_json(nlohmann::json& j, const DemoEpisode& d) {
  auto steps = nlohmann::json::array();
  for (const auto& s : d.steps) steps.push_back({{"state", s.state}, {"action", s.action}});
  j = {{"format", kDemoFormat},  {"version", kDemoFormatVersion}, {"units", "SI"},
       {"task", d.task},       {"source", to_string(d.source)}, {"success", d.success}, {"goal", d.goal},
       {"initial", d.initial}, {"steps", steps},                {"final", d.final_state}};
}

void from_json(const nlohmann::json& j, DemoEpisode& d) {
  d.task = j.at("task").get<std::string>();
  d.source = source_from_string(j.at("source").get<std::string>());
  d.success = j.at("success").get<bool>();
  d.goal = j.at("goal").get<Goal>();
  d.initial = j.at("initial").get<WorldState>();
  d.steps.clear();
  for (const auto& s : j.at("steps")) d.steps.push_back({s.at("state").get<WorldState>(), s.at("action").get<Action>()});
  d.final_state = j.at("final").get<WorldState>();
}

void save_demos(const std::filesystem::path& path, const std::vector<DemoEpisode>& episodes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write demo file " + path.string());
  for (const auto& e : episodes) out << nlohmann::json(e).dump() << '\n';
  if (!out) throw InvalidInput("failed writing demo file " + path.string());
}

void append_demo(const std::filesystem::path& path, const DemoEpisode& episode) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw InvalidInput("cannot append to demo file " + path.string());
  out << nlohmann::json(episode).dump() << '\n';
}

std::vector<DemoEpisode> load_demos(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read demo file " + path.string());
  std::vector<DemoEpisode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(where + "not valid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || j.value("format", "") != kDemoFormat) throw InvalidInput(where + "not a demorl demo record");
    if (j.value("version", 0) != kDemoFormatVersion) throw InvalidInput(where + "unsupported demo format version");
    try {
      out.push_back(j.get<DemoEpisode>());
    } catch (const std::exception& e) {
      throw InvalidInput(where + e.what());
    }
  }
  return out;
}

}  // namespace demorl::demos
