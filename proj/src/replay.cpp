#include "demorl/replay.hpp"

#include <bit>
#include <istream>
#include <ostream>

#include "demorl/errors.hpp"

namespace demorl::replay {

RewardFn reward_fn_for(const world::TaskSpec& task) {
  return [task](const WorldState& next_state, const Goal& goal) { return world::reward(task, next_state, goal); };
}

bool Episode::well_formed() const {
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    if (k + 1 < transitions.size() && !(transitions[k].next_state == transitions[k + 1].state)) return false;
    if (!(transitions[k].goal == transitions.front().goal)) return false;
  }
  return true;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidInput("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (storage_.size() < capacity_) {
    storage_.push_back(std::move(t));
  } else {
    storage_[cursor_] = std::move(t);
  }
  cursor_ = (cursor_ + 1) % capacity_;
  ++total_inserted_;
}

const Transition& ReplayBuffer::oldest(std::size_t i) const {
  if (storage_.size() < capacity_) return storage_.at(i);
  return storage_.at((cursor_ + i) % capacity_);
}

void ReplayBuffer::save(std::ostream& out, const std::string& task_name) const {
  nlohmann::json header = {{"format", "demorl-buffer"}, {"version", 1},        {"task", task_name},
                           {"capacity", capacity_},     {"cursor", cursor_},    {"size", storage_.size()},
                           {"total_inserted", total_inserted_}};
  out << header.dump() << '\n';
  for (const auto& t : storage_) out << nlohmann::json(t).dump() << '\n';
}

ReplayBuffer ReplayBuffer::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("buffer snapshot: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("buffer snapshot line 1: ") + e.what());
  }
  if (header.value("format", "") != "demorl-buffer") throw InvalidInput("buffer snapshot: wrong format tag");
  ReplayBuffer b(header.at("capacity").get<std::size_t>());
  const auto size = header.at("size").get<std::size_t>();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      b.storage_.push_back(nlohmann::json::parse(line).get<Transition>());
    } catch (const std::exception& e) {
      throw InvalidInput("buffer snapshot line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (b.storage_.size() != size) throw InvalidInput("buffer snapshot: size does not match header");
  b.cursor_ = header.at("cursor").get<std::size_t>();
  b.total_inserted_ = header.at("total_inserted").get<std::uint64_t>();
  return b;
}

DemoBuffer::DemoBuffer(std::vector<Episode> episodes, const RewardFn& reward_fn, bool her_enabled)
    : episodes_(std::move(episodes)) {
  for (const auto& ep : episodes_) {
    for (const auto& t : ep.transitions) transitions_.push_back(t);
    if (her_enabled && !ep.transitions.empty()) {
      for (auto& t : hindsight_copy(ep, reward_fn).transitions) transitions_.push_back(std::move(t));
    }
  }
}

std::uint64_t DemoBuffer::content_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : transitions_) h = transition_hash(t, h);
  return h;
}

Episode hindsight_copy(const Episode& episode, const RewardFn& reward_fn) {
  Episode out;
  if (episode.transitions.empty()) return out;
  const Goal final_goal = world::achieved_goal(episode.transitions.back().next_state);
  out.transitions.reserve(episode.size());
  for (const auto& t : episode.transitions) {
    Transition copy = t;
    copy.goal = final_goal;
    copy.reward = reward_fn(copy.next_state, final_goal);
    copy.relabeled = true;
    out.transitions.push_back(std::move(copy));
  }
  return out;
}

void store_episode_with_her(ReplayBuffer& buffer, const Episode& episode, const RewardFn& reward_fn,
                            bool her_enabled, std::size_t horizon) {
  if (episode.size() > horizon) {
    throw InvalidInput("episode of length " + std::to_string(episode.size()) + " exceeds horizon " +
                       std::to_string(horizon));
  }
  if (!episode.well_formed()) throw InvalidInput("episode is not a contiguous single-goal trajectory");
  for (const auto& t : episode.transitions) {
    Transition copy = t;
    copy.reward = reward_fn(copy.next_state, copy.goal);
    copy.relabeled = false;
    buffer.push(std::move(copy));
  }
  if (!her_enabled) return;
  for (auto& t : hindsight_copy(episode, reward_fn).transitions) buffer.push(std::move(t));
}

Episode her_relabel_oracle(const Episode& episode, const RewardFn& reward_fn) {
  Episode out;
  if (episode.transitions.empty()) return out;
  const WorldState& last = episode.transitions[episode.transitions.size() - 1].next_state;
  Goal g;
  for (std::size_t i = 0; i < last.blocks.size(); ++i) g.targets.push_back(last.blocks[i].pos);
  for (std::size_t k = 0; k < episode.transitions.size(); ++k) {
    const Transition& src = episode.transitions[k];
    Transition t{src.state, src.action, src.next_state, g, reward_fn(src.next_state, g), true};
    out.transitions.push_back(t);
  }
  return out;
}

std::vector<Sample> sample_minibatch(Rng& rng, const ReplayBuffer& r, const DemoBuffer& demos, std::size_t n,
                                     std::size_t n_demo) {
  if (n > 0 && r.empty()) throw InvalidInput("sample_minibatch: replay buffer is empty");
  if (n_demo > 0 && demos.empty()) throw InvalidInput("sample_minibatch: demonstration buffer is empty");
  std::vector<Sample> out;
  out.reserve(n + n_demo);
  for (std::size_t i = 0; i < n; ++i) out.push_back({&r.at(uniform_index(rng, r.size())), false});
  for (std::size_t i = 0; i < n_demo; ++i) out.push_back({&demos.transitions()[uniform_index(rng, demos.size())], true});
  return out;
}

AuditReport audit(const ReplayBuffer& buffer, const RewardFn& reward_fn) {
  AuditReport rep;
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto& t = buffer.at(i);
    ++rep.total;
    if (t.reward != reward_fn(t.next_state, t.goal)) ++rep.reward_inconsistent;
    if (t.relabeled) ++rep.relabeled;
  }
  return rep;
}

std::uint64_t transition_hash(const Transition& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  mix(world::state_hash(t.state));
  mix(world::state_hash(t.next_state));
  for (int i = 0; i < 3; ++i) mix(std::bit_cast<std::uint64_t>(t.action.delta[i]));
  mix(std::bit_cast<std::uint64_t>(t.action.grip));
  for (const auto& g : t.goal.targets) {
    for (int i = 0; i < 3; ++i) mix(std::bit_cast<std::uint64_t>(g[i]));
  }
  mix(std::bit_cast<std::uint64_t>(t.reward));
  mix(t.relabeled ? 1u : 0u);
  return h;
}

void to_json(nlohmann::json& j, const Transition& t) {
  j = {{"state", t.state}, {"action", t.action}, {"next_state", t.next_state},
       {"goal", t.goal},   {"reward", t.reward}, {"relabeled", t.relabeled}};
}

void from_json(const nlohmann::json& j, Transition& t) {
  t.state = j.at("state").get<WorldState>();
  t.action = j.at("action").get<Action>();
  t.next_state = j.at("next_state").get<WorldState>();
  t.goal = j.at("goal").get<Goal>();
  t.reward = j.at("reward").get<double>();
  t.relabeled = j.value("relabeled", false);
}

}  // namespace demorl::replay
