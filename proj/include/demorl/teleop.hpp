#pragma once

// Human teleoperation over a WebSocket JSON protocol. Session holds the
// protocol logic and is socket-free; serve() binds it to one client at a time.
//
// server -> client
//   {"type":"hello","version":1,"task":..,"task_spec":{..},"tick_hz":..,"horizon":..,
//    "action_bounds":{"delta_max":0.1,"grip_min":-1,"grip_max":1}}
//   {"type":"state","phase":..,"world":{..},"goal":[[x,y,z],..],"tick":..,"reward":..}
//   {"type":"review","success":bool,"passes_filter":bool}
//   {"type":"saved","stored":bool,"count":n,"reason":".."}
//   {"type":"error","message":".."}
// client -> server
//   {"type":"start"}  {"type":"action","delta":[x,y,z],"grip":g}  {"type":"decision","accept":bool}

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "demorl/demos.hpp"
#include "demorl/rng.hpp"
#include "demorl/world.hpp"

namespace demorl::teleop {

inline constexpr int kProtocolVersion = 1;

enum class Phase { idle, recording, review };
std::string to_string(Phase p);

class Session {
 public:
  Session(world::TaskSpec task, std::filesystem::path out_path, std::uint64_t seed, double tick_hz = 20.0);

  nlohmann::json hello() const;
  nlohmann::json state_message() const;
  /// Handles one client text frame; returns the frames to send back in order.
  std::vector<nlohmann::json> handle(const std::string& frame);
  std::vector<nlohmann::json> handle(const nlohmann::json& msg);
  /// Client went away: drop any recording and return to idle with a fresh scene.
  void reset();

  Phase phase() const { return phase_; }
  const world::WorldState& state() const { return state_; }
  const world::Goal& goal() const { return goal_; }
  const world::TaskSpec& task() const { return task_; }
  std::size_t recorded_steps() const { return steps_.size(); }
  int saved_count() const { return saved_; }
  double tick_hz() const { return tick_hz_; }

 private:
  void fresh_scene();
  std::vector<nlohmann::json> violation(const std::string& what);
  std::vector<nlohmann::json> on_action(const nlohmann::json& msg);
  std::vector<nlohmann::json> on_decision(const nlohmann::json& msg);
  demos::DemoEpisode recorded_episode() const;

  world::TaskSpec task_;
  std::filesystem::path out_path_;
  Rng rng_;
  double tick_hz_;
  Phase phase_ = Phase::idle;
  world::WorldState state_;
  world::WorldState initial_;
  world::Goal goal_;
  std::vector<demos::DemoStep> steps_;
  int saved_ = 0;
};

/// Parses an action frame; throws InvalidInput when fields are missing, of
/// the wrong type or non-finite. The result is not clamped.
world::Action parse_action(const nlohmann::json& msg);

struct ServeOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 8765;  // 0 picks a free port
  world::TaskSpec task;
  std::filesystem::path out_path = "teleop_demos.jsonl";
  std::uint64_t seed = 0;
  double tick_hz = 20.0;
  int max_sessions = 0;  // return after this many client sessions; 0 = run forever
  std::function<void(unsigned short port)> on_listening;
  std::ostream* log = nullptr;
};

/// Blocks. Throws std::runtime_error when the address cannot be bound.
void serve(const ServeOptions& opts);

}  // namespace demorl::teleop
