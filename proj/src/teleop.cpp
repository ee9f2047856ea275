#include "demorl/teleop.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "demorl/errors.hpp"

namespace demorl::teleop {

namespace {

constexpr std::uint64_t kSceneStream = 7;

nlohmann::json error_message(const std::string& what) { return {{"type", "error"}, {"message", what}}; }

}  // namespace

std::string to_string(Phase p) {
  switch (p) {
    case Phase::idle:
      return "idle";
    case Phase::recording:
      return "recording";
    case Phase::review:
      return "review";
  }
  return "?";
}

world::Action parse_action(const nlohmann::json& msg) {
  if (!msg.is_object()) throw InvalidInput("action must be a JSON object");
  const auto d = msg.find("delta");
  if (d == msg.end() || !d->is_array() || d->size() != 3) throw InvalidInput("action.delta must be [x, y, z]");
  const auto g = msg.find("grip");
  if (g == msg.end() || !g->is_number()) throw InvalidInput("action.grip must be a number");
  world::Action a;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(*d)[i].is_number()) throw InvalidInput("action.delta entries must be numbers");
    a.delta[static_cast<Eigen::Index>(i)] = (*d)[i].get<double>();
  }
  a.grip = g->get<double>();
  if (!a.delta.allFinite() || !std::isfinite(a.grip)) throw InvalidInput("action values must be finite");
  return a;
}

Session::Session(world::TaskSpec task, std::filesystem::path out_path, std::uint64_t seed, double tick_hz)
    : task_(std::move(task)), out_path_(std::move(out_path)), rng_(derive_rng(seed, kSceneStream)), tick_hz_(tick_hz) {
  if (!(tick_hz_ > 0.0)) throw InvalidInput("tick rate must be positive");
  fresh_scene();
}

void Session::fresh_scene() {
  std::tie(state_, goal_) = world::sample_task(rng_, task_);
  initial_ = state_;
  steps_.clear();
  phase_ = Phase::idle;
}

void Session::reset() { fresh_scene(); }

nlohmann::json Session::hello() const {
  return {{"type", "hello"},
          {"version", kProtocolVersion},
          {"task", task_.name()},
          {"task_spec", task_},
          {"tick_hz", tick_hz_},
          {"horizon", task_.horizon},
          {"action_bounds", {{"delta_max", world::kStepMax}, {"grip_min", -1.0}, {"grip_max", 1.0}}}};
}

nlohmann::json Session::state_message() const {
  return {{"type", "state"},          {"phase", to_string(phase_)}, {"world", state_},
          {"goal", goal_},            {"tick", state_.tick},        {"reward", world::reward(task_, state_, goal_)},
          {"steps", steps_.size()}};
}

std::vector<nlohmann::json> Session::handle(const std::string& frame) {
  nlohmann::json msg;
  try {
    msg = nlohmann::json::parse(frame);
  } catch (const nlohmann::json::exception&) {
    return violation("frame is not valid JSON");
  }
  return handle(msg);
}

std::vector<nlohmann::json> Session::handle(const nlohmann::json& msg) {
  if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
    return violation("frame needs a string 'type' field");
  }
  const std::string type = msg["type"].get<std::string>();
  if (type == "start") {
    if (phase_ != Phase::idle) return violation("'start' is only valid when idle");
    initial_ = state_;
    steps_.clear();
    phase_ = Phase::recording;
    return {state_message()};
  }
  if (type == "action") {
    if (phase_ != Phase::recording) return violation("'action' is only valid while recording");
    return on_action(msg);
  }
  if (type == "decision") {
    if (phase_ != Phase::review) return violation("'decision' is only valid in review");
    return on_decision(msg);
  }
  return violation("unknown message type '" + type + "'");
}

std::vector<nlohmann::json> Session::violation(const std::string& what) {
  reset();
  return {error_message(what + "; session reset"), state_message()};
}

std::vector<nlohmann::json> Session::on_action(const nlohmann::json& msg) {
  world::Action a;
  try {
    a = world::clamp_action(parse_action(msg));
  } catch (const InvalidInput& e) {
    return {error_message(e.what())};
  }
  steps_.push_back({state_, a});
  state_ = world::step(state_, a, task_);
  std::vector<nlohmann::json> out{state_message()};
  if (steps_.size() >= task_.horizon) {
    phase_ = Phase::review;
    const demos::DemoEpisode ep = recorded_episode();
    out.push_back({{"type", "review"}, {"success", ep.success}, {"passes_filter", demos::accept_filter(ep, task_)}});
  }
  return out;
}

std::vector<nlohmann::json> Session::on_decision(const nlohmann::json& msg) {
  const auto it = msg.find("accept");
  if (it == msg.end() || !it->is_boolean()) return {error_message("decision.accept must be true or false")};
  std::vector<nlohmann::json> out;
  if (it->get<bool>()) {
    const demos::DemoEpisode ep = recorded_episode();
    if (demos::accept_filter(ep, task_)) {
      demos::append_demo(out_path_, ep);
      ++saved_;
      out.push_back({{"type", "saved"}, {"stored", true}, {"count", saved_}, {"reason", ""}});
    } else {
      out.push_back({{"type", "saved"},
                     {"stored", false},
                     {"count", saved_},
                     {"reason", "episode does not pass the acceptance filter"}});
    }
  }
  fresh_scene();
  out.push_back(state_message());
  return out;
}

demos::DemoEpisode Session::recorded_episode() const {
  demos::DemoEpisode ep;
  ep.task = task_.name();
  ep.initial = initial_;
  ep.goal = goal_;
  ep.steps = steps_;
  ep.final_state = state_;
  ep.source = demos::Source::human;
  ep.success = world::is_success(state_, goal_, task_);
  return ep;
}

void serve(const ServeOptions& opts) {
  namespace net = boost::asio;
  namespace beast = boost::beast;
  namespace websocket = beast::websocket;
  using tcp = net::ip::tcp;

  net::io_context ioc;
  boost::system::error_code ec;
  const auto address = net::ip::make_address(opts.address, ec);
  if (ec) throw std::runtime_error("bad bind address '" + opts.address + "': " + ec.message());
  const tcp::endpoint endpoint(address, opts.port);
  tcp::acceptor acceptor(ioc);
  acceptor.open(endpoint.protocol(), ec);
  if (!ec) acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) acceptor.bind(endpoint, ec);
  if (!ec) acceptor.listen(1, ec);
  if (ec) {
    throw std::runtime_error("cannot listen on " + opts.address + ":" + std::to_string(opts.port) + ": " + ec.message());
  }
  const unsigned short bound = acceptor.local_endpoint().port();
  if (opts.log) *opts.log << "teleop: listening on ws://" << opts.address << ':' << bound << " task " << opts.task.name() << '\n';
  if (opts.on_listening) opts.on_listening(bound);

  Session session(opts.task, opts.out_path, opts.seed, opts.tick_hz);
  const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(1.0 / opts.tick_hz));

  for (int sessions = 0; opts.max_sessions == 0 || sessions < opts.max_sessions; ++sessions) {
    tcp::socket socket(ioc);
    acceptor.accept(socket);
    try {
      websocket::stream<tcp::socket> ws(std::move(socket));
      ws.accept();
      ws.text(true);
      auto send = [&ws](const nlohmann::json& m) { ws.write(net::buffer(m.dump())); };
      send(session.hello());
      send(session.state_message());
      auto next_tick = std::chrono::steady_clock::now();
      for (;;) {
        beast::flat_buffer buffer;
        ws.read(buffer);
        const std::string frame = beast::buffers_to_string(buffer.data());
        const nlohmann::json msg = nlohmann::json::parse(frame, nullptr, false);
        if (!msg.is_discarded() && msg.is_object() && msg.contains("type") && msg["type"] == "action" &&
            session.phase() == Phase::recording) {
          std::this_thread::sleep_until(next_tick);
          next_tick = std::max(next_tick + period, std::chrono::steady_clock::now());
        }
        for (const auto& reply : msg.is_discarded() ? session.handle(frame) : session.handle(msg)) send(reply);
      }
    } catch (const std::exception& e) {
      if (opts.log) *opts.log << "teleop: client session ended (" << e.what() << ")\n";
    }
    session.reset();
  }
}

}  // namespace demorl::teleop
