#include <doctest.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <filesystem>
#include <future>
#include <thread>

#include "demorl/errors.hpp"
#include "demorl/teleop.hpp"
#include "demorl/trainer.hpp"

using namespace demorl;
using nlohmann::json;
using teleop::Phase;
using teleop::Session;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "demorl_test_teleop";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  std::filesystem::remove(p);
  return p;
}

json action_msg(const world::Action& a) {
  return {{"type", "action"}, {"delta", {a.delta.x(), a.delta.y(), a.delta.z()}}, {"grip", a.grip}};
}

// Drives a session with the noise-free scripted demonstrator for one episode.
std::vector<json> scripted_episode(Session& s, std::uint64_t seed) {
  demos::DemonstratorConfig cfg;
  cfg.sigma = 0.0;
  cfg.drop_prob = 0.0;
  Rng rng(seed);
  demos::ScriptedDemonstrator demo(s.task(), cfg, rng);
  std::vector<json> last = s.handle(json{{"type", "start"}});
  while (s.phase() == Phase::recording) last = s.handle(action_msg(demo.next(s.state(), s.goal())));
  return last;
}

}  // namespace

TEST_SUITE("teleop") {
  TEST_CASE("hello advertises the task and action bounds") {
    Session s(world::TaskSpec::from_name("pick_place"), temp_file("hello.jsonl"), 1);
    const json h = s.hello();
    CHECK(h["type"] == "hello");
    CHECK(h["version"] == teleop::kProtocolVersion);
    CHECK(h["task"] == "pick_place");
    CHECK(h["horizon"] == 50);
    CHECK(h["tick_hz"] == 20.0);
    CHECK(h["action_bounds"]["delta_max"] == world::kStepMax);
    const json st = s.state_message();
    CHECK(st["phase"] == "idle");
    CHECK(st["world"].get<world::WorldState>() == s.state());
    CHECK(st["goal"].get<world::Goal>() == s.goal());
  }

  TEST_CASE("a recorded episode replays and is appended on accept") {
    const auto out = temp_file("accept.jsonl");
    Session s(world::TaskSpec::from_name("pick_place"), out, 2);
    const auto review = scripted_episode(s, 3);
    REQUIRE(review.size() == 2);
    CHECK(review[1]["type"] == "review");
    CHECK(review[1]["success"] == true);
    CHECK(review[1]["passes_filter"] == true);
    CHECK(s.recorded_steps() == 50);
    const auto saved = s.handle(json{{"type", "decision"}, {"accept", true}});
    REQUIRE(saved.size() == 2);
    CHECK(saved[0]["type"] == "saved");
    CHECK(saved[0]["stored"] == true);
    CHECK(saved[0]["count"] == 1);
    CHECK(saved[1]["phase"] == "idle");
    const auto loaded = demos::load_demos(out);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].source == demos::Source::human);
    CHECK(demos::replay_matches(loaded[0], s.task()));
    CHECK(demos::accept_filter(loaded[0], s.task()));
  }

  TEST_CASE("rejected and failing episodes are not stored") {
    const auto out = temp_file("reject.jsonl");
    Session s(world::TaskSpec::from_name("pick_place"), out, 4);
    scripted_episode(s, 5);
    const auto no = s.handle(json{{"type", "decision"}, {"accept", false}});
    REQUIRE(no.size() == 1);
    CHECK(no[0]["type"] == "state");
    CHECK_FALSE(std::filesystem::exists(out));

    s.handle(json{{"type", "start"}});
    for (int t = 0; t < 50; ++t) s.handle(action_msg(world::Action{}));
    REQUIRE(s.phase() == Phase::review);
    const auto accepted = s.handle(json{{"type", "decision"}, {"accept", true}});
    CHECK(accepted[0]["stored"] == false);
    CHECK(accepted[0]["reason"].get<std::string>().find("filter") != std::string::npos);
    CHECK(s.saved_count() == 0);
  }

  TEST_CASE("actions are clamped before they are recorded") {
    Session s(world::TaskSpec::from_name("push"), temp_file("clamp.jsonl"), 6);
    s.handle(json{{"type", "start"}});
    const world::Vec3 before = s.state().gripper;
    s.handle(json{{"type", "action"}, {"delta", {5.0, 0.0, 0.0}}, {"grip", 9.0}});
    CHECK(s.state().gripper.x() == doctest::Approx(std::min(before.x() + world::kStepMax, s.task().gripper_bounds.hi.x())));
    CHECK(s.recorded_steps() == 1);
  }

  TEST_CASE("protocol violations reset the session") {
    Session s(world::TaskSpec::from_name("push"), temp_file("violations.jsonl"), 7);
    const auto bad_action = s.handle(action_msg(world::Action{}));
    REQUIRE(bad_action.size() == 2);
    CHECK(bad_action[0]["type"] == "error");
    CHECK(bad_action[1]["phase"] == "idle");

    s.handle(json{{"type", "start"}});
    s.handle(action_msg(world::Action{}));
    const world::WorldState mid = s.state();
    const auto again = s.handle(json{{"type", "start"}});
    CHECK(again[0]["type"] == "error");
    CHECK(s.phase() == Phase::idle);
    CHECK(s.recorded_steps() == 0);
    CHECK_FALSE(s.state() == mid);

    CHECK(s.handle(std::string("{not json"))[0]["type"] == "error");
    CHECK(s.handle(json{{"type", 3}})[0]["type"] == "error");
    CHECK(s.handle(json{{"type", "dance"}})[0]["type"] == "error");
    CHECK(s.handle(json{{"type", "decision"}, {"accept", true}})[0]["type"] == "error");
  }

  TEST_CASE("malformed actions are refused without losing the recording") {
    Session s(world::TaskSpec::from_name("push"), temp_file("malformed.jsonl"), 8);
    s.handle(json{{"type", "start"}});
    s.handle(action_msg(world::Action{}));
    const world::WorldState st = s.state();
    for (const json& m : {json{{"type", "action"}, {"delta", {0.0, 0.0}}, {"grip", 0.0}},
                          json{{"type", "action"}, {"delta", {0.0, "x", 0.0}}, {"grip", 0.0}},
                          json{{"type", "action"}, {"delta", {0.0, 0.0, 0.0}}},
                          json{{"type", "action"}, {"delta", {0.0, 0.0, 0.0}}, {"grip", "open"}}}) {
      const auto r = s.handle(m);
      REQUIRE(r.size() == 1);
      CHECK(r[0]["type"] == "error");
    }
    CHECK(s.phase() == Phase::recording);
    CHECK(s.state() == st);
    CHECK(s.recorded_steps() == 1);
    CHECK_THROWS_AS(teleop::parse_action(json{{"delta", {0.0, 0.0, std::nan("")}}, {"grip", 0.0}}), InvalidInput);
    CHECK_THROWS_AS(Session(world::TaskSpec::from_name("push"), temp_file("x.jsonl"), 1, 0.0), InvalidInput);
  }

  TEST_CASE("websocket server records paced demonstrations end to end") {
    namespace net = boost::asio;
    namespace websocket = boost::beast::websocket;
    using tcp = net::ip::tcp;

    const auto out = temp_file("served.jsonl");
    teleop::ServeOptions opts;
    opts.port = 0;
    opts.task = world::TaskSpec::from_name("pick_place");
    opts.out_path = out;
    opts.seed = 9;
    opts.tick_hz = 200.0;
    opts.max_sessions = 2;
    std::promise<unsigned short> port_promise;
    opts.on_listening = [&](unsigned short p) { port_promise.set_value(p); };
    std::thread server([&] { teleop::serve(opts); });
    const unsigned short port = port_promise.get_future().get();

    auto connect = [&](net::io_context& ioc) {
      tcp::resolver resolver(ioc);
      websocket::stream<tcp::socket> ws(ioc);
      net::connect(ws.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
      ws.handshake("127.0.0.1", "/");
      ws.text(true);
      return ws;
    };
    auto read = [](websocket::stream<tcp::socket>& ws) {
      boost::beast::flat_buffer b;
      ws.read(b);
      return json::parse(boost::beast::buffers_to_string(b.data()));
    };
    auto send = [](websocket::stream<tcp::socket>& ws, const json& m) { ws.write(net::buffer(m.dump())); };

    {
      net::io_context ioc;
      auto ws = connect(ioc);
      CHECK(read(ws)["type"] == "hello");
      json st = read(ws);
      CHECK(st["phase"] == "idle");
      demos::DemonstratorConfig clean;
      clean.sigma = 0.0;
      clean.drop_prob = 0.0;
      const world::TaskSpec task = opts.task;
      for (int episode = 0; episode < 2; ++episode) {
        Rng rng(10 + episode);
        demos::ScriptedDemonstrator demo(task, clean, rng);
        send(ws, {{"type", "start"}});
        st = read(ws);
        CHECK(st["phase"] == "recording");
        const auto t0 = std::chrono::steady_clock::now();
        json msg = st;
        for (std::size_t t = 0; t < task.horizon; ++t) {
          const auto s = msg["world"].get<world::WorldState>();
          send(ws, action_msg(demo.next(s, msg["goal"].get<world::Goal>())));
          msg = read(ws);
          REQUIRE(msg["type"] == "state");
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        // 50 ticks at 200 Hz.
        CHECK(elapsed >= 0.9 * (task.horizon - 1) / opts.tick_hz);
        const json review = read(ws);
        CHECK(review["type"] == "review");
        CHECK(review["passes_filter"] == true);
        send(ws, {{"type", "decision"}, {"accept", true}});
        const json saved = read(ws);
        CHECK(saved["stored"] == true);
        CHECK(saved["count"] == episode + 1);
        CHECK(read(ws)["phase"] == "idle");
        CHECK(demos::load_demos(out).size() == static_cast<std::size_t>(episode + 1));
      }
      // Disconnect mid-recording: nothing from this attempt is stored.
      send(ws, {{"type", "start"}});
      read(ws);
      send(ws, action_msg(world::Action{}));
      read(ws);
      ws.close(websocket::close_code::normal);
    }
    {
      net::io_context ioc;
      auto ws = connect(ioc);
      CHECK(read(ws)["type"] == "hello");
      CHECK(read(ws)["phase"] == "idle");
      send(ws, {{"type", "nonsense"}});
      CHECK(read(ws)["type"] == "error");
      ws.close(websocket::close_code::normal);
    }
    server.join();

    const auto recorded = demos::load_demos(out);
    REQUIRE(recorded.size() == 2);
    for (const auto& d : recorded) CHECK(demos::replay_matches(d, opts.task));

    train::TrainConfig c;
    c.task = "pick_place";
    c.demo_path = out.string();
    c.epochs = 1;
    c.cycles_per_epoch = 1;
    c.updates_per_cycle = 2;
    c.eval_episodes = 2;
    c.batch_size = 8;
    c.demo_batch_size = 4;
    c.hidden = {8};
    train::Trainer trainer(c);
    CHECK(trainer.demos().size() == 2);
    CHECK(trainer.run().size() == 1);
  }

  TEST_CASE("serve reports an address it cannot bind") {
    teleop::ServeOptions opts;
    opts.address = "203.0.113.7";  // TEST-NET-3, never local
    opts.port = 0;
    opts.task = world::TaskSpec::from_name("push");
    CHECK_THROWS_AS(teleop::serve(opts), std::runtime_error);
  }
}
