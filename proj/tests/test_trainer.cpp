#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "demorl/errors.hpp"
#include "demorl/trainer.hpp"

using namespace demorl;
using train::Mode;
using train::TrainConfig;

namespace {

TrainConfig tiny(const std::string& task = "push", Mode mode = Mode::ours) {
  TrainConfig c;
  c.task = task;
  c.mode = mode;
  c.epochs = 2;
  c.cycles_per_epoch = 2;
  c.rollouts_per_cycle = 1;
  c.updates_per_cycle = 4;
  c.eval_episodes = 4;
  c.batch_size = 16;
  c.demo_batch_size = 4;
  c.hidden = {16, 16};
  c.n_demos = 6;
  c.bc_pretrain_steps = 5;
  c.seed = 3;
  return c;
}

std::string csv(const std::vector<train::MetricsRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += train::metrics_line(r) + "\n";
  return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / "demorl_test_trainer" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("config text round trips in canonical order") {
    TrainConfig c = tiny("stack_2", Mode::no_qfilter);
    c.hidden = {32, 8, 4};
    c.weights.lambda2 = 0.25;
    c.lambda2_auto = false;
    c.reward = "step";
    TrainConfig back;
    train::apply(back, train::parse_key_values(train::to_text(c)));
    CHECK(train::to_text(back) == train::to_text(c));
    CHECK(train::config_hash(back) == train::config_hash(c));
    const auto kv = train::to_key_values(c);
    CHECK(kv.size() == train::config_keys().size());
    CHECK(kv.at("lambda2") == "0.25");
    CHECK(kv.at("hidden") == "32,8,4");
  }

  TEST_CASE("config parsing accepts comments and auto lambda2") {
    TrainConfig c;
    train::apply(c, train::parse_key_values("# comment\n task = pick_place  # trailing\n\nlambda2 = auto\nmode=bc\n"));
    CHECK(c.task == "pick_place");
    CHECK(c.mode == Mode::bc);
    CHECK(c.lambda2_auto);
  }

  TEST_CASE("config errors are reported") {
    TrainConfig c;
    CHECK_THROWS_AS(train::apply(c, train::parse_key_values("no_such_key = 1")), ConfigError);
    CHECK_THROWS_AS(train::apply(c, train::parse_key_values("epochs = many")), ConfigError);
    CHECK_THROWS_AS(train::apply(c, train::parse_key_values("mode = magic")), ConfigError);
    CHECK_THROWS_AS(train::apply(c, train::parse_key_values("hidden = 64,,64")), ConfigError);
    CHECK_THROWS_AS(train::parse_key_values("just words"), ConfigError);
    CHECK_THROWS_AS(train::read_key_values("/nonexistent/demorl.cfg"), ConfigError);
    TrainConfig bad = tiny();
    bad.hyper.gamma = 1.0;
    CHECK_THROWS_AS(train::validate(bad), ConfigError);
    bad = tiny();
    bad.task = "juggle";
    CHECK_THROWS_AS(train::validate(bad), std::exception);
    bad = tiny("push", Mode::ours);
    bad.demo_batch_size = 0;
    CHECK_THROWS_AS(train::resolve_flags(bad), ConfigError);
  }

  TEST_CASE("modes switch the documented components") {
    struct Row {
      Mode mode;
      bool her, bc, qf, rl, pre, demos;
      int nd;
    };
    const Row rows[] = {
        {Mode::ours, true, true, true, true, false, true, 4},
        {Mode::ours_resets, true, true, true, true, false, true, 4},
        {Mode::bc, false, true, false, false, false, true, 4},
        {Mode::her, true, false, false, true, false, false, 0},
        {Mode::bc_her, true, false, false, true, true, true, 0},
        {Mode::no_bc, true, false, false, true, false, true, 4},
        {Mode::no_qfilter, true, true, false, true, false, true, 4},
        {Mode::no_her, false, true, true, true, false, true, 4},
    };
    for (const auto& r : rows) {
      CAPTURE(train::to_string(r.mode));
      const auto f = train::resolve_flags(tiny("push", r.mode));
      CHECK(f.her_enabled == r.her);
      CHECK(f.bc_enabled == r.bc);
      CHECK(f.q_filter == r.qf);
      CHECK(f.rl_enabled == r.rl);
      CHECK(f.bc_pretrain == r.pre);
      CHECK(f.needs_demos == r.demos);
      CHECK(f.demo_batch_size == r.nd);
      CHECK(f.reset_from_demo_prob == (r.mode == Mode::ours_resets ? 0.5 : 0.0));
      if (r.nd > 0) CHECK(f.lambda2 == doctest::Approx(0.25));
      CHECK(f.lambda1 == (r.rl ? 1.0 : 0.0));
      CHECK(train::mode_from_string(train::to_string(r.mode)) == r.mode);
    }
    CHECK(train::all_modes().size() == 8);
  }

  TEST_CASE("clip_target bounds targets by the discounted reward range") {
    train::TrainConfig c = tiny("stack_2", Mode::her);
    c.reward = "step";
    CHECK(std::isinf(train::Trainer(c).config().hyper.q_min));
    c.clip_target = true;
    const train::Trainer t(c);
    CHECK(t.config().hyper.q_min == doctest::Approx(-1.0 / 0.02));
    CHECK(t.config().hyper.q_max == doctest::Approx(1.0 / 0.02));
    CHECK(train::parse_key_values("clip_target = true").count("clip_target") == 1);
  }

  TEST_CASE("every mode trains two epochs with finite metrics") {
    for (const Mode m : train::all_modes()) {
      CAPTURE(train::to_string(m));
      train::Trainer t(tiny("pick_place", m));
      const auto& hist = t.run();
      REQUIRE(hist.size() == 2);
      for (const auto& r : hist) {
        CHECK(std::isfinite(r.critic_loss));
        CHECK(std::isfinite(r.bc_loss));
        CHECK(r.success_rate >= 0.0);
        CHECK(r.success_rate <= 1.0);
      }
      if (m == Mode::bc) CHECK(t.buffer().empty());
      CHECK(t.networks().actor.all_finite());
    }
  }

  TEST_CASE("hindsight copies follow the mode") {
    train::Trainer with(tiny("push", Mode::ours));
    with.run();
    const auto rf = replay::reward_fn_for(with.task());
    const auto a = replay::audit(with.buffer(), rf);
    CHECK(a.reward_inconsistent == 0);
    CHECK(2 * a.relabeled == a.total);

    train::Trainer without(tiny("push", Mode::no_her));
    without.run();
    const auto b = replay::audit(without.buffer(), rf);
    CHECK(b.relabeled == 0);
    CHECK(b.total > 0);
    CHECK(without.demo_buffer().size() ==
          [&] {
            std::size_t n = 0;
            for (const auto& d : without.demos()) n += d.length();
            return n;
          }());
  }

  TEST_CASE("identical seeds give identical metrics and networks") {
    const TrainConfig c = tiny("stack_2", Mode::ours_resets);
    train::Trainer a(c), b(c);
    a.run();
    b.run();
    CHECK(csv(a.history()) == csv(b.history()));
    CHECK(a.networks().actor == b.networks().actor);
    CHECK(a.networks().critic == b.networks().critic);
    TrainConfig other = c;
    other.seed = 4;
    train::Trainer d(other);
    d.run();
    CHECK_FALSE(d.networks().actor == a.networks().actor);
  }

  TEST_CASE("demo resets draw states uniformly") {
    demos::DemoEpisode d;
    d.task = "push";
    const std::size_t len = 10;
    auto state = [](std::size_t k) {
      world::WorldState s;
      s.gripper = world::Vec3(0.01 * static_cast<double>(k), 0.0, 0.1);
      s.blocks.push_back({world::Vec3(0.1, 0.0, world::kBlockHalf), world::Vec3::Zero()});
      s.tick = static_cast<long>(k);
      return s;
    };
    d.initial = state(0);
    for (std::size_t k = 0; k < len; ++k) d.steps.push_back({state(k), world::Action{}});
    d.final_state = state(len);
    d.goal.targets = {world::Vec3(0.2, 0.0, world::kBlockHalf)};
    Rng rng(5);
    const int draws = 11000;
    std::vector<int> counts(len + 1, 0);
    for (int k = 0; k < draws; ++k) {
      const auto [s, g] = train::reset_from_demo(rng, {d});
      CHECK(s.tick == 0);
      CHECK(g == world::achieved_goal(d.final_state));
      counts[static_cast<std::size_t>(std::lround(s.gripper.x() / 0.01))]++;
    }
    const double expected = static_cast<double>(draws) / static_cast<double>(len + 1);
    double chi2 = 0.0;
    for (const int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 0.1% critical value of chi-square with 10 degrees of freedom.
    CHECK(chi2 < 29.59);
    CHECK_THROWS_AS(train::reset_from_demo(rng, {}), InvalidInput);
  }

  TEST_CASE("evaluation scores the scripted demonstrator and a random policy") {
    const auto task = world::TaskSpec::from_name("pick_place");
    Rng rng(6);
    std::optional<demos::ScriptedDemonstrator> demo;
    Rng demo_rng(7);
    demos::DemonstratorConfig clean;
    clean.sigma = 0.0;
    clean.drop_prob = 0.0;
    const train::Policy scripted = [&](const world::WorldState& s, const world::Goal& g) {
      if (s.tick == 0) demo.emplace(task, clean, demo_rng);
      return demo->next(s, g);
    };
    CHECK(train::evaluate(scripted, task, 50, rng).success_rate >= 0.95);
    Rng act_rng(8);
    const train::Policy random_policy = [&](const world::WorldState&, const world::Goal&) {
      world::Action a;
      a.delta = world::Vec3(uniform(act_rng, -0.1, 0.1), uniform(act_rng, -0.1, 0.1), uniform(act_rng, -0.1, 0.1));
      a.grip = uniform(act_rng, -1.0, 1.0);
      return a;
    };
    const auto r = train::evaluate(random_policy, task, 100, rng);
    CHECK(r.success_rate <= 0.02);
    CHECK(r.mean_final_reward == doctest::Approx(r.success_rate - 1.0));
    CHECK_THROWS_AS(train::evaluate(random_policy, task, 0, rng), InvalidInput);
  }

  TEST_CASE("bc pretraining fits a single demonstration") {
    const TrainConfig c = tiny("pick_place", Mode::bc_her);
    const auto demos_kept = train::prepare_demos(c);
    REQUIRE_FALSE(demos_kept.empty());
    const auto task = c.task_spec();
    const auto rf = replay::reward_fn_for(task);
    replay::Episode ep = demos::to_episode(demos_kept.front(), task);
    ep.transitions.resize(4);
    const replay::DemoBuffer one({ep}, rf, false);
    const agent::Encoder enc(1);
    agent::TrainHyper hyper;
    hyper.actor_l2 = 0.0;
    Rng rng(9);
    agent::ActorCritic ac = agent::ActorCritic::create(enc.input_dim(), {32, 32}, rng, hyper);
    const agent::ActorCritic before = ac;
    CHECK(train::bc_pretrain(ac, one, enc, 0, 4, 0.25, hyper, rng) == 0.0);
    CHECK(ac.actor == before.actor);
    const double loss = train::bc_pretrain(ac, one, enc, 3000, 4, 0.25, hyper, rng);
    CHECK(loss < 1e-4);
    CHECK(ac.critic == before.critic);
  }

  TEST_CASE("resuming from a checkpoint continues bit-exactly") {
    TrainConfig c = tiny("push", Mode::ours);
    c.epochs = 3;
    train::Trainer straight(c);
    straight.run();

    TrainConfig first = c;
    first.epochs = 2;
    train::Trainer part(first);
    part.run();
    const auto dir = fresh_dir("resume");
    part.save_checkpoint(dir);
    train::Trainer resumed(c);
    resumed.load_checkpoint(dir);
    CHECK(resumed.epoch() == 2);
    resumed.run();
    CHECK(csv(resumed.history()) == csv(straight.history()));
    CHECK(resumed.networks().actor == straight.networks().actor);
    CHECK(resumed.networks().critic_target == straight.networks().critic_target);

    TrainConfig changed = c;
    changed.batch_size = 8;
    train::Trainer mismatch(changed);
    CHECK_THROWS_AS(mismatch.load_checkpoint(dir), ConfigError);
    c.save_buffer = false;
    train::Trainer no_buf(c);
    no_buf.save_checkpoint(fresh_dir("no_buffer"));
    CHECK_THROWS_AS(no_buf.load_checkpoint(std::filesystem::temp_directory_path() / "demorl_test_trainer" / "no_buffer"),
                    InvalidInput);
  }

  TEST_CASE("train_to_dir writes metrics, timing and a resumable checkpoint") {
    const auto dir = fresh_dir("run");
    TrainConfig c = tiny();
    train::train_to_dir(c, dir, false, nullptr);
    const std::string metrics = read_file(dir / "metrics.csv");
    CHECK(metrics.rfind(std::string(train::kMetricsHeader) + "\n", 0) == 0);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
    CHECK(metrics.find("wall") == std::string::npos);
    CHECK(std::filesystem::exists(dir / "timing.csv"));
    CHECK(std::filesystem::exists(dir / "checkpoint" / "checkpoint.json"));
    TrainConfig back;
    train::apply(back, train::read_key_values(dir / "config.cfg"));
    CHECK(train::to_text(back) == train::to_text(c));

    c.epochs = 3;
    train::train_to_dir(c, dir, true, nullptr);
    const std::string resumed = read_file(dir / "metrics.csv");
    CHECK(resumed.rfind(metrics, 0) == 0);
    CHECK(std::count(resumed.begin(), resumed.end(), '\n') == 4);

    const auto again = fresh_dir("run_again");
    train::train_to_dir(c, again, false, nullptr);
    CHECK(read_file(again / "metrics.csv") == resumed);
  }

  TEST_CASE("update hook sees the masks the actor step used") {
    train::Trainer t(tiny("push", Mode::ours));
    int calls = 0;
    t.set_update_hook([&](const agent::ActorCritic& ac, const agent::Batch& batch, const agent::ActorUpdateResult& r) {
      ++calls;
      const auto nd = static_cast<Eigen::Index>(batch.n_demo);
      REQUIRE(r.mask.size() == batch.n_demo);
      const nn::Matrix obs = batch.obs.bottomRows(nd);
      const nn::Matrix acts = batch.actions.bottomRows(nd);
      const nn::Matrix pi = nn::forward(ac.actor, obs);
      const nn::Matrix q_demo = nn::forward(ac.critic, agent::critic_input(obs, acts));
      const nn::Matrix q_pi = nn::forward(ac.critic, agent::critic_input(obs, pi));
      for (Eigen::Index i = 0; i < nd; ++i) CHECK(r.mask[static_cast<std::size_t>(i)] == (q_demo(i, 0) > q_pi(i, 0)));
    });
    t.run();
    CHECK(calls == 16);
  }

  TEST_CASE("demo files for another task are refused") {
    const auto dir = fresh_dir("demo_mismatch");
    Rng rng(10);
    demos::save_demos(dir / "d.jsonl", {demos::scripted_demo(world::TaskSpec::from_name("push"), {}, rng)});
    TrainConfig c = tiny("pick_place");
    c.demo_path = (dir / "d.jsonl").string();
    CHECK_THROWS_AS(train::prepare_demos(c), ConfigError);
    c.task = "push";
    CHECK(train::prepare_demos(c).size() <= 1);
  }

  TEST_CASE("matrix csv has one column per mode") {
    TrainConfig c = tiny();
    c.epochs = 1;
    const auto cells = train::run_matrix(c, {"push", "pick_place"}, {Mode::ours, Mode::her}, {1, 2});
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].best.size() == 2);
    const std::string out = train::matrix_csv(cells);
    std::istringstream in(out);
    std::string line;
    std::getline(in, line);
    CHECK(line == "task,ours,her");
    std::getline(in, line);
    CHECK(line.rfind("push,", 0) == 0);
    std::getline(in, line);
    CHECK(line.rfind("pick_place,", 0) == 0);
    CHECK(std::count(line.begin(), line.end(), ',') == 2);

    train::MatrixCell cell{"push", Mode::ours, {0.2, 0.8, 0.4}};
    CHECK(cell.median() == doctest::Approx(0.4));
    cell.best = {0.2, 0.4};
    CHECK(cell.median() == doctest::Approx(0.3));
  }

  TEST_CASE("early stop and success helpers") {
    std::vector<train::MetricsRow> rows(3);
    rows[0].epoch = 1;
    rows[1].epoch = 2;
    rows[1].success_rate = 0.5;
    rows[2].epoch = 3;
    rows[2].success_rate = 0.95;
    CHECK(train::best_success(rows) == 0.95);
    CHECK(train::first_epoch_reaching(rows, 0.5) == 2);
    CHECK_FALSE(train::first_epoch_reaching(rows, 0.99).has_value());
  }
}
