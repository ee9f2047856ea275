#include "demorl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "demorl/errors.hpp"

namespace demorl::train {

namespace {

constexpr const char* kCheckpointFile = "checkpoint.json";
constexpr const char* kBufferFile = "buffer.jsonl";

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

nlohmann::json row_json(const MetricsRow& r) {
  return {{"epoch", r.epoch},       {"success_rate", r.success_rate}, {"mean_final_reward", r.mean_final_reward},
          {"critic_loss", r.critic_loss}, {"bc_loss", r.bc_loss},   {"masked_fraction", r.masked_fraction},
          {"wall_time", r.wall_time}};
}

MetricsRow row_from_json(const nlohmann::json& j) {
  MetricsRow r;
  r.epoch = j.at("epoch").get<int>();
  r.success_rate = j.at("success_rate").get<double>();
  r.mean_final_reward = j.at("mean_final_reward").get<double>();
  r.critic_loss = j.at("critic_loss").get<double>();
  r.bc_loss = j.at("bc_loss").get<double>();
  r.masked_fraction = j.at("masked_fraction").get<double>();
  r.wall_time = j.at("wall_time").get<double>();
  return r;
}

std::string timing_line(const MetricsRow& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%d,%.3f", r.epoch, r.wall_time);
  return buf;
}

}  // namespace

std::string metrics_line(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.9g,%.9g,%.6f", r.epoch, r.success_rate, r.mean_final_reward,
                r.critic_loss, r.bc_loss, r.masked_fraction);
  return buf;
}

std::pair<world::WorldState, world::Goal> reset_from_demo(Rng& rng, const std::vector<demos::DemoEpisode>& demos) {
  if (demos.empty()) throw InvalidInput("reset_from_demo: no demonstrations");
  const auto& d = demos[uniform_index(rng, demos.size())];
  const std::size_t i = uniform_index(rng, d.length() + 1);
  world::WorldState s = d.state_at(i);
  s.tick = 0;
  return {s, world::achieved_goal(d.final_state)};
}

EvalResult evaluate(const Policy& policy, const world::TaskSpec& task, int episodes, Rng& rng) {
  if (episodes < 1) throw InvalidInput("evaluate: need at least one episode");
  EvalResult r;
  for (int e = 0; e < episodes; ++e) {
    auto [s, g] = world::sample_task(rng, task);
    for (std::size_t t = 0; t < task.horizon; ++t) s = world::step(s, policy(s, g), task);
    r.success_rate += world::is_success(s, g, task) ? 1.0 : 0.0;
    r.mean_final_reward += world::reward(task, s, g);
  }
  r.success_rate /= episodes;
  r.mean_final_reward /= episodes;
  return r;
}

double bc_pretrain(agent::ActorCritic& ac, const replay::DemoBuffer& demos, const agent::Encoder& enc, int steps,
                   int batch, double lambda2, const agent::TrainHyper& hyper, Rng& rng) {
  if (steps > 0 && demos.empty()) throw InvalidInput("bc_pretrain: no demonstrations");
  const replay::ReplayBuffer none(1);
  agent::LossWeights w;
  w.lambda1 = 0.0;
  w.lambda2 = lambda2;
  w.q_filter = false;
  w.bc_enabled = true;
  double loss = 0.0;
  for (int k = 0; k < steps; ++k) {
    const auto samples = replay::sample_minibatch(rng, none, demos, 0, static_cast<std::size_t>(batch));
    const agent::Batch b = agent::make_batch(enc, samples);
    loss = lambda2 * agent::actor_update(ac, b, w, hyper).bc_loss;
  }
  return loss;
}

std::vector<demos::DemoEpisode> prepare_demos(const TrainConfig& cfg) {
  const world::TaskSpec task = cfg.task_spec();
  std::vector<demos::DemoEpisode> raw;
  if (!cfg.demo_path.empty()) {
    raw = demos::load_demos(cfg.demo_path);
    for (const auto& d : raw) {
      if (d.task != task.name()) {
        throw ConfigError("demo file " + cfg.demo_path + " holds '" + d.task + "' episodes, training task is '" +
                          task.name() + "'");
      }
    }
  } else {
    demos::DemonstratorConfig dc;
    dc.sigma = cfg.demo_sigma;
    dc.drop_prob = cfg.demo_drop_prob;
    dc.max_step = cfg.demo_max_step;
    dc.seed = cfg.seed;
    Rng rng = derive_rng(cfg.seed, kDemo);
    for (int i = 0; i < cfg.n_demos; ++i) raw.push_back(demos::scripted_demo(task, dc, rng));
  }
  std::vector<demos::DemoEpisode> kept;
  for (auto& d : raw) {
    if (demos::accept_filter(d, task) && demos::replay_matches(d, task)) kept.push_back(std::move(d));
  }
  return kept;
}

Trainer::Trainer(TrainConfig cfg, std::optional<std::vector<demos::DemoEpisode>> demos_in)
    : cfg_(std::move(cfg)),
      flags_(resolve_flags(cfg_)),
      task_(cfg_.task_spec()),
      enc_(task_.n_blocks),
      reward_fn_(replay::reward_fn_for(task_)),
      buffer_(cfg_.buffer_capacity),
      rollout_rng_(derive_rng(cfg_.seed, kRollout)),
      sample_rng_(derive_rng(cfg_.seed, kSample)) {
  if (cfg_.clip_target) {
    const auto [r_min, r_max] = world::reward_range(task_);
    cfg_.hyper.q_min = r_min / (1.0 - cfg_.hyper.gamma);
    cfg_.hyper.q_max = r_max / (1.0 - cfg_.hyper.gamma);
  }
  Rng init = derive_rng(cfg_.seed, kInit);
  ac_ = agent::ActorCritic::create(enc_.input_dim(), cfg_.hidden, init, cfg_.hyper);
  if (flags_.needs_demos) {
    demos_ = demos_in ? std::move(*demos_in) : prepare_demos(cfg_);
    if (demos_.empty()) throw ConfigError("no demonstration passed the acceptance filter");
    std::vector<replay::Episode> eps;
    for (const auto& d : demos_) eps.push_back(demos::to_episode(d, task_));
    demo_buffer_ = replay::DemoBuffer(std::move(eps), reward_fn_, flags_.her_enabled);
  }
  if (flags_.bc_pretrain) {
    Rng r = derive_rng(cfg_.seed, kPretrain);
    const int nb = std::max(cfg_.demo_batch_size, 1);
    bc_pretrain(ac_, demo_buffer_, enc_, cfg_.bc_pretrain_steps, nb, 1.0 / nb, cfg_.hyper, r);
    ac_.actor_target = ac_.actor;
    ac_.actor_opt = nn::AdamState::for_net(ac_.actor, cfg_.hyper.actor_lr);
  }
  start_time_ = now_seconds();
}

world::Action Trainer::policy_action(const world::WorldState& s, const world::Goal& g, bool explore) {
  return agent::act(ac_, enc_, s, g, cfg_.noise, rollout_rng_, explore);
}

replay::Episode Trainer::rollout() {
  world::WorldState s;
  world::Goal g;
  if (flags_.reset_from_demo_prob > 0.0 && uniform01(rollout_rng_) < flags_.reset_from_demo_prob) {
    std::tie(s, g) = reset_from_demo(rollout_rng_, demos_);
  } else {
    std::tie(s, g) = world::sample_task(rollout_rng_, task_);
  }
  replay::Episode ep;
  ep.transitions.reserve(task_.horizon);
  for (std::size_t t = 0; t < task_.horizon; ++t) {
    replay::Transition tr;
    tr.state = s;
    tr.action = policy_action(s, g, true);
    tr.next_state = world::step(s, tr.action, task_);
    tr.goal = g;
    tr.reward = reward_fn_(tr.next_state, g);
    s = tr.next_state;
    ep.transitions.push_back(std::move(tr));
  }
  replay::store_episode_with_her(buffer_, ep, reward_fn_, flags_.her_enabled, task_.horizon);
  return ep;
}

UpdateInfo Trainer::update() {
  UpdateInfo info;
  agent::LossWeights w;
  w.lambda1 = flags_.lambda1;
  w.lambda2 = flags_.lambda2;
  w.q_filter = flags_.q_filter;
  w.bc_enabled = flags_.bc_enabled || !flags_.rl_enabled;
  const std::size_t n = flags_.rl_enabled ? static_cast<std::size_t>(cfg_.batch_size) : 0;
  const auto samples =
      replay::sample_minibatch(sample_rng_, buffer_, demo_buffer_, n, static_cast<std::size_t>(flags_.demo_batch_size));
  const agent::Batch batch = agent::make_batch(enc_, samples);
  if (flags_.rl_enabled) info.critic_loss = agent::critic_update(ac_, batch, cfg_.hyper);
  agent::ActorUpdateResult res;
  if (hook_) {
    const agent::ActorCritic before = ac_;
    res = agent::actor_update(ac_, batch, w, cfg_.hyper);
    hook_(before, batch, res);
  } else {
    res = agent::actor_update(ac_, batch, w, cfg_.hyper);
  }
  if (flags_.rl_enabled) agent::target_update(ac_, cfg_.hyper.tau);
  info.bc_loss = res.bc_loss;
  info.mask = std::move(res.mask);
  return info;
}

EvalResult Trainer::evaluate_policy() const {
  Rng eval_rng = derive_rng(cfg_.seed, kEval);
  Rng unused(0);
  const Policy pi = [&](const world::WorldState& s, const world::Goal& g) {
    return agent::act(ac_, enc_, s, g, cfg_.noise, unused, false);
  };
  return evaluate(pi, task_, cfg_.eval_episodes, eval_rng);
}

MetricsRow Trainer::run_epoch() {
  double critic_sum = 0.0;
  double bc_sum = 0.0;
  std::size_t updates = 0;
  std::size_t mask_on = 0;
  std::size_t mask_total = 0;
  for (int c = 0; c < cfg_.cycles_per_epoch; ++c) {
    if (flags_.rl_enabled) {
      for (int r = 0; r < cfg_.rollouts_per_cycle; ++r) rollout();
    }
    for (int u = 0; u < cfg_.updates_per_cycle; ++u) {
      const UpdateInfo info = update();
      critic_sum += info.critic_loss;
      bc_sum += info.bc_loss;
      ++updates;
      for (const int m : info.mask) mask_on += static_cast<std::size_t>(m);
      mask_total += info.mask.size();
    }
  }
  ++epoch_;
  const EvalResult ev = evaluate_policy();
  MetricsRow row;
  row.epoch = epoch_;
  row.success_rate = ev.success_rate;
  row.mean_final_reward = ev.mean_final_reward;
  row.critic_loss = updates ? critic_sum / static_cast<double>(updates) : 0.0;
  row.bc_loss = updates ? bc_sum / static_cast<double>(updates) : 0.0;
  row.masked_fraction = mask_total ? static_cast<double>(mask_on) / static_cast<double>(mask_total) : 0.0;
  row.wall_time = wall_offset_ + (now_seconds() - start_time_);
  history_.push_back(row);
  return row;
}

const std::vector<MetricsRow>& Trainer::run(const std::function<void(const MetricsRow&)>& on_epoch) {
  while (epoch_ < cfg_.epochs) {
    const MetricsRow row = run_epoch();
    if (on_epoch) on_epoch(row);
    if (cfg_.stop_success > 0.0 && row.success_rate >= cfg_.stop_success) break;
  }
  return history_;
}

void Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : history_) hist.push_back(row_json(r));
  nlohmann::json j = {{"format", "demorl-checkpoint"},
                      {"version", 1},
                      {"config_hash", config_hash(cfg_)},
                      {"config", to_text(cfg_)},
                      {"encoding_version", agent::kEncodingVersion},
                      {"epoch", epoch_},
                      {"networks", ac_},
                      {"rollout_rng", rng_to_string(rollout_rng_)},
                      {"sample_rng", rng_to_string(sample_rng_)},
                      {"history", hist},
                      {"buffer_file", cfg_.save_buffer ? nlohmann::json(kBufferFile) : nlohmann::json(nullptr)}};
  if (cfg_.save_buffer) {
    const auto tmp = dir / (std::string(kBufferFile) + ".tmp");
    {
      std::ofstream out(tmp, std::ios::trunc);
      buffer_.save(out, task_.name());
      if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, dir / kBufferFile);
  }
  const auto tmp = dir / (std::string(kCheckpointFile) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump() << '\n';
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / kCheckpointFile);
}

void Trainer::load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / kCheckpointFile);
  if (!in) throw InvalidInput("no checkpoint in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("checkpoint is not valid JSON: " + std::string(e.what()));
  }
  if (j.value("format", "") != "demorl-checkpoint" || j.value("version", 0) != 1) {
    throw InvalidInput("unrecognized checkpoint format");
  }
  if (j.at("config_hash").get<std::uint64_t>() != config_hash(cfg_)) {
    throw ConfigError("checkpoint was written with a different configuration");
  }
  if (j.value("encoding_version", 0) != agent::kEncodingVersion) {
    throw InvalidInput("checkpoint uses a different observation encoding");
  }
  agent::ActorCritic ac = j.at("networks").get<agent::ActorCritic>();
  if (!ac.actor.same_shape(ac_.actor) || !ac.critic.same_shape(ac_.critic)) {
    throw InvalidInput("checkpoint network shapes do not match the configuration");
  }
  std::vector<MetricsRow> hist;
  for (const auto& r : j.at("history")) hist.push_back(row_from_json(r));
  if (j.at("buffer_file").is_null()) {
    throw InvalidInput("checkpoint has no replay buffer snapshot; cannot resume exactly");
  }
  std::ifstream bin(dir / j.at("buffer_file").get<std::string>());
  if (!bin) throw InvalidInput("checkpoint buffer file is missing");
  buffer_ = replay::ReplayBuffer::load(bin);
  ac_ = std::move(ac);
  rollout_rng_ = rng_from_string(j.at("rollout_rng").get<std::string>());
  sample_rng_ = rng_from_string(j.at("sample_rng").get<std::string>());
  epoch_ = j.at("epoch").get<int>();
  history_ = std::move(hist);
  wall_offset_ = history_.empty() ? 0.0 : history_.back().wall_time;
  start_time_ = now_seconds();
}

std::string Trainer::flags_summary() const {
  std::ostringstream os;
  os << "task=" << task_.name() << " mode=" << to_string(cfg_.mode) << " reward=" << world::to_string(task_.reward)
     << " horizon=" << task_.horizon << " her_enabled=" << flags_.her_enabled << " bc_enabled=" << flags_.bc_enabled
     << " q_filter=" << flags_.q_filter << " rl_enabled=" << flags_.rl_enabled
     << " bc_pretrain=" << flags_.bc_pretrain << " reset_from_demo_prob=" << flags_.reset_from_demo_prob
     << " N=" << cfg_.batch_size << " N_D=" << flags_.demo_batch_size << " lambda1=" << flags_.lambda1
     << " lambda2=" << flags_.lambda2 << " demos=" << demos_.size();
  return os.str();
}

std::vector<MetricsRow> train_to_dir(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool resume,
                                     std::ostream* log) {
  std::filesystem::create_directories(out_dir);
  Trainer trainer(cfg);
  const auto ckpt_dir = out_dir / "checkpoint";
  if (resume) trainer.load_checkpoint(ckpt_dir);
  if (log) *log << trainer.flags_summary() << '\n';
  {
    std::ofstream c(out_dir / "config.cfg", std::ios::trunc);
    c << to_text(cfg);
  }
  std::ofstream metrics(out_dir / "metrics.csv", std::ios::trunc);
  std::ofstream timing(out_dir / "timing.csv", std::ios::trunc);
  if (!metrics || !timing) throw std::runtime_error("cannot write metrics under " + out_dir.string());
  metrics << kMetricsHeader << '\n';
  timing << "epoch,wall_time\n";
  for (const auto& r : trainer.history()) {
    metrics << metrics_line(r) << '\n';
    timing << timing_line(r) << '\n';
  }
  metrics.flush();
  trainer.run([&](const MetricsRow& r) {
    metrics << metrics_line(r) << '\n' << std::flush;
    timing << timing_line(r) << '\n' << std::flush;
    if (log) *log << "epoch " << r.epoch << " success " << r.success_rate << " critic_loss " << r.critic_loss << '\n';
    if (cfg.checkpoint_every > 0 && r.epoch % cfg.checkpoint_every == 0) trainer.save_checkpoint(ckpt_dir);
  });
  trainer.save_checkpoint(ckpt_dir);
  return trainer.history();
}

double best_success(const std::vector<MetricsRow>& rows) {
  double best = 0.0;
  for (const auto& r : rows) best = std::max(best, r.success_rate);
  return best;
}

std::optional<int> first_epoch_reaching(const std::vector<MetricsRow>& rows, double threshold) {
  for (const auto& r : rows)
    if (r.success_rate >= threshold) return r.epoch;
  return std::nullopt;
}

double MatrixCell::median() const {
  if (best.empty()) return 0.0;
  std::vector<double> v = best;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<MatrixCell> run_matrix(const TrainConfig& base, const std::vector<std::string>& tasks,
                                   const std::vector<Mode>& modes, const std::vector<std::uint64_t>& seeds,
                                   std::ostream* log) {
  if (seeds.empty()) throw InvalidInput("run_matrix: need at least one seed");
  std::vector<MatrixCell> cells;
  for (const auto& task : tasks) {
    for (const Mode mode : modes) {
      MatrixCell cell{task, mode, {}};
      for (const auto seed : seeds) {
        TrainConfig cfg = base;
        cfg.task = task;
        cfg.mode = mode;
        cfg.seed = seed;
        Trainer t(cfg);
        const double best = best_success(t.run());
        cell.best.push_back(best);
        if (log) *log << task << ' ' << to_string(mode) << " seed " << seed << " best " << best << '\n';
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::string matrix_csv(const std::vector<MatrixCell>& cells) {
  std::vector<std::string> tasks;
  std::vector<Mode> modes;
  for (const auto& c : cells) {
    if (std::find(tasks.begin(), tasks.end(), c.task) == tasks.end()) tasks.push_back(c.task);
    if (std::find(modes.begin(), modes.end(), c.mode) == modes.end()) modes.push_back(c.mode);
  }
  std::string out = "task";
  for (const Mode m : modes) out += "," + to_string(m);
  out += "\n";
  for (const auto& t : tasks) {
    out += t;
    for (const Mode m : modes) {
      const auto it = std::find_if(cells.begin(), cells.end(), [&](const MatrixCell& c) { return c.task == t && c.mode == m; });
      char buf[32] = "";
      if (it != cells.end()) std::snprintf(buf, sizeof buf, "%.4f", it->median());
      out += std::string(",") + buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace demorl::train
