#include "demorl/agent.hpp"

#include <algorithm>
#include <cmath>

#include "demorl/errors.hpp"

namespace demorl::agent {

Encoder::Encoder(std::size_t n_blocks) : n_blocks_(n_blocks) {
  if (n_blocks == 0) throw InvalidInput("encoder needs at least one block");
}

void Encoder::encode(const WorldState& s, const Goal& g, double* row) const {
  if (s.blocks.size() != n_blocks_ || g.targets.size() != n_blocks_) {
    throw InvalidInput("encode: state/goal block count does not match the encoder");
  }
  const double inv = 1.0 / kLengthScale;
  std::size_t k = 0;
  auto put = [&](const world::Vec3& v, double scale) {
    row[k++] = v.x() * scale;
    row[k++] = v.y() * scale;
    row[k++] = v.z() * scale;
  };
  put(s.gripper - kOrigin, inv);
  row[k++] = 2.0 * s.finger_gap - 1.0;
  for (std::size_t i = 0; i < n_blocks_; ++i) {
    const auto& b = s.blocks[i];
    put(b.pos - kOrigin, inv);
    put(b.pos - s.gripper, inv);
    put(b.pos - g.targets[i], inv);
    put(b.vel, 1.0 / kVelScale);
    row[k++] = (s.attached == i) ? 1.0 : 0.0;
  }
  for (const auto& t : g.targets) put(t - kOrigin, inv);
}

Matrix Encoder::encode_one(const WorldState& state, const Goal& goal) const {
  Matrix m(1, static_cast<Eigen::Index>(input_dim()));
  encode(state, goal, m.data());
  return m;
}

std::array<double, kActionDim> action_to_unit(const Action& a) {
  return {a.delta.x() / world::kStepMax, a.delta.y() / world::kStepMax, a.delta.z() / world::kStepMax, a.grip};
}

Action action_from_unit(const double* u) {
  Action a;
  a.delta = world::Vec3(u[0], u[1], u[2]) * world::kStepMax;
  a.grip = u[3];
  return a;
}

ActorCritic ActorCritic::create(std::size_t input_dim, const std::vector<std::size_t>& hidden, Rng& rng,
                                const TrainHyper& hyper) {
  std::vector<std::size_t> adims{input_dim};
  adims.insert(adims.end(), hidden.begin(), hidden.end());
  adims.push_back(kActionDim);
  std::vector<std::size_t> cdims{input_dim + kActionDim};
  cdims.insert(cdims.end(), hidden.begin(), hidden.end());
  cdims.push_back(1);
  ActorCritic ac;
  ac.actor = nn::DenseNet::random(adims, nn::Activation::relu, nn::Activation::tanh, rng);
  ac.critic = nn::DenseNet::random(cdims, nn::Activation::relu, nn::Activation::identity, rng);
  ac.actor_target = ac.actor;
  ac.critic_target = ac.critic;
  ac.actor_opt = nn::AdamState::for_net(ac.actor, hyper.actor_lr);
  ac.critic_opt = nn::AdamState::for_net(ac.critic, hyper.critic_lr);
  return ac;
}

void to_json(nlohmann::json& j, const ActorCritic& ac) {
  j = {{"actor", ac.actor},         {"critic", ac.critic},         {"actor_target", ac.actor_target},
       {"critic_target", ac.critic_target}, {"actor_opt", ac.actor_opt}, {"critic_opt", ac.critic_opt}};
}

void from_json(const nlohmann::json& j, ActorCritic& ac) {
  ac.actor = j.at("actor").get<nn::DenseNet>();
  ac.critic = j.at("critic").get<nn::DenseNet>();
  ac.actor_target = j.at("actor_target").get<nn::DenseNet>();
  ac.critic_target = j.at("critic_target").get<nn::DenseNet>();
  ac.actor_opt = j.at("actor_opt").get<nn::AdamState>();
  ac.critic_opt = j.at("critic_opt").get<nn::AdamState>();
  if (!ac.actor.same_shape(ac.actor_target) || !ac.critic.same_shape(ac.critic_target)) {
    throw InvalidInput("checkpoint: target networks do not mirror the main networks");
  }
}

Batch make_batch(const Encoder& enc, const std::vector<replay::Sample>& samples) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  const auto d = static_cast<Eigen::Index>(enc.input_dim());
  Batch b;
  b.obs.resize(n, d);
  b.next_obs.resize(n, d);
  b.actions.resize(n, static_cast<Eigen::Index>(kActionDim));
  b.rewards.resize(n);
  bool seen_demo = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.is_demo) {
      seen_demo = true;
      ++b.n_demo;
    } else if (seen_demo) {
      throw InvalidInput("make_batch: demonstration samples must come last");
    }
    const auto& t = *s.transition;
    enc.encode(t.state, t.goal, b.obs.row(i).data());
    enc.encode(t.next_state, t.goal, b.next_obs.row(i).data());
    const auto u = action_to_unit(t.action);
    for (std::size_t k = 0; k < kActionDim; ++k) b.actions(i, static_cast<Eigen::Index>(k)) = u[k];
    b.rewards(i) = t.reward;
  }
  return b;
}

Matrix critic_input(const Matrix& obs, const Matrix& actions) {
  if (obs.rows() != actions.rows()) throw InvalidInput("critic_input: row counts differ");
  Matrix x(obs.rows(), obs.cols() + actions.cols());
  x.leftCols(obs.cols()) = obs;
  x.rightCols(actions.cols()) = actions;
  return x;
}

Action act(const ActorCritic& ac, const Encoder& enc, const WorldState& state, const Goal& goal,
           const NoiseConfig& noise, Rng& rng, bool explore) {
  const Matrix out = nn::forward(ac.actor, enc.encode_one(state, goal));
  std::array<double, kActionDim> u{};
  for (std::size_t k = 0; k < kActionDim; ++k) u[k] = out(0, static_cast<Eigen::Index>(k));
  if (explore) {
    if (uniform01(rng) < noise.eps_random) {
      for (auto& x : u) x = uniform(rng, -1.0, 1.0);
    } else {
      for (auto& x : u) x = std::clamp(x + uniform(rng, -noise.uniform_frac, noise.uniform_frac), -1.0, 1.0);
    }
  }
  return action_from_unit(u.data());
}

Eigen::VectorXd critic_targets(const ActorCritic& ac, const Batch& batch, double gamma, double q_min,
                               double q_max) {
  const Matrix next_pi = nn::forward(ac.actor_target, batch.next_obs);
  const Matrix next_q = nn::forward(ac.critic_target, critic_input(batch.next_obs, next_pi));
  Eigen::VectorXd y = batch.rewards + gamma * next_q.col(0);
  if (std::isfinite(q_min)) y = y.cwiseMax(q_min);
  if (std::isfinite(q_max)) y = y.cwiseMin(q_max);
  return y;
}

nn::GradBundle critic_gradient(const ActorCritic& ac, const Batch& batch, const TrainHyper& hyper,
                               double* loss_out) {
  if (batch.size() == 0) throw InvalidInput("critic_update: empty batch");
  const Eigen::VectorXd y = critic_targets(ac, batch, hyper.gamma, hyper.q_min, hyper.q_max);
  nn::ForwardCache cache;
  const Matrix q = nn::forward(ac.critic, critic_input(batch.obs, batch.actions), &cache);
  const Eigen::VectorXd diff = q.col(0) - y;
  const double loss = diff.squaredNorm() / static_cast<double>(batch.size());
  if (!std::isfinite(loss)) throw NumericError("critic_update: non-finite Bellman loss");
  if (loss_out) *loss_out = loss;
  Matrix out_grad = diff * (2.0 / static_cast<double>(batch.size()));
  nn::GradBundle g = nn::backward(ac.critic, cache, out_grad);
  g.input.reset();
  g += nn::l2_grad(ac.critic, hyper.critic_l2);
  return g;
}

double critic_update(ActorCritic& ac, const Batch& batch, const TrainHyper& hyper) {
  double loss = 0.0;
  const nn::GradBundle g = critic_gradient(ac, batch, hyper, &loss);
  nn::adam_step(ac.critic, g, ac.critic_opt);
  return loss;
}

nn::GradBundle actor_gradient_ddpg(const ActorCritic& ac, const Matrix& obs, double* j_out) {
  if (obs.rows() == 0) throw InvalidInput("actor_gradient_ddpg: empty batch");
  nn::ForwardCache acache;
  nn::ForwardCache ccache;
  const Matrix pi = nn::forward(ac.actor, obs, &acache);
  const Matrix q = nn::forward(ac.critic, critic_input(obs, pi), &ccache);
  if (j_out) *j_out = q.mean();
  const Matrix dq = Matrix::Constant(q.rows(), 1, 1.0 / static_cast<double>(q.rows()));
  const nn::GradBundle cg = nn::backward(ac.critic, ccache, dq);
  const Matrix da = cg.input->rightCols(static_cast<Eigen::Index>(kActionDim));
  nn::GradBundle g = nn::backward(ac.actor, acache, da);
  g.input.reset();
  return g;
}

BcResult bc_loss_and_gradient(const ActorCritic& ac, const Matrix& demo_obs, const Matrix& demo_actions,
                              const LossWeights& weights) {
  BcResult r;
  const auto n = demo_obs.rows();
  r.mask.assign(static_cast<std::size_t>(n), 1);
  if (n == 0) {
    r.grad = nn::GradBundle::zeros_like(ac.actor);
    return r;
  }
  nn::ForwardCache cache;
  const Matrix pi = nn::forward(ac.actor, demo_obs, &cache);
  if (weights.q_filter) {
    const Matrix q_demo = nn::forward(ac.critic, critic_input(demo_obs, demo_actions));
    const Matrix q_pi = nn::forward(ac.critic, critic_input(demo_obs, pi));
    for (Eigen::Index i = 0; i < n; ++i) r.mask[static_cast<std::size_t>(i)] = q_demo(i, 0) > q_pi(i, 0) ? 1 : 0;
  }
  Matrix diff = pi - demo_actions;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!r.mask[static_cast<std::size_t>(i)]) diff.row(i).setZero();
  }
  r.loss = diff.squaredNorm();
  r.grad = nn::backward(ac.actor, cache, 2.0 * diff);
  r.grad.input.reset();
  return r;
}

nn::GradBundle actor_gradient(const ActorCritic& ac, const Batch& batch, const LossWeights& weights,
                              const TrainHyper& hyper, ActorUpdateResult* info) {
  if (batch.size() == 0) throw InvalidInput("actor_update: empty batch");
  ActorUpdateResult res;
  nn::GradBundle g = actor_gradient_ddpg(ac, batch.obs, &res.j);
  g *= -weights.lambda1;
  if (weights.bc_enabled && batch.n_demo > 0) {
    const auto nd = static_cast<Eigen::Index>(batch.n_demo);
    const BcResult bc = bc_loss_and_gradient(ac, batch.obs.bottomRows(nd), batch.actions.bottomRows(nd), weights);
    g.add_scaled(bc.grad, weights.lambda2);
    res.bc_loss = bc.loss;
    res.mask = bc.mask;
  }
  g += nn::l2_grad(ac.actor, hyper.actor_l2);
  if (!g.all_finite()) throw NumericError("actor_update: non-finite gradient");
  if (info) *info = std::move(res);
  return g;
}

ActorUpdateResult actor_update(ActorCritic& ac, const Batch& batch, const LossWeights& weights,
                               const TrainHyper& hyper) {
  ActorUpdateResult res;
  const nn::GradBundle g = actor_gradient(ac, batch, weights, hyper, &res);
  nn::adam_step(ac.actor, g, ac.actor_opt);
  return res;
}

void target_update(ActorCritic& ac, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw InvalidInput("target_update: tau must lie in (0, 1]");
  nn::polyak_average(ac.actor_target, ac.actor, tau);
  nn::polyak_average(ac.critic_target, ac.critic, tau);
}

}  // namespace demorl::agent
