#pragma once

// Goal-conditioned DDPG actor-critic with a behavior-cloning auxiliary loss on
// demonstration samples, gated per sample by a Q-filter.

#include <array>
#include <cstddef>
#include <limits>
#include <vector>

#include <json.hpp>

#include "demorl/numkit.hpp"
#include "demorl/replay.hpp"
#include "demorl/world.hpp"

namespace demorl::agent {

using nn::Matrix;
using world::Action;
using world::Goal;
using world::WorldState;

inline constexpr std::size_t kActionDim = 4;
inline constexpr int kEncodingVersion = 1;

/// Observation layout (version 1), all lengths divided by kLengthScale and
/// positions taken relative to kOrigin:
///   gripper pos (3), 2*finger_gap-1 (1),
///   per block: pos (3), pos - gripper (3), pos - target (3), vel / kVelScale (3), held (1),
///   goal: targets (3 per block).
class Encoder {
 public:
  static constexpr double kLengthScale = 0.1;
  static constexpr double kVelScale = 0.05;
  static inline const world::Vec3 kOrigin{0.0, 0.0, 0.1};

  explicit Encoder(std::size_t n_blocks);

  std::size_t n_blocks() const { return n_blocks_; }
  std::size_t input_dim() const { return 4 + 16 * n_blocks_; }
  /// Writes input_dim() values.
  void encode(const WorldState& state, const Goal& goal, double* row) const;
  Matrix encode_one(const WorldState& state, const Goal& goal) const;

 private:
  std::size_t n_blocks_;
};

/// Actor/critic action space: delta / kStepMax and grip, each in [-1, 1].
std::array<double, kActionDim> action_to_unit(const Action& a);
Action action_from_unit(const double* unit);

struct LossWeights {
  double lambda1 = 1e-3;
  double lambda2 = 1.0 / 32.0;
  bool q_filter = true;
  bool bc_enabled = true;
};

struct NoiseConfig {
  double eps_random = 0.1;
  double uniform_frac = 0.1;
};

struct TrainHyper {
  double gamma = 0.98;
  double tau = 0.05;
  double critic_l2 = 5e-3;
  double actor_l2 = 5e-3;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  // Bellman targets are clipped to [q_min, q_max]; infinite bounds leave them untouched.
  double q_min = -std::numeric_limits<double>::infinity();
  double q_max = std::numeric_limits<double>::infinity();
};

struct ActorCritic {
  nn::DenseNet actor;   // input -> hidden... -> kActionDim, tanh head
  nn::DenseNet critic;  // input + kActionDim -> hidden... -> 1
  nn::DenseNet actor_target;
  nn::DenseNet critic_target;
  nn::AdamState actor_opt;
  nn::AdamState critic_opt;

  static ActorCritic create(std::size_t input_dim, const std::vector<std::size_t>& hidden, Rng& rng,
                            const TrainHyper& hyper);
};

void to_json(nlohmann::json& j, const ActorCritic& ac);
void from_json(const nlohmann::json& j, ActorCritic& ac);

/// Rows are samples; the last n_demo rows came from the demonstration buffer.
struct Batch {
  Matrix obs;
  Matrix next_obs;
  Matrix actions;  // unit action space
  Eigen::VectorXd rewards;
  std::size_t n_demo = 0;

  std::size_t size() const { return static_cast<std::size_t>(obs.rows()); }
};

Batch make_batch(const Encoder& enc, const std::vector<replay::Sample>& samples);

/// [obs | actions] column concatenation.
Matrix critic_input(const Matrix& obs, const Matrix& actions);

Action act(const ActorCritic& ac, const Encoder& enc, const WorldState& state, const Goal& goal,
           const NoiseConfig& noise, Rng& rng, bool explore);

/// y = r + gamma * Q'(s', pi'(s')), bootstrapping on every sample, clipped to [q_min, q_max].
Eigen::VectorXd critic_targets(const ActorCritic& ac, const Batch& batch, double gamma,
                               double q_min = -std::numeric_limits<double>::infinity(),
                               double q_max = std::numeric_limits<double>::infinity());

/// Gradient of mean squared Bellman error plus 0.5 * critic_l2 * ||W||^2.
/// `loss_out`, when given, receives the Bellman term.
nn::GradBundle critic_gradient(const ActorCritic& ac, const Batch& batch, const TrainHyper& hyper,
                               double* loss_out = nullptr);

/// One Adam step on the critic along critic_gradient.
/// Returns the pre-step Bellman loss.
double critic_update(ActorCritic& ac, const Batch& batch, const TrainHyper& hyper);

/// Gradient of J = mean_i Q(s_i, pi(s_i)) with respect to the actor parameters
/// (ascent direction). `j_out`, when given, receives J.
nn::GradBundle actor_gradient_ddpg(const ActorCritic& ac, const Matrix& obs, double* j_out = nullptr);

struct BcResult {
  double loss = 0.0;
  nn::GradBundle grad;
  std::vector<int> mask;
};

/// L_BC = sum_i mask_i * ||pi(s_i) - a_i||^2 with mask_i = [Q(s_i,a_i) > Q(s_i,pi(s_i))]
/// when weights.q_filter, else 1. Gradient is d L_BC / d theta_pi.
BcResult bc_loss_and_gradient(const ActorCritic& ac, const Matrix& demo_obs, const Matrix& demo_actions,
                              const LossWeights& weights);

struct ActorUpdateResult {
  double j = 0.0;
  double bc_loss = 0.0;
  std::vector<int> mask;
};

/// Descent direction of -lambda1 * J + lambda2 * L_BC + 0.5 * actor_l2 * ||W||^2,
/// L_BC taken over the last n_demo rows. `info` receives J, L_BC and the mask.
nn::GradBundle actor_gradient(const ActorCritic& ac, const Batch& batch, const LossWeights& weights,
                              const TrainHyper& hyper, ActorUpdateResult* info = nullptr);

/// One Adam step on the actor along actor_gradient.
ActorUpdateResult actor_update(ActorCritic& ac, const Batch& batch, const LossWeights& weights,
                               const TrainHyper& hyper);

/// theta' <- tau * theta + (1 - tau) * theta' for both targets.
void target_update(ActorCritic& ac, double tau);

}  // namespace demorl::agent
