#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/encoder.hpp"
#include "shiftlab/envs.hpp"
#include "shiftlab/nn.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

/// pi(a | s, z): one network emitting [mean; log_std] for each action dim.
struct Actor {
  Mlp net;
  int state_dim = 2;
  int latent_dim = 8;
  int action_dim = 2;

  static Actor create(int state_dim, int latent_dim, int action_dim, const std::vector<int>& hidden, Rng& rng);
};

/// Q(s, a, z) and its target copy.
struct Critic {
  Mlp q;
  Mlp target;

  static Critic create(int state_dim, int latent_dim, int action_dim, const std::vector<int>& hidden, Rng& rng);
};

struct AgentConfig {
  double gamma = 0.9;
  double alpha = 0.0;   // behaviour-regularisation weight
  double tau = 0.005;   // Polyak rate
  int batch_size = 256; // transitions per task
  int meta_batch = 8;
  double reward_scale = 100.0;  // TD targets use r / reward_scale

  static AgentConfig for_family(Family family);
  void validate() const;
};

/// Columns are transitions; z holds each transition's (detached) task latent.
struct AgentBatch {
  Eigen::MatrixXd s;
  Eigen::MatrixXd a;
  Eigen::RowVectorXd r;
  Eigen::MatrixXd s_next;
  Eigen::MatrixXd z;
  Eigen::MatrixXd behavior_mean;
  Eigen::RowVectorXd behavior_std;

  Eigen::Index size() const { return s.cols(); }
};

AgentBatch make_agent_batch(std::span<const Transition> transitions, const Eigen::VectorXd& z);
/// Concatenates per-task batches column-wise.
AgentBatch concat(const std::vector<AgentBatch>& parts);

struct PolicyHeads {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd log_std;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> clamped;
  ForwardCache cache;
};

PolicyHeads policy_forward(const Actor& actor, const Eigen::MatrixXd& s, const Eigen::MatrixXd& z);

enum class ActMode { Stochastic, Deterministic };

/// Deterministic: clipped mean. Stochastic: clipped Gaussian sample.
Eigen::VectorXd act(const Actor& actor, const Eigen::VectorXd& s, const Eigen::VectorXd& z, ActMode mode, Rng& rng);

/// Mean squared TD error with a' ~ pi(. | s', z) (clipped). Gradient w.r.t. the
/// online critic only. `next_noise` (action_dim x B) supplies the sampling
/// noise for a'.
double critic_loss(const Critic& critic, const Actor& actor, const AgentBatch& batch, const AgentConfig& cfg,
                   const Eigen::MatrixXd& next_noise, MlpGrad* grad = nullptr);
double critic_loss(const Critic& critic, const Actor& actor, const AgentBatch& batch, const AgentConfig& cfg,
                   Rng& rng, MlpGrad* grad = nullptr);

struct ActorLossParts {
  double total = 0.0;
  double q_term = 0.0;   // mean Q(s, a'', z)
  double kl_term = 0.0;  // mean KL(pi || behaviour)
};

/// mean[-Q(s, a'', z) + alpha * KL(pi(.|s,z) || N(behavior_mean, behavior_std^2))]
/// with the reparameterised a'' = clip(mean + std * noise). Gradient w.r.t. the
/// actor; it does not flow through clipped coordinates.
ActorLossParts actor_loss(const Actor& actor, const Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                          const Eigen::MatrixXd& noise, MlpGrad* grad = nullptr);
ActorLossParts actor_loss(const Actor& actor, const Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                          Rng& rng, MlpGrad* grad = nullptr);

void polyak_update(Critic& critic, double tau);

struct AgentOptimizers {
  Optimizer actor;
  Optimizer critic;
};

struct AgentLossReport {
  double critic = 0.0;
  double actor = 0.0;
};

/// One critic step, one actor step (against the updated critic), then Polyak.
/// Throws TrainingError on a non-finite loss.
AgentLossReport agent_update(Actor& actor, Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                             AgentOptimizers& opt, Rng& rng);

Eigen::MatrixXd gaussian_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace shiftlab
