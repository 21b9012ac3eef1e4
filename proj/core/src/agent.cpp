#include "shiftlab/agent.hpp"

#include <cmath>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"

namespace shiftlab {

namespace {

std::vector<int> with_ends(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> sizes{in};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  return sizes;
}

Eigen::MatrixXd stack_rows(std::initializer_list<const Eigen::MatrixXd*> parts) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = (*parts.begin())->cols();
  for (const auto* p : parts) {
    if (p->cols() != cols) throw UsageError("column counts disagree");
    rows += p->rows();
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index r = 0;
  for (const auto* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

void check_batch(const AgentBatch& batch) {
  const auto b = batch.size();
  if (b == 0) throw UsageError("empty agent batch");
  if (batch.a.cols() != b || batch.r.size() != b || batch.s_next.cols() != b || batch.z.cols() != b) {
    throw UsageError("agent batch fields disagree in size");
  }
}

}  // namespace

Actor Actor::create(int state_dim, int latent_dim, int action_dim, const std::vector<int>& hidden, Rng& rng) {
  Actor actor;
  actor.state_dim = state_dim;
  actor.latent_dim = latent_dim;
  actor.action_dim = action_dim;
  actor.net = Mlp::glorot(with_ends(state_dim + latent_dim, hidden, 2 * action_dim), rng);
  return actor;
}

Critic Critic::create(int state_dim, int latent_dim, int action_dim, const std::vector<int>& hidden, Rng& rng) {
  Critic critic;
  critic.q = Mlp::glorot(with_ends(state_dim + action_dim + latent_dim, hidden, 1), rng);
  critic.target = critic.q;
  return critic;
}

AgentConfig AgentConfig::for_family(Family family) {
  const auto& tr = traits(family);
  AgentConfig cfg;
  cfg.gamma = tr.discount;
  cfg.alpha = tr.behavior_reg;
  cfg.reward_scale = tr.reward_scale;
  return cfg;
}

void AgentConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (meta_batch < 1) throw ConfigError("meta_batch must be positive");
  if (!(reward_scale > 0.0)) throw ConfigError("reward_scale must be positive");
}

AgentBatch make_agent_batch(std::span<const Transition> transitions, const Eigen::VectorXd& z) {
  if (transitions.empty()) throw UsageError("make_agent_batch: no transitions");
  const auto n = static_cast<Eigen::Index>(transitions.size());
  const auto ns = transitions.front().s.size();
  const auto na = transitions.front().a.size();
  AgentBatch b;
  b.s.resize(ns, n);
  b.a.resize(na, n);
  b.r.resize(n);
  b.s_next.resize(ns, n);
  b.z = z.replicate(1, n);
  b.behavior_mean.resize(na, n);
  b.behavior_std.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& t = transitions[static_cast<std::size_t>(j)];
    b.s.col(j) = t.s;
    b.a.col(j) = t.a;
    b.r[j] = t.r;
    b.s_next.col(j) = t.s_next;
    b.behavior_mean.col(j) = t.behavior_mean;
    b.behavior_std[j] = t.behavior_std;
  }
  return b;
}

AgentBatch concat(const std::vector<AgentBatch>& parts) {
  if (parts.empty()) throw UsageError("concat: no batches");
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  const auto& f = parts.front();
  AgentBatch out;
  out.s.resize(f.s.rows(), n);
  out.a.resize(f.a.rows(), n);
  out.r.resize(n);
  out.s_next.resize(f.s_next.rows(), n);
  out.z.resize(f.z.rows(), n);
  out.behavior_mean.resize(f.behavior_mean.rows(), n);
  out.behavior_std.resize(n);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    const auto m = p.size();
    out.s.middleCols(c, m) = p.s;
    out.a.middleCols(c, m) = p.a;
    out.r.segment(c, m) = p.r;
    out.s_next.middleCols(c, m) = p.s_next;
    out.z.middleCols(c, m) = p.z;
    out.behavior_mean.middleCols(c, m) = p.behavior_mean;
    out.behavior_std.segment(c, m) = p.behavior_std;
    c += m;
  }
  return out;
}

PolicyHeads policy_forward(const Actor& actor, const Eigen::MatrixXd& s, const Eigen::MatrixXd& z) {
  if (s.rows() != actor.state_dim || z.rows() != actor.latent_dim) {
    throw UsageError(fmt::format("actor expects state dim {} and latent dim {}", actor.state_dim, actor.latent_dim));
  }
  PolicyHeads heads;
  heads.cache = actor.net.forward(stack_rows({&s, &z}));
  const auto& out = heads.cache.output();
  heads.mean = out.topRows(actor.action_dim);
  const Eigen::MatrixXd raw = out.bottomRows(actor.action_dim);
  heads.clamped = (raw.array() < kLogStdMin) || (raw.array() > kLogStdMax);
  heads.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return heads;
}

Eigen::MatrixXd gaussian_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd noise(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) noise(r, c) = rng.normal();
  }
  return noise;
}

Eigen::VectorXd act(const Actor& actor, const Eigen::VectorXd& s, const Eigen::VectorXd& z, ActMode mode, Rng& rng) {
  const auto heads = policy_forward(actor, Eigen::MatrixXd(s), Eigen::MatrixXd(z));
  Eigen::VectorXd a = heads.mean.col(0);
  if (mode == ActMode::Stochastic) {
    const Eigen::VectorXd std = heads.log_std.col(0).array().exp();
    for (Eigen::Index d = 0; d < a.size(); ++d) a[d] += std[d] * rng.normal();
  }
  return clip_action(a);
}

double critic_loss(const Critic& critic, const Actor& actor, const AgentBatch& batch, const AgentConfig& cfg,
                   const Eigen::MatrixXd& next_noise, MlpGrad* grad) {
  check_batch(batch);
  const auto b = batch.size();
  const auto next = policy_forward(actor, batch.s_next, batch.z);
  if (next_noise.rows() != next.mean.rows() || next_noise.cols() != b) throw UsageError("critic_loss: noise shape");
  const Eigen::MatrixXd a_next =
      (next.mean.array() + next.log_std.array().exp() * next_noise.array()).cwiseMax(-1.0).cwiseMin(1.0).matrix();
  const Eigen::RowVectorXd q_next = critic.target.predict(stack_rows({&batch.s_next, &a_next, &batch.z})).row(0);
  const Eigen::RowVectorXd target = batch.r / cfg.reward_scale + cfg.gamma * q_next;

  const auto cache = critic.q.forward(stack_rows({&batch.s, &batch.a, &batch.z}));
  const Eigen::RowVectorXd err = cache.output().row(0) - target;
  const double loss = err.squaredNorm() / static_cast<double>(b);
  if (grad != nullptr) *grad = critic.q.backward(cache, 2.0 * err / static_cast<double>(b));
  return loss;
}

double critic_loss(const Critic& critic, const Actor& actor, const AgentBatch& batch, const AgentConfig& cfg,
                   Rng& rng, MlpGrad* grad) {
  return critic_loss(critic, actor, batch, cfg, gaussian_noise(actor.action_dim, batch.size(), rng), grad);
}

ActorLossParts actor_loss(const Actor& actor, const Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                          const Eigen::MatrixXd& noise, MlpGrad* grad) {
  check_batch(batch);
  const auto b = batch.size();
  const double inv_b = 1.0 / static_cast<double>(b);
  const auto heads = policy_forward(actor, batch.s, batch.z);
  if (noise.rows() != heads.mean.rows() || noise.cols() != b) throw UsageError("actor_loss: noise shape");
  const Eigen::ArrayXXd std = heads.log_std.array().exp();
  const Eigen::ArrayXXd a_raw = heads.mean.array() + std * noise.array();
  // Clipped like every executed action; Q is never fitted outside the box.
  const Eigen::MatrixXd a_new = a_raw.cwiseMax(-1.0).cwiseMin(1.0).matrix();
  const Eigen::ArrayXXd inside = (a_raw.abs() <= 1.0).cast<double>();

  const auto q_cache = critic.q.forward(stack_rows({&batch.s, &a_new, &batch.z}));
  ActorLossParts parts;
  parts.q_term = q_cache.output().row(0).mean();

  // KL(N(mu, sigma^2) || N(m_b, s_b^2)) per action dimension, summed.
  const Eigen::ArrayXXd log_sb = batch.behavior_std.array().log().replicate(heads.mean.rows(), 1);
  const Eigen::ArrayXXd var_b = batch.behavior_std.array().square().replicate(heads.mean.rows(), 1);
  const Eigen::ArrayXXd diff = heads.mean.array() - batch.behavior_mean.array();
  const Eigen::ArrayXXd var_p = std.square();
  const Eigen::ArrayXXd kl = (log_sb - heads.log_std.array()) + (var_p + diff.square()) / (2.0 * var_b) - 0.5;
  parts.kl_term = kl.colwise().sum().mean();
  parts.total = -parts.q_term + cfg.alpha * parts.kl_term;

  if (grad != nullptr) {
    const Eigen::MatrixXd dq_din =
        critic.q.backward_input(q_cache, Eigen::RowVectorXd::Constant(b, -inv_b));
    const Eigen::ArrayXXd d_action = dq_din.middleRows(actor.state_dim, actor.action_dim).array() * inside;
    Eigen::ArrayXXd d_mean = d_action + cfg.alpha * inv_b * diff / var_b;
    Eigen::ArrayXXd d_log_std = d_action * std * noise.array() + cfg.alpha * inv_b * (var_p / var_b - 1.0);
    d_log_std = heads.clamped.select(Eigen::ArrayXXd::Zero(d_log_std.rows(), d_log_std.cols()), d_log_std);
    Eigen::MatrixXd d_out(2 * actor.action_dim, b);
    d_out.topRows(actor.action_dim) = d_mean.matrix();
    d_out.bottomRows(actor.action_dim) = d_log_std.matrix();
    *grad = actor.net.backward(heads.cache, d_out);
  }
  return parts;
}

ActorLossParts actor_loss(const Actor& actor, const Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                          Rng& rng, MlpGrad* grad) {
  return actor_loss(actor, critic, batch, cfg, gaussian_noise(actor.action_dim, batch.size(), rng), grad);
}

void polyak_update(Critic& critic, double tau) { polyak_blend(critic.target, critic.q, tau); }

AgentLossReport agent_update(Actor& actor, Critic& critic, const AgentBatch& batch, const AgentConfig& cfg,
                             AgentOptimizers& opt, Rng& rng) {
  AgentLossReport report;
  MlpGrad critic_grad;
  report.critic = critic_loss(critic, actor, batch, cfg, rng, &critic_grad);
  if (!std::isfinite(report.critic)) {
    throw TrainingError(fmt::format("non-finite critic loss at critic step {}", opt.critic.state.step_count + 1));
  }
  adam_step(critic.q, critic_grad, opt.critic.state, opt.critic.lr);

  MlpGrad actor_grad;
  report.actor = actor_loss(actor, critic, batch, cfg, rng, &actor_grad).total;
  if (!std::isfinite(report.actor)) {
    throw TrainingError(fmt::format("non-finite actor loss at actor step {}", opt.actor.state.step_count + 1));
  }
  adam_step(actor.net, actor_grad, opt.actor.state, opt.actor.lr);
  polyak_update(critic, cfg.tau);
  return report;
}

}  // namespace shiftlab
