#include "shiftlab/trainer.hpp"

#include <cmath>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/metatest.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace {

constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamSampling = 2;
constexpr std::uint64_t kStreamAgent = 3;
constexpr std::uint64_t kStreamEval = 4;

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(idx[i]);
  return out;
}

Eigen::RowVectorXd gather(const Eigen::RowVectorXd& m, const std::vector<int>& idx) {
  Eigen::RowVectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = m(idx[i]);
  return out;
}

const std::string& require_meta(const Checkpoint& ckpt, const std::string& key) {
  if (ckpt.metadata().count(key) == 0u) throw DataError(fmt::format("checkpoint: missing metadata '{}'", key));
  return ckpt.meta(key);
}

double meta_double(const Checkpoint& ckpt, const std::string& key) {
  return textio::parse_double(require_meta(ckpt, key));
}

}  // namespace

Checkpoint TrainedModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.set_meta("family", std::string(to_string(family)));
  ckpt.set_meta("method", std::string(to_string(method)));
  ckpt.set_meta("seed", std::to_string(seed));
  ckpt.set_meta("step", std::to_string(step));
  ckpt.set_meta("latent_dim", std::to_string(encoder.latent_dim));
  ckpt.set_meta("encoder_reward_divisor", textio::format_double(encoder.reward_divisor));
  ckpt.set_meta("gamma", textio::format_double(agent.gamma));
  ckpt.set_meta("alpha", textio::format_double(agent.alpha));
  ckpt.set_meta("tau", textio::format_double(agent.tau));
  ckpt.set_meta("reward_scale", textio::format_double(agent.reward_scale));
  ckpt.set_meta("batch_size", std::to_string(agent.batch_size));
  ckpt.set_meta("meta_batch", std::to_string(agent.meta_batch));
  ckpt.add_mlp("encoder", encoder.net);
  ckpt.add_mlp("club.mean", club.mean_net);
  ckpt.add_mlp("club.logstd", club.log_std_net);
  ckpt.add_mlp("actor", actor.net);
  ckpt.add_mlp("critic", critic.q);
  ckpt.add_mlp("critic_target", critic.target);
  return ckpt;
}

TrainedModel TrainedModel::from_checkpoint(const Checkpoint& ckpt) {
  TrainedModel m;
  try {
    m.family = parse_family(require_meta(ckpt, "family"));
    m.method = parse_method(require_meta(ckpt, "method"));
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("checkpoint: {}", e.what()));
  }
  m.seed = static_cast<std::uint64_t>(textio::parse_int(require_meta(ckpt, "seed")));
  m.step = static_cast<int>(textio::parse_int(require_meta(ckpt, "step")));
  const auto& tr = traits(m.family);
  m.encoder.net = ckpt.mlp("encoder");
  m.encoder.family = m.family;
  m.encoder.latent_dim = static_cast<int>(textio::parse_int(require_meta(ckpt, "latent_dim")));
  m.encoder.reward_divisor = meta_double(ckpt, "encoder_reward_divisor");
  m.club.mean_net = ckpt.mlp("club.mean");
  m.club.log_std_net = ckpt.mlp("club.logstd");
  m.actor.net = ckpt.mlp("actor");
  m.actor.state_dim = tr.state_dim;
  m.actor.action_dim = tr.action_dim;
  m.actor.latent_dim = m.encoder.latent_dim;
  m.critic.q = ckpt.mlp("critic");
  m.critic.target = ckpt.mlp("critic_target");
  m.agent.gamma = meta_double(ckpt, "gamma");
  m.agent.alpha = meta_double(ckpt, "alpha");
  m.agent.tau = meta_double(ckpt, "tau");
  m.agent.reward_scale = meta_double(ckpt, "reward_scale");
  m.agent.batch_size = static_cast<int>(textio::parse_int(require_meta(ckpt, "batch_size")));
  m.agent.meta_batch = static_cast<int>(textio::parse_int(require_meta(ckpt, "meta_batch")));

  const int in_dim = ContextEncoder::input_dim(m.family);
  const int sa_dim = tr.state_dim + tr.action_dim;
  const int d = m.encoder.latent_dim;
  auto expect = [](bool ok, const char* what) {
    if (!ok) throw DataError(fmt::format("checkpoint: {} has the wrong shape", what));
  };
  expect(m.encoder.net.input_dim() == in_dim && m.encoder.net.output_dim() == d, "encoder");
  expect(m.club.mean_net.input_dim() == sa_dim && m.club.mean_net.output_dim() == d, "club.mean");
  expect(same_architecture(m.club.mean_net, m.club.log_std_net), "club.logstd");
  expect(m.actor.net.input_dim() == tr.state_dim + d && m.actor.net.output_dim() == 2 * tr.action_dim, "actor");
  expect(m.critic.q.input_dim() == sa_dim + d && m.critic.q.output_dim() == 1, "critic");
  expect(same_architecture(m.critic.q, m.critic.target), "critic_target");
  return m;
}

std::string TrainLogEntry::to_line() const {
  std::string line = fmt::format("step={} L_maxMI={}", step, textio::format_double(max_mi));
  if (min_mi) line += " L_minMI=" + textio::format_double(*min_mi);
  if (vd) line += " L_VD=" + textio::format_double(*vd);
  line += fmt::format(" L_encoder={} L_critic={} L_actor={} eval_return={}", textio::format_double(encoder),
                      textio::format_double(critic), textio::format_double(actor), textio::format_double(eval_return));
  return line;
}

MetaTrainer::MetaTrainer(const RunConfig& cfg, std::vector<Dataset> train_sets, std::uint64_t seed)
    : cfg_(cfg), train_(std::move(train_sets)), rng_(derive_seed(seed, kStreamSampling)),
      agent_rng_(derive_seed(seed, kStreamAgent)) {
  cfg_.validate();
  if (train_.size() < 2) throw UsageError("meta-training needs at least two training tasks");
  for (const auto& d : train_) {
    if (d.task.family != cfg_.family) throw UsageError("dataset family differs from the configured family");
    if (d.transitions.empty()) throw DataError(fmt::format("dataset for task {} is empty", d.task.task_id));
  }
  const auto& tr = traits(cfg_.family);
  Rng init(derive_seed(seed, kStreamInit));
  model_.family = cfg_.family;
  model_.method = cfg_.method;
  model_.seed = seed;
  model_.agent = cfg_.agent_config();
  model_.encoder = ContextEncoder::create(cfg_.family, cfg_.latent_dim, {cfg_.encoder_hidden, cfg_.encoder_hidden},
                                          cfg_.encoder_reward_divisor, init);
  model_.club = ClubEstimator::create(tr.state_dim + tr.action_dim, cfg_.latent_dim,
                                      {cfg_.encoder_hidden, cfg_.encoder_hidden}, init);
  model_.actor = Actor::create(tr.state_dim, cfg_.latent_dim, tr.action_dim, {cfg_.hidden, cfg_.hidden}, init);
  model_.critic = Critic::create(tr.state_dim, cfg_.latent_dim, tr.action_dim, {cfg_.hidden, cfg_.hidden}, init);

  enc_cfg_.metric = cfg_.metric_config();
  enc_cfg_.use_club = cfg_.uses_club();
  enc_cfg_.club_steps = cfg_.club_steps;
  enc_cfg_.negatives = cfg_.club_negatives;
  enc_opt_.encoder = Optimizer{AdamState(model_.encoder.net), cfg_.lr_encoder};
  enc_opt_.club.mean = Optimizer{AdamState(model_.club.mean_net), cfg_.lr_club};
  enc_opt_.club.log_std = Optimizer{AdamState(model_.club.log_std_net), cfg_.lr_club};
  agent_opt_.actor = Optimizer{AdamState(model_.actor.net), cfg_.lr_actor};
  agent_opt_.critic = Optimizer{AdamState(model_.critic.q), cfg_.lr_critic};

  data_.reserve(train_.size());
  for (const auto& d : train_) {
    TaskData td;
    td.enc_in = encoder_inputs(model_.encoder, d.transitions);
    td.sa = state_action_inputs(d.transitions);
    td.all = make_agent_batch(d.transitions, Eigen::VectorXd::Zero(cfg_.latent_dim));
    data_.push_back(std::move(td));
  }
}

std::vector<int> MetaTrainer::sample_tasks_for_step() {
  const int n = static_cast<int>(train_.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::vector<int> out;
  const int k = cfg_.meta_batch;
  // Without replacement when possible; a larger meta-batch cycles through fresh permutations.
  while (static_cast<int>(out.size()) < k) {
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<int>(rng_.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < n && static_cast<int>(out.size()) < k; ++i) out.push_back(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<int> MetaTrainer::sample_indices(int n, int count) {
  std::vector<int> idx(static_cast<std::size_t>(count));
  for (auto& i : idx) i = static_cast<int>(rng_.below(static_cast<std::uint64_t>(n)));
  return idx;
}

TrainLogEntry MetaTrainer::step() {
  const auto tasks = sample_tasks_for_step();
  const int k = static_cast<int>(tasks.size());
  const int c = cfg_.embedding_batch;
  const auto& tr = traits(cfg_.family);

  ContextBatch batch;
  batch.context_size = c;
  batch.encoder_input.resize(ContextEncoder::input_dim(cfg_.family), 2 * k * c);
  batch.state_action.resize(tr.state_dim + tr.action_dim, 2 * k * c);
  for (int t = 0; t < k; ++t) {
    const auto& td = data_[static_cast<std::size_t>(tasks[static_cast<std::size_t>(t)])];
    const int n = static_cast<int>(td.enc_in.cols());
    for (int rep = 0; rep < 2; ++rep) {
      const auto idx = sample_indices(n, c);
      const int col = (2 * t + rep) * c;
      batch.encoder_input.middleCols(col, c) = gather(td.enc_in, idx);
      batch.state_action.middleCols(col, c) = gather(td.sa, idx);
      batch.labels.push_back(train_[static_cast<std::size_t>(tasks[static_cast<std::size_t>(t)])].task.task_id);
    }
  }

  TrainLogEntry entry;
  entry.step = step_;
  const auto enc = encoder_update(model_.encoder, model_.club, batch, enc_cfg_, enc_opt_);
  entry.max_mi = enc.max_mi;
  entry.min_mi = enc.min_mi;
  entry.vd = enc.vd;
  entry.encoder = enc.total;
  if (!std::isfinite(enc.total)) throw TrainingError(fmt::format("step {}: non-finite encoder loss", step_));

  const int b = cfg_.batch_size;
  AgentBatch agent;
  agent.s.resize(tr.state_dim, k * b);
  agent.a.resize(tr.action_dim, k * b);
  agent.r.resize(k * b);
  agent.s_next.resize(tr.state_dim, k * b);
  agent.z.resize(cfg_.latent_dim, k * b);
  agent.behavior_mean.resize(tr.action_dim, k * b);
  agent.behavior_std.resize(k * b);
  for (int t = 0; t < k; ++t) {
    const auto& all = data_[static_cast<std::size_t>(tasks[static_cast<std::size_t>(t)])].all;
    const auto idx = sample_indices(static_cast<int>(all.size()), b);
    const int col = t * b;
    agent.s.middleCols(col, b) = gather(all.s, idx);
    agent.a.middleCols(col, b) = gather(all.a, idx);
    agent.r.segment(col, b) = gather(all.r, idx);
    agent.s_next.middleCols(col, b) = gather(all.s_next, idx);
    agent.behavior_mean.middleCols(col, b) = gather(all.behavior_mean, idx);
    agent.behavior_std.segment(col, b) = gather(all.behavior_std, idx);
    agent.z.middleCols(col, b) = enc.context_means.col(2 * t).replicate(1, b);
  }
  try {
    const auto rep = agent_update(model_.actor, model_.critic, agent, model_.agent, agent_opt_, agent_rng_);
    entry.critic = rep.critic;
    entry.actor = rep.actor;
  } catch (const TrainingError& e) {
    throw TrainingError(fmt::format("step {}: {}", step_, e.what()));
  }
  ++step_;
  model_.step = step_;
  return entry;
}

double MetaTrainer::quick_eval() const {
  const auto policy = as_policy(model_.actor);
  double total = 0.0;
  const int n = std::min<int>(2, static_cast<int>(train_.size()));
  for (int i = 0; i < n; ++i) {
    const auto& d = train_[static_cast<std::size_t>(i)];
    const int n_c = std::min<int>(cfg_.n_c, static_cast<int>(d.transitions.size()));
    const auto ctx = sample_offline_context(d, n_c, derive_seed(model_.seed, kStreamEval + 16u * static_cast<std::uint64_t>(i)));
    total += evaluate(d.task, policy, model_.encoder, ctx, 1, derive_seed(model_.seed, kStreamEval));
  }
  return total / n;
}

TrainResult meta_train(const RunConfig& cfg, const std::vector<Dataset>& train_sets, std::uint64_t seed,
                       const std::function<void(const TrainLogEntry&)>& on_log) {
  MetaTrainer trainer(cfg, train_sets, seed);
  TrainResult result;
  bool have_best = false;
  for (int s = 0; s < cfg.training_steps; ++s) {
    auto entry = trainer.step();
    const bool last = s + 1 == cfg.training_steps;
    if (s % cfg.log_interval == 0 || last) {
      entry.eval_return = trainer.quick_eval();
      if (!have_best || entry.eval_return > result.best_eval) {
        result.best_eval = entry.eval_return;
        result.best_model = trainer.model();
        have_best = true;
      }
      result.log.push_back(entry);
      if (on_log) on_log(entry);
    }
  }
  result.final_model = trainer.model();
  return result;
}

}  // namespace shiftlab
