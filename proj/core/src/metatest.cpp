#include "shiftlab/metatest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace {

// Independent RNG streams inside one exploration call.
constexpr std::uint64_t kStreamRandomPrefix = 0x52414e44;  // "RAND"
constexpr std::uint64_t kStreamPolicy = 0x504f4c49;        // "POLI"
constexpr std::uint64_t kStreamPrior = 0x50524952;         // "PRIR"

Transition record(const TaskSpec& task, const EnvState& state, const Eigen::VectorXd& action, StepResult& result) {
  result = step(task, state, action);
  Transition t;
  t.s = state.x;
  t.a = clip_action(action);
  t.r = result.reward;
  t.s_next = result.state.x;
  t.task_id = task.task_id;
  t.behavior_mean = Eigen::VectorXd::Zero(action.size());
  t.behavior_std = 1.0;
  return t;
}

void roll_episode(const TaskSpec& task, const LatentPolicy& policy, const Eigen::VectorXd& z, Rng& rng,
                  Context& out) {
  EnvState state = reset(task);
  bool done = false;
  while (!done) {
    StepResult result;
    out.transitions.push_back(record(task, state, policy(state.x, z, ActMode::Stochastic, rng), result));
    state = result.state;
    done = result.done;
  }
}

}  // namespace

EvalConfig EvalConfig::for_family(Family family) {
  const int horizon = traits(family).horizon;
  EvalConfig cfg;
  cfg.random_steps = horizon / 4;
  cfg.collect_steps = horizon;
  return cfg;
}

void EvalConfig::validate() const {
  if (context_size < 1) throw ConfigError("N_c must be positive");
  if (collect_steps < 1) throw ConfigError("T must be positive");
  if (random_steps < 0 || random_steps > collect_steps) throw ConfigError("t_r must lie in [0, T]");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be positive");
}

LatentPolicy as_policy(const Actor& actor) {
  return [&actor](const Eigen::VectorXd& s, const Eigen::VectorXd& z, ActMode mode, Rng& rng) {
    return act(actor, s, z, mode, rng);
  };
}

Context sample_offline_context(const Dataset& dataset, int n_c, std::uint64_t seed) {
  const auto n = dataset.transitions.size();
  if (n_c < 1 || static_cast<std::size_t>(n_c) > n) {
    throw UsageError(fmt::format("N_c = {} but the dataset holds {} transitions", n_c, n));
  }
  // Partial Fisher-Yates over the index range.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  Context ctx;
  ctx.source = ContextSource::Offline;
  ctx.transitions.reserve(static_cast<std::size_t>(n_c));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_c); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    ctx.transitions.push_back(dataset.transitions[idx[i]]);
  }
  return ctx;
}

Context explore_prior(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                      const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng prior_rng(derive_seed(seed, kStreamPrior));
  Rng policy_rng(derive_seed(seed, kStreamPolicy));
  Context ctx;
  ctx.source = ContextSource::OnlinePrior;
  Eigen::VectorXd z0(enc.latent_dim);
  for (Eigen::Index d = 0; d < z0.size(); ++d) z0[d] = prior_rng.normal();
  ctx.prior_draws = 1;
  roll_episode(task, policy, z0, policy_rng, ctx);
  const Eigen::VectorXd z = encode_context(enc, ctx);
  roll_episode(task, policy, z, policy_rng, ctx);
  return ctx;
}

Context explore_nonprior(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                         const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.random_steps < 1) {
    throw UsageError("non-prior exploration needs t_r >= 1: the posterior of an empty context is undefined");
  }
  const auto& tr = traits(task.family);
  Rng random_rng(derive_seed(seed, kStreamRandomPrefix));
  Rng policy_rng(derive_seed(seed, kStreamPolicy));
  Context ctx;
  ctx.source = ContextSource::OnlineNonprior;
  ctx.transitions.reserve(static_cast<std::size_t>(cfg.collect_steps));
  Eigen::VectorXd embedding_sum = Eigen::VectorXd::Zero(enc.latent_dim);
  EnvState state = reset(task);
  for (int t = 0; t < cfg.collect_steps; ++t) {
    if (state.step_index >= tr.horizon) state = reset(task);
    Eigen::VectorXd action(tr.action_dim);
    if (t < cfg.random_steps) {
      for (Eigen::Index d = 0; d < action.size(); ++d) action[d] = random_rng.uniform(-1.0, 1.0);
    } else {
      const Eigen::VectorXd z = embedding_sum / static_cast<double>(ctx.transitions.size());
      action = policy(state.x, z, ActMode::Stochastic, policy_rng);
    }
    StepResult result;
    ctx.transitions.push_back(record(task, state, action, result));
    embedding_sum += encode_transition(enc, ctx.transitions.back());
    state = result.state;
  }
  return ctx;
}

double rollout_return(const TaskSpec& task, const LatentPolicy& policy, const Eigen::VectorXd& z, ActMode mode,
                      Rng& rng) {
  EnvState state = reset(task);
  double total = 0.0;
  bool done = false;
  while (!done) {
    const auto result = step(task, state, policy(state.x, z, mode, rng));
    total += result.reward;
    state = result.state;
    done = result.done;
  }
  return total;
}

double evaluate(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc, const Context& context,
                int eval_episodes, std::uint64_t seed) {
  if (context.empty()) throw UsageError("evaluate needs a non-empty context");
  if (eval_episodes < 1) throw UsageError("eval_episodes must be positive");
  const Eigen::VectorXd z = encode_context(enc, context);
  Rng rng(seed);
  double total = 0.0;
  for (int ep = 0; ep < eval_episodes; ++ep) total += rollout_return(task, policy, z, ActMode::Deterministic, rng);
  return total / eval_episodes;
}

ShiftReport context_shift_gap(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                              const Dataset& dataset, const EvalConfig& cfg, std::uint64_t seed) {
  ShiftReport report;
  const auto offline = sample_offline_context(dataset, cfg.context_size, derive_seed(seed, 11));
  const auto prior = explore_prior(task, policy, enc, cfg, derive_seed(seed, 12));
  const auto nonprior = explore_nonprior(task, policy, enc, cfg, derive_seed(seed, 13));
  report.j_offline = evaluate(task, policy, enc, offline, cfg.eval_episodes, seed);
  report.j_prior = evaluate(task, policy, enc, prior, cfg.eval_episodes, seed);
  report.j_nonprior = evaluate(task, policy, enc, nonprior, cfg.eval_episodes, seed);
  return report;
}

TransitionEmbedder as_embedder(const ContextEncoder& enc) {
  return [&enc](std::span<const Transition> ts) { return enc.net.predict(encoder_inputs(enc, ts)); };
}

double probe_policy_info(const std::vector<Dataset>& datasets, const TransitionEmbedder& embed, std::uint64_t seed,
                         const ProbeConfig& cfg) {
  constexpr int kClasses = kNumCheckpoints;
  std::vector<Transition> pool;
  for (const auto& ds : datasets) pool.insert(pool.end(), ds.transitions.begin(), ds.transitions.end());
  std::set<int> classes;
  for (const auto& t : pool) classes.insert(t.checkpoint_index);
  if (classes.size() < 2) throw UsageError("probe needs at least two checkpoint classes");

  const Eigen::MatrixXd features = embed(pool);
  // Stratified split: every class contributes the same train fraction, so a
  // classifier that ignores its input scores exactly the class share.
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(kClasses);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[static_cast<std::size_t>(pool[i].checkpoint_index)].push_back(i);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& members : by_class) {
    const std::size_t m = members.size();
    if (m == 0) continue;
    for (std::size_t i = m; i > 1; --i) std::swap(members[i - 1], members[static_cast<std::size_t>(rng.below(i))]);
    const auto k = m < 2 ? m : std::clamp<std::size_t>(static_cast<std::size_t>(cfg.train_fraction * static_cast<double>(m)), 1, m - 1);
    train_idx.insert(train_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    test_idx.insert(test_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
  }

  auto gather = [&](const std::vector<std::size_t>& idx, Eigen::MatrixXd& x, std::vector<int>& y) {
    x.resize(features.rows(), static_cast<Eigen::Index>(idx.size()));
    y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.col(static_cast<Eigen::Index>(i)) = features.col(static_cast<Eigen::Index>(idx[i]));
      y[i] = pool[idx[i]].checkpoint_index;
    }
  };
  Eigen::MatrixXd x_train, x_test;
  std::vector<int> y_train, y_test;
  gather(train_idx, x_train, y_train);
  gather(test_idx, x_test, y_test);

  // Standardise with training statistics; constant features stay at zero.
  const Eigen::VectorXd mu = x_train.rowwise().mean();
  Eigen::VectorXd sd = ((x_train.colwise() - mu).array().square().rowwise().mean()).sqrt();
  for (Eigen::Index d = 0; d < sd.size(); ++d) {
    if (sd[d] < 1e-12) sd[d] = 1.0;
  }
  auto standardise = [&](Eigen::MatrixXd& x) { x = (x.colwise() - mu).array().colwise() / sd.array(); };
  standardise(x_train);
  standardise(x_test);

  Mlp clf = Mlp::glorot({static_cast<int>(features.rows()), cfg.hidden, kClasses}, rng);
  auto opt = AdamState(clf);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(kClasses, x_train.cols());
  for (std::size_t i = 0; i < y_train.size(); ++i) onehot(y_train[i], static_cast<Eigen::Index>(i)) = 1.0;
  const double inv_n = 1.0 / static_cast<double>(x_train.cols());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto cache = clf.forward(x_train);
    Eigen::MatrixXd logits = cache.output();
    logits.rowwise() -= logits.colwise().maxCoeff();
    Eigen::MatrixXd p = logits.array().exp();
    p.array().rowwise() /= p.colwise().sum().array();
    adam_step(clf, clf.backward(cache, (p - onehot) * inv_n), opt, cfg.lr);
  }
  const Eigen::MatrixXd logits = clf.predict(x_test);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Eigen::Index best = 0;
    logits.col(i).maxCoeff(&best);
    if (static_cast<int>(best) == y_test[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(y_test.size());
}

Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, int k, Eigen::VectorXd* variances) {
  if (x.rows() < 1 || k < 1) throw UsageError("pca_project: empty input");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const auto d = cov.rows();
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(d, k);
  Eigen::VectorXd var = Eigen::VectorXd::Zero(k);
  for (int c = 0; c < k && c < d; ++c) {
    // Eigenvalues come back ascending.
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    axes.col(c) = v;
    var[c] = std::max(0.0, solver.eigenvalues()[d - 1 - c]);
  }
  if (variances != nullptr) *variances = var;
  return centered * axes;
}

double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  const auto n = x.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw UsageError("silhouette: one label per row required");
  const std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw UsageError("silhouette needs at least two labels");
  std::map<int, std::size_t> cluster_size;
  for (int l : labels) ++cluster_size[l];
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::map<int, double> dist_sum;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      dist_sum[labels[static_cast<std::size_t>(j)]] += (x.row(i) - x.row(j)).norm();
    }
    const int own = labels[static_cast<std::size_t>(i)];
    if (cluster_size[own] < 2) continue;
    const double a = dist_sum[own] / static_cast<double>(cluster_size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, size] : cluster_size) {
      if (label != own) b = std::min(b, dist_sum[label] / static_cast<double>(size));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

EmbeddingReport embed_and_project(const ContextEncoder& enc, const std::vector<LabeledContext>& contexts,
                                  const std::optional<std::filesystem::path>& out) {
  std::set<int> distinct;
  for (const auto& c : contexts) distinct.insert(c.task_id);
  if (distinct.size() < 2) throw UsageError("embedding export needs contexts from at least two tasks");
  EmbeddingReport report;
  report.embeddings.resize(static_cast<Eigen::Index>(contexts.size()), enc.latent_dim);
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    report.task_ids.push_back(contexts[i].task_id);
    report.labels.push_back(contexts[i].label);
    report.embeddings.row(static_cast<Eigen::Index>(i)) = encode_context(enc, contexts[i].context).transpose();
  }
  report.projection = pca_project(report.embeddings, 2, &report.component_variance);
  report.silhouette = silhouette_score(report.embeddings, report.task_ids);
  if (out) textio::write_file(*out, serialize_embedding(report));
  return report;
}

std::string serialize_embedding(const EmbeddingReport& r) {
  std::string text = "task_id label";
  for (Eigen::Index d = 0; d < r.embeddings.cols(); ++d) text += fmt::format(" z{}", d);
  text += " pc1 pc2\n";
  for (Eigen::Index i = 0; i < r.embeddings.rows(); ++i) {
    text += fmt::format("{} {}", r.task_ids[static_cast<std::size_t>(i)],
                        textio::format_double(r.labels[static_cast<std::size_t>(i)]));
    for (Eigen::Index d = 0; d < r.embeddings.cols(); ++d) text += " " + textio::format_double(r.embeddings(i, d));
    text += " " + textio::format_double(r.projection(i, 0)) + " " + textio::format_double(r.projection(i, 1)) + "\n";
  }
  return text;
}

std::string MetricsRecord::to_line() const {
  std::string line = fmt::format("method={} regime={} task_id={} seed={} avg_return={}", method, regime, task_id, seed,
                                 textio::format_double(avg_return));
  for (const auto& [k, v] : aux) line += fmt::format(" aux.{}={}", k, textio::format_double(v));
  return line;
}

MetricsRecord MetricsRecord::from_line(const std::string& line) {
  const auto rec = textio::parse_record(line);
  MetricsRecord m;
  try {
    m.method = rec.at("method");
    m.regime = rec.at("regime");
    m.task_id = static_cast<int>(textio::parse_int(rec.at("task_id")));
    m.seed = static_cast<std::uint64_t>(textio::parse_int(rec.at("seed")));
    m.avg_return = textio::parse_double(rec.at("avg_return"));
  } catch (const std::out_of_range&) {
    throw DataError("metrics record is missing a field");
  }
  for (const auto& [k, v] : rec) {
    if (k.rfind("aux.", 0) == 0) m.aux[k.substr(4)] = textio::parse_double(v);
  }
  if (!std::isfinite(m.avg_return)) throw DataError("metrics record has a non-finite return");
  return m;
}

}  // namespace shiftlab
