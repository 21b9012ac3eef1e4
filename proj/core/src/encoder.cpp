#include "shiftlab/encoder.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <vector>

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

}  // namespace

std::string_view to_string(ContextSource source) {
  switch (source) {
    case ContextSource::Offline: return "offline";
    case ContextSource::OnlinePrior: return "online_prior";
    case ContextSource::OnlineNonprior: return "online_nonprior";
  }
  return "?";
}

ContextSource parse_context_source(std::string_view name) {
  if (name == "offline") return ContextSource::Offline;
  if (name == "online_prior") return ContextSource::OnlinePrior;
  if (name == "online_nonprior") return ContextSource::OnlineNonprior;
  throw ConfigError(fmt::format("unknown regime '{}' (expected offline, online_prior or online_nonprior)", name));
}

int ContextEncoder::input_dim(Family family) {
  const auto& tr = traits(family);
  return 2 * tr.state_dim + tr.action_dim + 1;
}

ContextEncoder ContextEncoder::create(Family family, int latent_dim, const std::vector<int>& hidden,
                                      double reward_divisor, Rng& rng) {
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
  if (!(reward_divisor > 0.0)) throw ConfigError("reward divisor must be positive");
  ContextEncoder enc;
  enc.family = family;
  enc.latent_dim = latent_dim;
  enc.reward_divisor = reward_divisor;
  enc.net = Mlp::glorot(with_ends(input_dim(family), hidden, latent_dim), rng);
  return enc;
}

ClubEstimator ClubEstimator::create(int input_dim, int latent_dim, const std::vector<int>& hidden, Rng& rng) {
  ClubEstimator club;
  club.mean_net = Mlp::glorot(with_ends(input_dim, hidden, latent_dim), rng);
  club.log_std_net = Mlp::glorot(with_ends(input_dim, hidden, latent_dim), rng);
  return club;
}

void MetricLossConfig::validate() const {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (power < 2 || power % 2 != 0) throw ConfigError("metric power n must be an even positive integer");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(min_mi_weight >= 0.0)) throw ConfigError("min-MI weight lambda must be non-negative");
}

Eigen::MatrixXd encoder_inputs(const ContextEncoder& enc, std::span<const Transition> transitions) {
  const auto& tr = traits(enc.family);
  const int ns = tr.state_dim;
  const int na = tr.action_dim;
  Eigen::MatrixXd x(ContextEncoder::input_dim(enc.family), static_cast<Eigen::Index>(transitions.size()));
  for (std::size_t j = 0; j < transitions.size(); ++j) {
    const auto& t = transitions[j];
    if (t.s.size() != ns || t.a.size() != na || t.s_next.size() != ns) {
      throw UsageError(fmt::format("transition dimensions do not match family {}", to_string(enc.family)));
    }
    const auto c = static_cast<Eigen::Index>(j);
    x.col(c).segment(0, ns) = t.s;
    x.col(c).segment(ns, na) = t.a;
    x(ns + na, c) = t.r / enc.reward_divisor;
    x.col(c).segment(ns + na + 1, ns) = t.s_next;
  }
  return x;
}

Eigen::MatrixXd state_action_inputs(std::span<const Transition> transitions) {
  if (transitions.empty()) return {};
  const auto ns = transitions.front().s.size();
  const auto na = transitions.front().a.size();
  Eigen::MatrixXd x(ns + na, static_cast<Eigen::Index>(transitions.size()));
  for (std::size_t j = 0; j < transitions.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    x.col(c).head(ns) = transitions[j].s;
    x.col(c).tail(na) = transitions[j].a;
  }
  return x;
}

Eigen::VectorXd encode_transition(const ContextEncoder& enc, const Transition& t) {
  return enc.net.predict(encoder_inputs(enc, std::span<const Transition>(&t, 1))).col(0);
}

Eigen::VectorXd encode_context(const ContextEncoder& enc, std::span<const Transition> transitions) {
  if (transitions.empty()) throw UsageError("cannot encode an empty context");
  return enc.net.predict(encoder_inputs(enc, transitions)).rowwise().mean();
}

Eigen::VectorXd encode_context(const ContextEncoder& enc, const Context& context) {
  return encode_context(enc, std::span<const Transition>(context.transitions));
}

namespace {

struct PairTerm {
  double value;
  double coeff;  // d value / d delta = coeff * delta
};

PairTerm metric_pair(const Eigen::VectorXd& delta, bool same_task, const MetricLossConfig& cfg) {
  const double dist2 = delta.squaredNorm();
  if (same_task) return {dist2, 2.0};
  const double half = 0.5 * cfg.power;
  const double dist_n = std::pow(dist2, half);
  const double denom = dist_n + cfg.epsilon;
  const double d_dist_n = cfg.power * std::pow(dist2, half - 1.0);  // d(dist^n)/d(delta) = this * delta
  return {cfg.beta / denom, -cfg.beta * d_dist_n / (denom * denom)};
}

}  // namespace

double loss_max_mi(std::span<const EmbeddingPair> pairs, const MetricLossConfig& cfg) {
  if (pairs.empty()) throw UsageError("loss_max_mi needs at least one pair");
  double total = 0.0;
  for (const auto& p : pairs) {
    if (p.z_i.size() != p.z_j.size()) throw UsageError("loss_max_mi: embedding dimensions differ");
    total += metric_pair(p.z_i - p.z_j, p.y_i == p.y_j, cfg).value;
  }
  return total / static_cast<double>(pairs.size());
}

LossWithGrad loss_max_mi_all_pairs(const Eigen::MatrixXd& z, std::span<const int> labels,
                                   const MetricLossConfig& cfg) {
  const auto k = z.cols();
  if (k < 2 || static_cast<std::size_t>(k) != labels.size()) {
    throw UsageError("loss_max_mi_all_pairs needs >= 2 labelled embeddings");
  }
  LossWithGrad out;
  out.grad = Eigen::MatrixXd::Zero(z.rows(), k);
  const double pairs = 0.5 * static_cast<double>(k) * static_cast<double>(k - 1);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const Eigen::VectorXd delta = z.col(i) - z.col(j);
      const auto term = metric_pair(delta, labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)], cfg);
      out.value += term.value;
      out.grad.col(i) += term.coeff * delta;
      out.grad.col(j) -= term.coeff * delta;
    }
  }
  out.value /= pairs;
  out.grad /= pairs;
  return out;
}

ClubOutputs club_forward(const ClubEstimator& club, const Eigen::MatrixXd& x) {
  ClubOutputs out;
  out.mean_cache = club.mean_net.forward(x);
  out.log_std_cache = club.log_std_net.forward(x);
  out.mean = out.mean_cache.output();
  const auto& raw = out.log_std_cache.output();
  out.clamped = (raw.array() < kLogStdMin) || (raw.array() > kLogStdMax);
  out.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return out;
}

double loss_vd(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z, ClubGrad* grad) {
  if (x.cols() != z.cols() || x.cols() == 0) throw UsageError("loss_vd: batch sizes disagree or are empty");
  if (z.rows() != club.latent_dim()) throw UsageError("loss_vd: latent dimension mismatch");
  const auto heads = club_forward(club, x);
  const double b = static_cast<double>(x.cols());
  const Eigen::ArrayXXd inv_std = (-heads.log_std.array()).exp();
  const Eigen::ArrayXXd resid = (z - heads.mean).array() * inv_std;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double nll = (half_log_2pi + heads.log_std.array() + 0.5 * resid.square()).sum() / b;
  if (grad != nullptr) {
    const Eigen::MatrixXd d_mean = (-(resid * inv_std) / b).matrix();
    Eigen::MatrixXd d_log_std = ((1.0 - resid.square()) / b).matrix();
    d_log_std = heads.clamped.select(Eigen::MatrixXd::Zero(d_log_std.rows(), d_log_std.cols()), d_log_std);
    grad->mean_net = club.mean_net.backward(heads.mean_cache, d_mean);
    grad->log_std_net = club.log_std_net.backward(heads.log_std_cache, d_log_std);
  }
  return nll;
}

LossWithGrad loss_min_mi(const ClubOutputs& heads, const Eigen::MatrixXd& z) {
  const auto b_count = z.cols();
  if (b_count < 2) throw UsageError("loss_min_mi needs a batch of at least two (negative samples)");
  if (heads.mean.cols() != b_count || heads.mean.rows() != z.rows()) {
    throw UsageError("loss_min_mi: estimator outputs and embeddings disagree in shape");
  }
  const double b = static_cast<double>(b_count);
  const Eigen::ArrayXXd w = (-2.0 * heads.log_std.array()).exp();  // 1 / sigma^2
  const Eigen::ArrayXXd mu = heads.mean.array();
  const Eigen::ArrayXd z_bar = z.rowwise().mean().array();
  const Eigen::ArrayXd spread = (z.colwise() - z_bar.matrix()).array().square().rowwise().sum();

  // Positive term: -(1/2B) sum_i sum_d w_id (z_id - mu_id)^2.
  const Eigen::ArrayXXd resid = z.array() - mu;
  const double positive = -0.5 * (w * resid.square()).sum() / b;
  // Negative term: (1/2B^2) sum_i sum_d w_id [spread_d + B (z_bar_d - mu_id)^2].
  const Eigen::ArrayXXd offset = (-mu).colwise() + z_bar;
  const double negative = 0.5 * ((w.colwise() * spread) + b * w * offset.square()).sum() / (b * b);

  LossWithGrad out;
  out.value = positive + negative;
  const Eigen::ArrayXd w_sum = w.rowwise().sum();
  const Eigen::ArrayXd wmu_sum = (w * mu).rowwise().sum();
  Eigen::ArrayXXd g = -(w * resid) / b;
  g += ((z.array().colwise() * w_sum).colwise() - wmu_sum) / (b * b);
  out.grad = g.matrix();
  return out;
}

LossWithGrad loss_min_mi(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z) {
  if (x.cols() != z.cols()) throw UsageError("loss_min_mi: batch sizes disagree");
  return loss_min_mi(club_forward(club, x), z);
}

std::string_view to_string(ClubNegatives negatives) {
  return negatives == ClubNegatives::Batch ? "batch" : "task";
}

ClubNegatives parse_club_negatives(std::string_view name) {
  if (name == "batch") return ClubNegatives::Batch;
  if (name == "task") return ClubNegatives::SameTask;
  throw ConfigError(fmt::format("unknown CLUB negative scheme '{}' (expected batch or task)", name));
}

LossWithGrad loss_min_mi_by_task(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                 std::span<const int> column_labels) {
  const auto n = z.cols();
  if (x.cols() != n || static_cast<Eigen::Index>(column_labels.size()) != n) {
    throw UsageError("loss_min_mi_by_task: batch sizes disagree");
  }
  std::map<int, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < n; ++i) groups[column_labels[static_cast<std::size_t>(i)]].push_back(i);
  LossWithGrad out;
  out.grad = Eigen::MatrixXd::Zero(z.rows(), n);
  for (const auto& [label, cols] : groups) {
    const auto m = static_cast<Eigen::Index>(cols.size());
    Eigen::MatrixXd xg(x.rows(), m), zg(z.rows(), m);
    for (Eigen::Index j = 0; j < m; ++j) {
      xg.col(j) = x.col(cols[static_cast<std::size_t>(j)]);
      zg.col(j) = z.col(cols[static_cast<std::size_t>(j)]);
    }
    const auto part = loss_min_mi(club, xg, zg);
    const double weight = static_cast<double>(m) / static_cast<double>(n);
    out.value += weight * part.value;
    for (Eigen::Index j = 0; j < m; ++j) out.grad.col(cols[static_cast<std::size_t>(j)]) = weight * part.grad.col(j);
  }
  return out;
}

double club_mi_estimate(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z) {
  return loss_min_mi(club, x, z).value;
}

double fit_club(ClubEstimator& club, ClubOptimizers& opt, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                int steps, int batch_size, Rng& rng) {
  const auto n = x.cols();
  if (n == 0 || z.cols() != n) throw UsageError("fit_club: empty or mismatched samples");
  const auto bs = std::min<Eigen::Index>(batch_size, n);
  Eigen::MatrixXd xb(x.rows(), bs);
  Eigen::MatrixXd zb(z.rows(), bs);
  for (int step = 0; step < steps; ++step) {
    for (Eigen::Index c = 0; c < bs; ++c) {
      const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      xb.col(c) = x.col(idx);
      zb.col(c) = z.col(idx);
    }
    ClubGrad g;
    loss_vd(club, xb, zb, &g);
    adam_step(club.mean_net, g.mean_net, opt.mean.state, opt.mean.lr);
    adam_step(club.log_std_net, g.log_std_net, opt.log_std.state, opt.log_std.lr);
  }
  return loss_vd(club, x, z);
}

ContextBatch make_context_batch(const ContextEncoder& enc, const std::vector<std::vector<Transition>>& contexts,
                                const std::vector<int>& labels) {
  if (contexts.empty() || contexts.size() != labels.size()) {
    throw UsageError("make_context_batch: need one label per context");
  }
  ContextBatch batch;
  batch.context_size = static_cast<int>(contexts.front().size());
  if (batch.context_size == 0) throw UsageError("make_context_batch: empty context");
  std::vector<Transition> flat;
  flat.reserve(contexts.size() * contexts.front().size());
  for (const auto& c : contexts) {
    if (static_cast<int>(c.size()) != batch.context_size) throw UsageError("make_context_batch: ragged contexts");
    flat.insert(flat.end(), c.begin(), c.end());
  }
  batch.encoder_input = encoder_inputs(enc, flat);
  batch.state_action = state_action_inputs(flat);
  batch.labels = labels;
  return batch;
}

namespace {

Eigen::MatrixXd context_means(const Eigen::MatrixXd& z, int context_size, int k) {
  Eigen::MatrixXd means(z.rows(), k);
  for (int c = 0; c < k; ++c) means.col(c) = z.middleCols(c * context_size, context_size).rowwise().mean();
  return means;
}

void require_two_tasks(const ContextBatch& batch) {
  const std::set<int> distinct(batch.labels.begin(), batch.labels.end());
  if (distinct.size() < 2) throw UsageError("encoder update needs at least two distinct tasks in the meta-batch");
}

}  // namespace

EncoderLossReport encoder_loss(const ContextEncoder& enc, const ClubEstimator& club, const ContextBatch& batch,
                               const EncoderUpdateConfig& cfg, MlpGrad* encoder_grad) {
  require_two_tasks(batch);
  const int k = batch.num_contexts();
  const auto cache = enc.net.forward(batch.encoder_input);
  const Eigen::MatrixXd& z = cache.output();

  EncoderLossReport report;
  report.context_means = context_means(z, batch.context_size, k);
  const auto metric = loss_max_mi_all_pairs(report.context_means, batch.labels, cfg.metric);
  report.max_mi = metric.value;

  // Spread each context-mean gradient uniformly over its transitions.
  Eigen::MatrixXd dz(z.rows(), z.cols());
  for (int c = 0; c < k; ++c) {
    dz.middleCols(c * batch.context_size, batch.context_size) =
        (metric.grad.col(c) / static_cast<double>(batch.context_size)).replicate(1, batch.context_size);
  }
  report.total = report.max_mi;
  if (cfg.use_club) {
    LossWithGrad min_mi;
    if (cfg.negatives == ClubNegatives::Batch) {
      min_mi = loss_min_mi(club, batch.state_action, z);
    } else {
      std::vector<int> column_labels;
      column_labels.reserve(static_cast<std::size_t>(z.cols()));
      for (const int label : batch.labels) column_labels.insert(column_labels.end(), batch.context_size, label);
      min_mi = loss_min_mi_by_task(club, batch.state_action, z, column_labels);
    }
    report.min_mi = min_mi.value;
    report.total += cfg.metric.min_mi_weight * min_mi.value;
    dz += cfg.metric.min_mi_weight * min_mi.grad;
  }
  if (encoder_grad != nullptr) *encoder_grad = enc.net.backward(cache, dz);
  return report;
}

EncoderLossReport encoder_update(ContextEncoder& enc, ClubEstimator& club, const ContextBatch& batch,
                                 const EncoderUpdateConfig& cfg, EncoderOptimizers& opt) {
  require_two_tasks(batch);
  std::optional<double> vd;
  if (cfg.use_club) {
    const Eigen::MatrixXd z = enc.net.predict(batch.encoder_input);
    for (int s = 0; s < cfg.club_steps; ++s) {
      ClubGrad g;
      const double value = loss_vd(club, batch.state_action, z, &g);
      if (!std::isfinite(value)) throw TrainingError("non-finite L_VD");
      if (!vd) vd = value;
      adam_step(club.mean_net, g.mean_net, opt.club.mean.state, opt.club.mean.lr);
      adam_step(club.log_std_net, g.log_std_net, opt.club.log_std.state, opt.club.log_std.lr);
    }
  }
  MlpGrad grad;
  auto report = encoder_loss(enc, club, batch, cfg, &grad);
  report.vd = vd;
  if (!std::isfinite(report.total)) throw TrainingError("non-finite encoder loss");
  adam_step(enc.net, grad, opt.encoder.state, opt.encoder.lr);
  return report;
}

}  // namespace shiftlab
