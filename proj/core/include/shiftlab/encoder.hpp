#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/context.hpp"
#include "shiftlab/envs.hpp"
#include "shiftlab/nn.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

/// Per-transition encoder; a context is represented by the mean embedding.
/// Input rows are [s, a, r / reward_divisor, s'].
struct ContextEncoder {
  Mlp net;
  Family family = Family::PointRobot;
  int latent_dim = 8;
  double reward_divisor = 1.0;

  static ContextEncoder create(Family family, int latent_dim, const std::vector<int>& hidden,
                               double reward_divisor, Rng& rng);
  static int input_dim(Family family);
};

/// Gaussian q(z | s, a) with separate mean and log-std heads.
struct ClubEstimator {
  Mlp mean_net;
  Mlp log_std_net;

  static ClubEstimator create(int input_dim, int latent_dim, const std::vector<int>& hidden, Rng& rng);
  int latent_dim() const { return mean_net.output_dim(); }
};

struct MetricLossConfig {
  double beta = 1.0;
  int power = 2;  // the exponent n; even, positive
  double epsilon = 1e-3;
  double min_mi_weight = 25.0;  // lambda

  void validate() const;
};

/// Encoder input columns, one per transition.
Eigen::MatrixXd encoder_inputs(const ContextEncoder& enc, std::span<const Transition> transitions);
/// (s, a) columns, one per transition.
Eigen::MatrixXd state_action_inputs(std::span<const Transition> transitions);

Eigen::VectorXd encode_transition(const ContextEncoder& enc, const Transition& t);
/// Throws UsageError on an empty context.
Eigen::VectorXd encode_context(const ContextEncoder& enc, std::span<const Transition> transitions);
Eigen::VectorXd encode_context(const ContextEncoder& enc, const Context& context);

struct EmbeddingPair {
  Eigen::VectorXd z_i;
  int y_i = 0;
  Eigen::VectorXd z_j;
  int y_j = 0;
};

/// Mean over pairs of the attraction / inverse-power repulsion loss.
double loss_max_mi(std::span<const EmbeddingPair> pairs, const MetricLossConfig& cfg);

struct LossWithGrad {
  double value = 0.0;
  Eigen::MatrixXd grad;  // gradient with respect to the embedding matrix
};

/// All unordered pairs of columns of `z` (d x K), labelled by `labels`.
LossWithGrad loss_max_mi_all_pairs(const Eigen::MatrixXd& z, std::span<const int> labels,
                                   const MetricLossConfig& cfg);

/// Per-column Gaussian parameters from the estimator heads (log-std clamped).
struct ClubOutputs {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd log_std;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> clamped;
  ForwardCache mean_cache;
  ForwardCache log_std_cache;
};
ClubOutputs club_forward(const ClubEstimator& club, const Eigen::MatrixXd& x);

struct ClubGrad {
  MlpGrad mean_net;
  MlpGrad log_std_net;
};

/// Negative mean log-likelihood of z under q(z | x); z is a constant.
double loss_vd(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
               ClubGrad* grad = nullptr);

/// CLUB contrast with negatives drawn from every other column of the batch:
/// (1/B) sum_i [log q(z_i|x_i) - (1/B) sum_j log q(z_j|x_i)]. Computed in
/// O(B d). The gradient is with respect to z only (the estimator is frozen).
/// Throws UsageError when B < 2.
LossWithGrad loss_min_mi(const ClubOutputs& heads, const Eigen::MatrixXd& z);
LossWithGrad loss_min_mi(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z);

/// Same quantity as loss_min_mi, as a diagnostic MI estimate.
double club_mi_estimate(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z);

struct Optimizer {
  AdamState state;
  double lr = 3e-4;
};

struct ClubOptimizers {
  Optimizer mean;
  Optimizer log_std;
};

/// Minibatch Adam on loss_vd. Returns the final full-batch loss.
double fit_club(ClubEstimator& club, ClubOptimizers& opt, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                int steps, int batch_size, Rng& rng);

/// A meta-batch of equal-sized contexts stored contiguously by column.
struct ContextBatch {
  Eigen::MatrixXd encoder_input;  // encoder input rows x (K * context_size)
  Eigen::MatrixXd state_action;   // (dim s + dim a) x (K * context_size)
  int context_size = 0;
  std::vector<int> labels;        // one task label per context

  int num_contexts() const { return static_cast<int>(labels.size()); }
};

/// Throws UsageError on ragged or empty contexts.
ContextBatch make_context_batch(const ContextEncoder& enc, const std::vector<std::vector<Transition>>& contexts,
                                const std::vector<int>& labels);

struct EncoderLossReport {
  double max_mi = 0.0;
  std::optional<double> min_mi;  // absent when the CLUB branch is disabled
  std::optional<double> vd;
  double total = 0.0;
  Eigen::MatrixXd context_means;  // d x K, before the encoder step
};

/// Where loss_min_mi draws its negatives inside a context batch. Batch
/// contrasts against every transition; SameTask only against transitions of
/// the same task label, which estimates I(z; (s, a) | task).
enum class ClubNegatives { Batch, SameTask };

std::string_view to_string(ClubNegatives negatives);
/// Accepts "batch" and "task". Throws ConfigError otherwise.
ClubNegatives parse_club_negatives(std::string_view name);

/// loss_min_mi per task label, combined as a size-weighted mean. Gradient is
/// with respect to z.
LossWithGrad loss_min_mi_by_task(const ClubEstimator& club, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                 std::span<const int> column_labels);

struct EncoderUpdateConfig {
  MetricLossConfig metric;
  bool use_club = true;  // false reproduces pure metric learning
  int club_steps = 1;
  ClubNegatives negatives = ClubNegatives::Batch;
};

struct EncoderOptimizers {
  Optimizer encoder;
  ClubOptimizers club;
};

/// Losses and encoder gradient for the current parameters; no update.
EncoderLossReport encoder_loss(const ContextEncoder& enc, const ClubEstimator& club, const ContextBatch& batch,
                               const EncoderUpdateConfig& cfg, MlpGrad* encoder_grad);

/// One adversarial round: club_steps Adam steps on loss_vd with the encoder
/// fixed, then one Adam step on max_mi + lambda * min_mi with the estimator
/// fixed. Reported values precede the encoder step (vd precedes the estimator
/// steps). Throws UsageError with fewer than two distinct task labels.
EncoderLossReport encoder_update(ContextEncoder& enc, ClubEstimator& club, const ContextBatch& batch,
                                 const EncoderUpdateConfig& cfg, EncoderOptimizers& opt);

}  // namespace shiftlab
