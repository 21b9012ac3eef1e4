#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/agent.hpp"
#include "shiftlab/context.hpp"
#include "shiftlab/datagen.hpp"
#include "shiftlab/encoder.hpp"

namespace shiftlab {

struct EvalConfig {
  int context_size = 64;  // N_c for offline contexts
  int random_steps = 5;   // t_r
  int collect_steps = 20; // T, one horizon
  int eval_episodes = 5;

  /// t_r = horizon / 4 and T = horizon for the family.
  static EvalConfig for_family(Family family);
  void validate() const;
};

/// Any policy conditioned on a task latent. Actors are adapted with as_policy;
/// tests also plug in hand-written oracles.
using LatentPolicy = std::function<Eigen::VectorXd(const Eigen::VectorXd& s, const Eigen::VectorXd& z, ActMode mode,
                                                   Rng& rng)>;
LatentPolicy as_policy(const Actor& actor);

/// Uniform sample without replacement. Throws UsageError when n_c exceeds the
/// dataset size.
Context sample_offline_context(const Dataset& dataset, int n_c, std::uint64_t seed);

/// Prior-conditioned exploration: z0 ~ N(0, I), one stochastic episode on z0,
/// re-encode, one more episode on the posterior. Returns 2 * horizon transitions.
Context explore_prior(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                      const EvalConfig& cfg, std::uint64_t seed);

/// Non-prior exploration: t_r uniform-random actions, then the policy acting on
/// the posterior of the context collected so far, recomputed every step.
/// Requires t_r >= 1. The random prefix uses its own RNG stream, so it does not
/// depend on the encoder or the policy.
Context explore_nonprior(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                         const EvalConfig& cfg, std::uint64_t seed);

/// Undiscounted return averaged over deterministic episodes conditioned on the
/// context's posterior. Throws UsageError on an empty context.
double evaluate(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc, const Context& context,
                int eval_episodes, std::uint64_t seed);

/// Single-episode return for a fixed latent.
double rollout_return(const TaskSpec& task, const LatentPolicy& policy, const Eigen::VectorXd& z, ActMode mode,
                      Rng& rng);

struct ShiftReport {
  double j_offline = 0.0;
  double j_prior = 0.0;
  double j_nonprior = 0.0;
  double gap_prior() const { return j_offline - j_prior; }
  double gap_nonprior() const { return j_offline - j_nonprior; }
};

ShiftReport context_shift_gap(const TaskSpec& task, const LatentPolicy& policy, const ContextEncoder& enc,
                              const Dataset& dataset, const EvalConfig& cfg, std::uint64_t seed);

/// Maps transitions to embedding columns (d x N).
using TransitionEmbedder = std::function<Eigen::MatrixXd(std::span<const Transition>)>;
TransitionEmbedder as_embedder(const ContextEncoder& enc);

struct ProbeConfig {
  int hidden = 32;
  int epochs = 400;
  double lr = 1e-2;
  double train_fraction = 0.8;
};

/// Held-out accuracy of a fresh softmax classifier predicting the behaviour
/// checkpoint from per-transition embeddings. Throws UsageError when fewer than
/// two checkpoint classes are present.
double probe_policy_info(const std::vector<Dataset>& datasets, const TransitionEmbedder& embed, std::uint64_t seed,
                         const ProbeConfig& cfg = {});

struct LabeledContext {
  int task_id = 0;
  double label = 0.0;  // task parameter, for display
  Context context;
};

struct EmbeddingReport {
  std::vector<int> task_ids;
  std::vector<double> labels;
  Eigen::MatrixXd embeddings;  // n x d
  Eigen::MatrixXd projection;  // n x 2
  Eigen::VectorXd component_variance;  // variance along each principal axis kept
  double silhouette = 0.0;
};

/// Top-k principal axes of the row-sample matrix x (n x d). Each axis is
/// oriented so its largest-magnitude component is positive.
Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, int k, Eigen::VectorXd* variances = nullptr);

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& labels);

/// Encodes each context, projects to 2-D, scores clusters by task_id on the
/// full-dimensional embeddings, and writes the export file when `out` is set.
/// Throws UsageError with fewer than two distinct task ids.
EmbeddingReport embed_and_project(const ContextEncoder& enc, const std::vector<LabeledContext>& contexts,
                                  const std::optional<std::filesystem::path>& out = std::nullopt);

std::string serialize_embedding(const EmbeddingReport& report);

/// One evaluation result. Serialised as a single key=value line.
struct MetricsRecord {
  std::string method;
  std::string regime;
  int task_id = 0;
  std::uint64_t seed = 0;
  double avg_return = 0.0;
  std::map<std::string, double> aux;

  std::string to_line() const;
  static MetricsRecord from_line(const std::string& line);
  bool operator==(const MetricsRecord&) const = default;
};

}  // namespace shiftlab
