#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "shiftlab/agent.hpp"
#include "shiftlab/checkpoint.hpp"
#include "shiftlab/config.hpp"
#include "shiftlab/datagen.hpp"
#include "shiftlab/encoder.hpp"

namespace shiftlab {

/// Everything produced by meta-training.
struct TrainedModel {
  Family family = Family::PointRobot;
  Method method = Method::Csro;
  std::uint64_t seed = 0;
  int step = 0;
  ContextEncoder encoder;
  ClubEstimator club;
  Actor actor;
  Critic critic;
  AgentConfig agent;

  Checkpoint to_checkpoint() const;
  /// Throws DataError on missing tensors or metadata.
  static TrainedModel from_checkpoint(const Checkpoint& ckpt);
};

struct TrainLogEntry {
  int step = 0;
  double max_mi = 0.0;
  std::optional<double> min_mi;
  std::optional<double> vd;
  double encoder = 0.0;
  double critic = 0.0;
  double actor = 0.0;
  double eval_return = 0.0;

  std::string to_line() const;
};

/// Offline meta-training over a fixed set of training datasets.
class MetaTrainer {
 public:
  /// Throws UsageError when fewer than two training datasets are given.
  MetaTrainer(const RunConfig& cfg, std::vector<Dataset> train_sets, std::uint64_t seed);

  /// One iteration: sample a task meta-batch, two contexts per task for the
  /// encoder round, then an actor-critic update on separate transition
  /// batches, each task conditioned on its detached context latent.
  /// Throws TrainingError naming the step on a non-finite loss.
  TrainLogEntry step();

  /// Deterministic return on the first two training tasks from offline
  /// contexts.
  double quick_eval() const;

  const TrainedModel& model() const { return model_; }
  int steps_done() const { return step_; }

 private:
  struct TaskData {
    Eigen::MatrixXd enc_in;
    Eigen::MatrixXd sa;
    AgentBatch all;
  };

  std::vector<int> sample_tasks_for_step();
  std::vector<int> sample_indices(int n, int count);

  RunConfig cfg_;
  std::vector<Dataset> train_;
  std::vector<TaskData> data_;
  TrainedModel model_;
  EncoderUpdateConfig enc_cfg_;
  EncoderOptimizers enc_opt_;
  AgentOptimizers agent_opt_;
  Rng rng_;
  Rng agent_rng_;
  int step_ = 0;
};

struct TrainResult {
  TrainedModel final_model;
  TrainedModel best_model;
  double best_eval = 0.0;
  std::vector<TrainLogEntry> log;
};

/// Runs cfg.training_steps iterations. Logs at step 0 and every
/// cfg.log_interval steps thereafter (losses are those of the logged step);
/// the best model is the one with the highest quick evaluation at a log step.
TrainResult meta_train(const RunConfig& cfg, const std::vector<Dataset>& train_sets, std::uint64_t seed,
                       const std::function<void(const TrainLogEntry&)>& on_log = {});

}  // namespace shiftlab
