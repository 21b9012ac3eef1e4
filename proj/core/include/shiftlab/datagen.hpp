#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/envs.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

constexpr int kNumCheckpoints = 4;

/// Analytic stand-in for a partially trained expert: the expert action scaled
/// by a mixing factor m, plus isotropic Gaussian noise whose width shrinks as m
/// grows. Checkpoint k uses m = 0.25 * (k + 1).
struct BehaviorPolicy {
  TaskSpec task;
  int checkpoint_index = 0;

  double mixing() const { return 0.25 * (checkpoint_index + 1); }
  double noise_std() const { return 0.75 + mixing() * (0.1 - 0.75); }
};

struct BehaviorSample {
  Eigen::VectorXd action;  // clipped
  Eigen::VectorXd mean;    // unclipped
  double std = 0.0;
};

BehaviorSample behavior_action(const BehaviorPolicy& policy, const EnvState& state, Rng& rng);

struct Dataset {
  TaskSpec task;
  std::vector<Transition> transitions;
  int episodes = 0;
  int horizon = 0;

  bool operator==(const Dataset&) const = default;
};

/// Rolls episodes_per_checkpoint full episodes for each of the four
/// checkpoints, checkpoint-major. The RNG stream is derive_seed(seed, task_id).
Dataset collect_dataset(const TaskSpec& task, int episodes_per_checkpoint, std::uint64_t seed);

/// Throws DataError naming the first offending transition index.
void validate_dataset(const Dataset& dataset);

/// Text format: header line
///   shiftlab-dataset version=1 family=F task_id=I split=S param=P episodes=E horizon=H
/// then one line per transition with whitespace-separated fields
///   s[..] a[..] r s_next[..] task_id behavior_mean[..] behavior_std checkpoint_index
/// Floats use 17 significant digits.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
std::string serialize_dataset(const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);
Dataset parse_dataset(const std::string& text, const std::string& origin = "<memory>");

}  // namespace shiftlab
