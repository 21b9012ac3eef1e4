#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace shiftlab {

/// Toy task families. PointRobot and PointVelocity change the reward across
/// tasks; PointDyn changes the dynamics.
enum class Family { PointRobot, PointVelocity, PointDyn };

enum class Split { Train, Test };

std::string_view to_string(Family family);
std::string_view to_string(Split split);
/// Throws ConfigError naming the unknown value.
Family parse_family(std::string_view name);
Split parse_split(std::string_view name);

/// Static per-family constants.
struct FamilyTraits {
  int state_dim;
  int action_dim;
  int horizon;
  double param_lo;
  double param_hi;
  double reward_scale;   // divides rewards in TD targets
  double min_mi_weight;  // default lambda
  double discount;       // default gamma
  double behavior_reg;   // default alpha
};

const FamilyTraits& traits(Family family);

struct TaskSpec {
  Family family = Family::PointRobot;
  double param = 0.0;
  int task_id = 0;
  Split split = Split::Train;

  bool operator==(const TaskSpec&) const = default;
};

struct EnvState {
  Eigen::Vector2d x = Eigen::Vector2d::Zero();
  int step_index = 0;
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

/// Draws params i.i.d. uniform on the family interval from Rng(seed). Ids run
/// 0..n_train+n_test-1 and the first n_train are the training split.
std::vector<TaskSpec> sample_tasks(Family family, int n_train, int n_test, std::uint64_t seed);

EnvState reset(const TaskSpec& task);

/// Clips the action to [-1, 1] before use. Throws UsageError on a done state,
/// on a wrong action dimension, or on a non-finite action.
StepResult step(const TaskSpec& task, const EnvState& state, const Eigen::VectorXd& action);

/// Next state only; shared by step() and dataset validation.
Eigen::Vector2d dynamics(const TaskSpec& task, const Eigen::Vector2d& x, const Eigen::VectorXd& action);
double reward(const TaskSpec& task, const Eigen::Vector2d& x_next, const Eigen::VectorXd& action);

/// Analytic expert used by the behaviour policies.
Eigen::VectorXd expert_action(const TaskSpec& task, const EnvState& state);

/// PointRobot goal position (cos theta, sin theta).
Eigen::Vector2d goal_position(const TaskSpec& task);

Eigen::VectorXd clip_action(const Eigen::VectorXd& action);

/// One (s, a, r, s') tuple plus the annotations of the policy that produced it.
struct Transition {
  Eigen::VectorXd s;
  Eigen::VectorXd a;
  double r = 0.0;
  Eigen::VectorXd s_next;
  int task_id = 0;
  Eigen::VectorXd behavior_mean;
  double behavior_std = 1.0;
  int checkpoint_index = 0;

  bool operator==(const Transition& other) const;
};

/// Line-delimited task set: "family=... task_id=... split=... param=...".
void save_task_set(const std::vector<TaskSpec>& tasks, const std::filesystem::path& path);
std::vector<TaskSpec> load_task_set(const std::filesystem::path& path);

}  // namespace shiftlab
