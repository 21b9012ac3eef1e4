#include "shiftlab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace {

constexpr double kPositionStep = 0.1;
constexpr double kVelocityStep = 0.2;
constexpr double kDynDamping = 0.9;
constexpr double kControlCost = 0.01;

const FamilyTraits kPointRobot{2, 2, 20, 0.0, std::numbers::pi, 100.0, 25.0, 0.9, 1.0};
const FamilyTraits kPointVelocity{2, 1, 50, 1.0, 3.0, 5.0, 10.0, 0.99, 50.0};
const FamilyTraits kPointDyn{2, 1, 50, 0.5, 1.5, 5.0, 25.0, 0.99, 50.0};

}  // namespace

std::string_view to_string(Family family) {
  switch (family) {
    case Family::PointRobot: return "PointRobot";
    case Family::PointVelocity: return "PointVelocity";
    case Family::PointDyn: return "PointDyn";
  }
  return "?";
}

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Family parse_family(std::string_view name) {
  if (name == "PointRobot") return Family::PointRobot;
  if (name == "PointVelocity") return Family::PointVelocity;
  if (name == "PointDyn") return Family::PointDyn;
  throw ConfigError(fmt::format("unknown family '{}' (expected PointRobot, PointVelocity or PointDyn)", name));
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "test") return Split::Test;
  throw DataError(fmt::format("unknown split '{}'", name));
}

const FamilyTraits& traits(Family family) {
  switch (family) {
    case Family::PointRobot: return kPointRobot;
    case Family::PointVelocity: return kPointVelocity;
    case Family::PointDyn: return kPointDyn;
  }
  throw ConfigError("unknown family");
}

std::vector<TaskSpec> sample_tasks(Family family, int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ConfigError("sample_tasks needs n_train >= 1 and n_test >= 1");
  const auto& tr = traits(family);
  Rng rng(seed);
  std::vector<TaskSpec> tasks;
  tasks.reserve(static_cast<std::size_t>(n_train + n_test));
  for (int id = 0; id < n_train + n_test; ++id) {
    TaskSpec task;
    task.family = family;
    task.param = rng.uniform(tr.param_lo, tr.param_hi);
    task.task_id = id;
    task.split = id < n_train ? Split::Train : Split::Test;
    tasks.push_back(task);
  }
  return tasks;
}

EnvState reset(const TaskSpec&) { return EnvState{}; }

Eigen::VectorXd clip_action(const Eigen::VectorXd& action) { return action.cwiseMax(-1.0).cwiseMin(1.0); }

Eigen::Vector2d goal_position(const TaskSpec& task) {
  return {std::cos(task.param), std::sin(task.param)};
}

Eigen::Vector2d dynamics(const TaskSpec& task, const Eigen::Vector2d& x, const Eigen::VectorXd& action) {
  switch (task.family) {
    case Family::PointRobot:
      return x + kPositionStep * action.head<2>();
    case Family::PointVelocity: {
      const double v = x[1] + kVelocityStep * action[0];
      return {x[0] + kPositionStep * v, v};
    }
    case Family::PointDyn: {
      const double v = kDynDamping * x[1] + kVelocityStep * task.param * action[0];
      return {x[0] + kPositionStep * v, v};
    }
  }
  throw ConfigError("unknown family");
}

double reward(const TaskSpec& task, const Eigen::Vector2d& x_next, const Eigen::VectorXd& action) {
  switch (task.family) {
    case Family::PointRobot:
      return -(x_next - goal_position(task)).norm();
    case Family::PointVelocity:
      return -std::abs(x_next[1] - task.param) - kControlCost * action[0] * action[0];
    case Family::PointDyn:
      return x_next[1] - kControlCost * action[0] * action[0];
  }
  throw ConfigError("unknown family");
}

StepResult step(const TaskSpec& task, const EnvState& state, const Eigen::VectorXd& action) {
  const auto& tr = traits(task.family);
  if (state.step_index >= tr.horizon) {
    throw UsageError(fmt::format("step() called on a finished episode (step_index {})", state.step_index));
  }
  if (action.size() != tr.action_dim) {
    throw UsageError(fmt::format("action has dimension {}, expected {}", action.size(), tr.action_dim));
  }
  if (!action.allFinite()) throw UsageError("action is not finite");
  const Eigen::VectorXd a = clip_action(action);
  StepResult out;
  out.state.x = dynamics(task, state.x, a);
  out.state.step_index = state.step_index + 1;
  out.reward = reward(task, out.state.x, a);
  out.done = out.state.step_index == tr.horizon;
  return out;
}

Eigen::VectorXd expert_action(const TaskSpec& task, const EnvState& state) {
  switch (task.family) {
    case Family::PointRobot:
      return clip_action((goal_position(task) - state.x) / kPositionStep);
    case Family::PointVelocity: {
      Eigen::VectorXd a(1);
      a[0] = std::clamp((task.param - state.x[1]) / kVelocityStep, -1.0, 1.0);
      return a;
    }
    case Family::PointDyn:
      return Eigen::VectorXd::Ones(1);
  }
  throw ConfigError("unknown family");
}

bool Transition::operator==(const Transition& o) const {
  return s == o.s && a == o.a && r == o.r && s_next == o.s_next && task_id == o.task_id &&
         behavior_mean == o.behavior_mean && behavior_std == o.behavior_std &&
         checkpoint_index == o.checkpoint_index;
}

void save_task_set(const std::vector<TaskSpec>& tasks, const std::filesystem::path& path) {
  std::string out;
  for (const auto& t : tasks) {
    out += fmt::format("family={} task_id={} split={} param={}\n", to_string(t.family), t.task_id,
                       to_string(t.split), textio::format_double(t.param));
  }
  textio::write_file(path, out);
}

std::vector<TaskSpec> load_task_set(const std::filesystem::path& path) {
  std::vector<TaskSpec> tasks;
  const auto lines = textio::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (textio::trim(lines[i]).empty()) continue;
    try {
      auto rec = textio::parse_record(lines[i]);
      TaskSpec t;
      t.family = parse_family(rec.at("family"));
      t.task_id = static_cast<int>(textio::parse_int(rec.at("task_id")));
      t.split = parse_split(rec.at("split"));
      t.param = textio::parse_double(rec.at("param"));
      const auto& tr = traits(t.family);
      if (!(t.param >= tr.param_lo && t.param <= tr.param_hi)) throw DataError("param out of range");
      tasks.push_back(t);
    } catch (const std::out_of_range&) {
      throw DataError(fmt::format("{}: record {} is missing a field", path.string(), i));
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}: record {}: {}", path.string(), i, e.what()));
    }
  }
  return tasks;
}

}  // namespace shiftlab
