#include "shiftlab/datagen.hpp"

#include <cmath>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace {
constexpr double kDynamicsTolerance = 1e-9;
}

BehaviorSample behavior_action(const BehaviorPolicy& policy, const EnvState& state, Rng& rng) {
  BehaviorSample out;
  out.mean = policy.mixing() * expert_action(policy.task, state);
  out.std = policy.noise_std();
  Eigen::VectorXd a(out.mean.size());
  for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = out.mean[d] + out.std * rng.normal();
  out.action = clip_action(a);
  return out;
}

Dataset collect_dataset(const TaskSpec& task, int episodes_per_checkpoint, std::uint64_t seed) {
  if (episodes_per_checkpoint < 1) throw ConfigError("episodes_per_checkpoint must be >= 1");
  const auto& tr = traits(task.family);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task.task_id)));
  Dataset ds;
  ds.task = task;
  ds.episodes = kNumCheckpoints * episodes_per_checkpoint;
  ds.horizon = tr.horizon;
  ds.transitions.reserve(static_cast<std::size_t>(ds.episodes * ds.horizon));
  for (int ckpt = 0; ckpt < kNumCheckpoints; ++ckpt) {
    const BehaviorPolicy policy{task, ckpt};
    for (int ep = 0; ep < episodes_per_checkpoint; ++ep) {
      EnvState state = reset(task);
      bool done = false;
      while (!done) {
        const auto sample = behavior_action(policy, state, rng);
        const auto result = step(task, state, sample.action);
        Transition t;
        t.s = state.x;
        t.a = sample.action;
        t.r = result.reward;
        t.s_next = result.state.x;
        t.task_id = task.task_id;
        t.behavior_mean = sample.mean;
        t.behavior_std = sample.std;
        t.checkpoint_index = ckpt;
        ds.transitions.push_back(std::move(t));
        state = result.state;
        done = result.done;
      }
    }
  }
  return ds;
}

void validate_dataset(const Dataset& ds) {
  const auto& tr = traits(ds.task.family);
  if (ds.transitions.empty()) throw DataError("dataset has no transitions");
  if (ds.episodes < 1 || ds.horizon != tr.horizon) throw DataError("dataset header: bad episodes/horizon");
  if (ds.transitions.size() != static_cast<std::size_t>(ds.episodes) * static_cast<std::size_t>(ds.horizon)) {
    throw DataError(fmt::format("dataset has {} transitions, header promises {} x {}", ds.transitions.size(),
                                ds.episodes, ds.horizon));
  }
  for (std::size_t i = 0; i < ds.transitions.size(); ++i) {
    const auto& t = ds.transitions[i];
    auto fail = [&](std::string_view why) {
      throw DataError(fmt::format("transition {}: {}", i, why));
    };
    if (t.s.size() != tr.state_dim || t.s_next.size() != tr.state_dim || t.a.size() != tr.action_dim ||
        t.behavior_mean.size() != tr.action_dim) {
      fail("wrong field dimension");
    }
    if (!t.s.allFinite() || !t.a.allFinite() || !std::isfinite(t.r) || !t.s_next.allFinite() ||
        !t.behavior_mean.allFinite() || !std::isfinite(t.behavior_std)) {
      fail("non-finite value");
    }
    if (t.task_id != ds.task.task_id) fail("task_id does not match the dataset header");
    if ((t.a.array().abs() > 1.0).any()) fail("action outside [-1, 1]");
    if (!(t.behavior_std > 0.0)) fail("behavior_std must be positive");
    if (t.checkpoint_index < 0 || t.checkpoint_index >= kNumCheckpoints) fail("checkpoint_index out of range");
    const Eigen::Vector2d expected = dynamics(ds.task, t.s, t.a);
    if ((expected - t.s_next).cwiseAbs().maxCoeff() > kDynamicsTolerance) {
      fail("s_next is inconsistent with the task dynamics");
    }
    if (std::abs(reward(ds.task, t.s_next, t.a) - t.r) > kDynamicsTolerance) {
      fail("reward is inconsistent with the task reward function");
    }
  }
}

namespace {

void append_vec(std::string& out, const Eigen::VectorXd& v) {
  for (Eigen::Index d = 0; d < v.size(); ++d) {
    out += textio::format_double(v[d]);
    out += ' ';
  }
}

}  // namespace

std::string serialize_dataset(const Dataset& ds) {
  std::string out = fmt::format("shiftlab-dataset version=1 family={} task_id={} split={} param={} episodes={} horizon={}\n",
                                to_string(ds.task.family), ds.task.task_id, to_string(ds.task.split),
                                textio::format_double(ds.task.param), ds.episodes, ds.horizon);
  for (const auto& t : ds.transitions) {
    append_vec(out, t.s);
    append_vec(out, t.a);
    out += textio::format_double(t.r);
    out += ' ';
    append_vec(out, t.s_next);
    out += std::to_string(t.task_id);
    out += ' ';
    append_vec(out, t.behavior_mean);
    out += textio::format_double(t.behavior_std);
    out += ' ';
    out += std::to_string(t.checkpoint_index);
    out += '\n';
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  textio::write_file(path, serialize_dataset(ds));
}

Dataset parse_dataset(const std::string& text, const std::string& origin) {
  const auto lines = textio::split(text, '\n');
  if (lines.empty() || lines[0].rfind("shiftlab-dataset ", 0) != 0) {
    throw DataError(fmt::format("{}: missing dataset header", origin));
  }
  Dataset ds;
  try {
    auto header = textio::parse_record(lines[0].substr(std::string_view("shiftlab-dataset ").size()));
    if (header.at("version") != "1") throw DataError("unsupported format version");
    ds.task.family = parse_family(header.at("family"));
    ds.task.task_id = static_cast<int>(textio::parse_int(header.at("task_id")));
    ds.task.split = parse_split(header.at("split"));
    ds.task.param = textio::parse_double(header.at("param"));
    ds.episodes = static_cast<int>(textio::parse_int(header.at("episodes")));
    ds.horizon = static_cast<int>(textio::parse_int(header.at("horizon")));
  } catch (const std::out_of_range&) {
    throw DataError(fmt::format("{}: dataset header is missing a field", origin));
  } catch (const std::exception& e) {
    throw DataError(fmt::format("{}: dataset header: {}", origin, e.what()));
  }
  const auto& tr = traits(ds.task.family);
  const auto ns = static_cast<std::size_t>(tr.state_dim);
  const auto na = static_cast<std::size_t>(tr.action_dim);
  const std::size_t width = 2 * ns + 2 * na + 4;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (textio::trim(lines[li]).empty()) continue;
    const std::size_t index = ds.transitions.size();
    try {
      const auto tok = textio::tokens(lines[li]);
      if (tok.size() != width) throw DataError(fmt::format("expected {} fields, found {}", width, tok.size()));
      std::size_t k = 0;
      auto vec = [&](std::size_t n) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(n));
        for (std::size_t d = 0; d < n; ++d) v[static_cast<Eigen::Index>(d)] = textio::parse_double(tok[k++]);
        return v;
      };
      Transition t;
      t.s = vec(ns);
      t.a = vec(na);
      t.r = textio::parse_double(tok[k++]);
      t.s_next = vec(ns);
      t.task_id = static_cast<int>(textio::parse_int(tok[k++]));
      t.behavior_mean = vec(na);
      t.behavior_std = textio::parse_double(tok[k++]);
      t.checkpoint_index = static_cast<int>(textio::parse_int(tok[k++]));
      ds.transitions.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}: transition {}: {}", origin, index, e.what()));
    }
  }
  try {
    validate_dataset(ds);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", origin, e.what()));
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(textio::read_file(path), path.string());
}

}  // namespace shiftlab
