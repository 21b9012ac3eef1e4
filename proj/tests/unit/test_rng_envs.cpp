#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "shiftlab/envs.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {
namespace {

using Eigen::VectorXd;

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Independent xoshiro256** written from the published reference.
struct RefXoshiro {
  std::uint64_t s[4];
  explicit RefXoshiro(std::uint64_t seed) {
    for (auto& w : s) {
      seed += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = seed;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t r = rotl(s[1] * 5, 7) * 9, t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return r;
  }
};

TEST(Rng, MatchesReferenceStream) {
  Rng rng(0);
  EXPECT_EQ(rng.next(), 0x99ec5f36cb75f2b4ULL);
  EXPECT_EQ(rng.next(), 0xbf6e1f784956452aULL);
  EXPECT_EQ(rng.next(), 0x1a5f849d4933e6e0ULL);
  for (std::uint64_t seed : {1ULL, 42ULL, 0xdeadbeefULL}) {
    Rng a(seed);
    RefXoshiro b(seed);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next(), b.next());
  }
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(5);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.01);
}

TEST(Rng, BelowCoversRange) {
  Rng rng(9);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
  EXPECT_EQ(derive_seed(3, 4), derive_seed(3, 4));
}

TEST(SampleTasks, PaperSplitSizesAndRange) {
  const auto tasks = sample_tasks(Family::PointRobot, 30, 10, 123);
  ASSERT_EQ(tasks.size(), 40u);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    EXPECT_GE(tasks[i].param, 0.0);
    EXPECT_LE(tasks[i].param, std::numbers::pi);
    EXPECT_EQ(tasks[i].task_id, static_cast<int>(i));
    EXPECT_EQ(tasks[i].split, i < 30 ? Split::Train : Split::Test);
  }
}

TEST(SampleTasks, DeterministicPerSeed) {
  const auto a = sample_tasks(Family::PointVelocity, 1, 1, 77);
  const auto b = sample_tasks(Family::PointVelocity, 1, 1, 77);
  EXPECT_EQ(a, b);
  for (const auto& t : a) {
    EXPECT_GE(t.param, 1.0);
    EXPECT_LE(t.param, 3.0);
  }
  EXPECT_NE(sample_tasks(Family::PointVelocity, 1, 1, 78), a);
}

TEST(SampleTasks, GoldenSeed42) {
  const auto tasks = sample_tasks(Family::PointRobot, 2, 1, 42);
  ASSERT_EQ(tasks.size(), 3u);
  EXPECT_DOUBLE_EQ(tasks[0].param, 0.2634632937899392);
  EXPECT_DOUBLE_EQ(tasks[1].param, 1.190601571337458);
  EXPECT_DOUBLE_EQ(tasks[2].param, 2.1364193842081467);
}

TEST(SampleTasks, RejectsEmptySplits) {
  EXPECT_THROW(sample_tasks(Family::PointRobot, 0, 1, 1), ConfigError);
  EXPECT_THROW(sample_tasks(Family::PointRobot, 1, 0, 1), ConfigError);
}

TEST(Families, ParseAndNames) {
  for (auto f : {Family::PointRobot, Family::PointVelocity, Family::PointDyn}) {
    EXPECT_EQ(parse_family(to_string(f)), f);
  }
  EXPECT_THROW(parse_family("HalfCheetah"), ConfigError);
  EXPECT_EQ(traits(Family::PointRobot).horizon, 20);
  EXPECT_EQ(traits(Family::PointVelocity).state_dim, 2);
  EXPECT_EQ(traits(Family::PointVelocity).action_dim, 1);
}

TEST(Reset, StartsAtOrigin) {
  for (const auto& task : {TaskSpec{Family::PointRobot, 1.3, 0, Split::Train},
                           TaskSpec{Family::PointVelocity, 2.0, 0, Split::Train},
                           TaskSpec{Family::PointDyn, 1.5, 0, Split::Train}}) {
    const auto s = reset(task);
    EXPECT_EQ(s.x, Eigen::Vector2d::Zero());
    EXPECT_EQ(s.step_index, 0);
  }
}

TEST(Step, PointRobotExamples) {
  const TaskSpec east{Family::PointRobot, 0.0, 0, Split::Train};
  auto r = step(east, reset(east), vec({1, 0}));
  EXPECT_NEAR(r.state.x(0), 0.1, 1e-15);
  EXPECT_NEAR(r.state.x(1), 0.0, 1e-15);
  EXPECT_NEAR(r.reward, -0.9, 1e-12);
  EXPECT_FALSE(r.done);

  const TaskSpec north{Family::PointRobot, std::numbers::pi / 2, 0, Split::Train};
  r = step(north, reset(north), vec({0, 0}));
  EXPECT_EQ(r.state.x, Eigen::Vector2d::Zero());
  EXPECT_NEAR(r.reward, -1.0, 1e-12);
}

TEST(Step, PointVelocityExample) {
  const TaskSpec task{Family::PointVelocity, 1.0, 0, Split::Train};
  const auto r = step(task, reset(task), vec({1}));
  EXPECT_NEAR(r.state.x(1), 0.2, 1e-15);
  EXPECT_NEAR(r.state.x(0), 0.02, 1e-15);
  EXPECT_NEAR(r.reward, -0.81, 1e-12);
}

TEST(Step, PointDynUsesKappa) {
  const TaskSpec task{Family::PointDyn, 1.5, 0, Split::Train};
  const auto r = step(task, reset(task), vec({1}));
  EXPECT_NEAR(r.state.x(1), 0.3, 1e-15);
  EXPECT_NEAR(r.reward, 0.3 - 0.01, 1e-12);
}

TEST(Step, ClipsActions) {
  const TaskSpec task{Family::PointRobot, 0.0, 0, Split::Train};
  const auto a = step(task, reset(task), vec({5, -7}));
  const auto b = step(task, reset(task), vec({1, -1}));
  EXPECT_EQ(a.state.x, b.state.x);
  EXPECT_EQ(a.reward, b.reward);
}

TEST(Step, HorizonAndErrors) {
  const TaskSpec task{Family::PointRobot, 0.3, 0, Split::Train};
  auto s = reset(task);
  StepResult r;
  for (int t = 0; t < 20; ++t) {
    r = step(task, s, vec({0.1, 0.1}));
    s = r.state;
    EXPECT_EQ(r.done, t == 19);
  }
  EXPECT_THROW(step(task, s, vec({0, 0})), UsageError);
  EXPECT_THROW(step(task, reset(task), vec({0})), UsageError);
  EXPECT_THROW(step(task, reset(task), vec({NAN, 0})), UsageError);
}

TEST(Step, RewardBoundedAboveByZeroForPointRobot) {
  Rng rng(3);
  const auto tasks = sample_tasks(Family::PointRobot, 5, 5, 11);
  for (const auto& task : tasks) {
    auto s = reset(task);
    for (int t = 0; t < 20; ++t) {
      const auto r = step(task, s, vec({rng.uniform(-1, 1), rng.uniform(-1, 1)}));
      EXPECT_LE(r.reward, 0.0);
      s = r.state;
    }
  }
}

TEST(Expert, Examples) {
  const TaskSpec east{Family::PointRobot, 0.0, 0, Split::Train};
  auto a = expert_action(east, reset(east));
  EXPECT_NEAR(a(0), 1.0, 1e-12);
  EXPECT_NEAR(a(1), 0.0, 1e-12);
  EnvState near;
  near.x = Eigen::Vector2d(0.95, 0.0);
  a = expert_action(east, near);
  EXPECT_NEAR(a(0), 0.5, 1e-12);
  EXPECT_NEAR(a(1), 0.0, 1e-12);

  const TaskSpec slow{Family::PointVelocity, 1.0, 0, Split::Train};
  EnvState fast;
  fast.x = Eigen::Vector2d(0.0, 3.0);
  EXPECT_NEAR(expert_action(slow, fast)(0), -1.0, 1e-12);
}

TEST(Expert, ReachesPointRobotGoal) {
  for (const auto& task : sample_tasks(Family::PointRobot, 10, 1, 2)) {
    auto s = reset(task);
    StepResult r;
    for (int t = 0; t < 20; ++t) {
      r = step(task, s, expert_action(task, s));
      s = r.state;
    }
    EXPECT_GT(r.reward, -1e-9);
  }
}

TEST(TaskSet, RoundTrip) {
  const auto tasks = sample_tasks(Family::PointDyn, 3, 2, 8);
  const auto path = std::filesystem::temp_directory_path() / "shiftlab_unit_tasks.txt";
  save_task_set(tasks, path);
  EXPECT_EQ(load_task_set(path), tasks);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace shiftlab
