#include <benchmark/benchmark.h>

#include "shiftlab/agent.hpp"
#include "shiftlab/datagen.hpp"
#include "shiftlab/encoder.hpp"
#include "shiftlab/metatest.hpp"

namespace shiftlab {
namespace {

Eigen::MatrixXd randn(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  return m;
}

void BM_MlpForward(benchmark::State& state) {
  const auto batch = state.range(0);
  Rng rng(1);
  const auto net = Mlp::glorot({12, 64, 64, 4}, rng);
  const auto x = randn(12, batch, rng);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(x));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForward)->Arg(64)->Arg(256)->Arg(2048);

void BM_MlpForwardBackward(benchmark::State& state) {
  const auto batch = state.range(0);
  Rng rng(2);
  const auto net = Mlp::glorot({12, 64, 64, 4}, rng);
  const auto x = randn(12, batch, rng);
  const auto g = randn(4, batch, rng);
  for (auto _ : state) {
    const auto cache = net.forward(x);
    benchmark::DoNotOptimize(net.backward(cache, g));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForwardBackward)->Arg(64)->Arg(256)->Arg(2048);

std::vector<Dataset> robot_datasets(int n) {
  std::vector<Dataset> out;
  for (const auto& task : sample_tasks(Family::PointRobot, n, 1, 3)) {
    if (task.split == Split::Train) out.push_back(collect_dataset(task, 2, 4));
  }
  return out;
}

void BM_EncoderUpdate(benchmark::State& state) {
  const int context = static_cast<int>(state.range(0));
  const bool club = state.range(1) != 0;
  Rng rng(5);
  auto enc = ContextEncoder::create(Family::PointRobot, 8, {64, 64}, 1.0, rng);
  auto est = ClubEstimator::create(4, 8, {64, 64}, rng);
  const auto data = robot_datasets(8);
  std::vector<std::vector<Transition>> contexts;
  std::vector<int> labels;
  for (std::size_t t = 0; t < data.size(); ++t) {
    for (int rep = 0; rep < 2; ++rep) {
      std::vector<Transition> c;
      for (int i = 0; i < context; ++i) c.push_back(data[t].transitions[rng.below(data[t].transitions.size())]);
      contexts.push_back(std::move(c));
      labels.push_back(static_cast<int>(t));
    }
  }
  const auto batch = make_context_batch(enc, contexts, labels);
  EncoderUpdateConfig cfg;
  cfg.use_club = club;
  EncoderOptimizers opt;
  for (auto _ : state) benchmark::DoNotOptimize(encoder_update(enc, est, batch, cfg, opt).total);
}
BENCHMARK(BM_EncoderUpdate)->Args({64, 0})->Args({64, 1});

void BM_AgentUpdate(benchmark::State& state) {
  const int per_task = static_cast<int>(state.range(0));
  Rng rng(6);
  auto actor = Actor::create(2, 8, 2, {64, 64}, rng);
  auto critic = Critic::create(2, 8, 2, {64, 64}, rng);
  const auto data = robot_datasets(8);
  std::vector<AgentBatch> parts;
  for (const auto& d : data) {
    std::vector<Transition> picked;
    for (int i = 0; i < per_task; ++i) picked.push_back(d.transitions[rng.below(d.transitions.size())]);
    parts.push_back(make_agent_batch(picked, randn(8, 1, rng).col(0)));
  }
  const auto batch = concat(parts);
  auto cfg = AgentConfig::for_family(Family::PointRobot);
  AgentOptimizers opt;
  for (auto _ : state) benchmark::DoNotOptimize(agent_update(actor, critic, batch, cfg, opt, rng).critic);
  state.SetItemsProcessed(state.iterations() * batch.size());
}
BENCHMARK(BM_AgentUpdate)->Arg(64)->Arg(256);

void BM_NonpriorCollection(benchmark::State& state) {
  Rng rng(7);
  const auto enc = ContextEncoder::create(Family::PointRobot, 8, {64, 64}, 1.0, rng);
  const auto actor = Actor::create(2, 8, 2, {64, 64}, rng);
  const auto policy = as_policy(actor);
  const auto task = sample_tasks(Family::PointRobot, 1, 1, 8).front();
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(explore_nonprior(task, policy, enc, cfg, seed++).size());
}
BENCHMARK(BM_NonpriorCollection);

}  // namespace
}  // namespace shiftlab

BENCHMARK_MAIN();
