#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/metatest.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

const TaskSpec kRobot{Family::PointRobot, 0.7, 2, Split::Test};

ContextEncoder random_encoder(std::uint64_t seed, Family family = Family::PointRobot) {
  Rng rng(seed);
  return ContextEncoder::create(family, 4, {16}, 1.0, rng);
}

Actor random_actor(std::uint64_t seed, Family family = Family::PointRobot) {
  Rng rng(seed);
  const auto& tr = traits(family);
  return Actor::create(tr.state_dim, 4, tr.action_dim, {16}, rng);
}

// Moves straight to the true goal and ignores the latent.
LatentPolicy oracle_policy(const TaskSpec& task) {
  return [task](const VectorXd& s, const VectorXd&, ActMode, Rng&) {
    EnvState state;
    state.x = s;
    return expert_action(task, state);
  };
}

double expert_return(const TaskSpec& task) {
  auto s = reset(task);
  double total = 0.0;
  for (int t = 0; t < traits(task.family).horizon; ++t) {
    const auto r = step(task, s, expert_action(task, s));
    total += r.reward;
    s = r.state;
  }
  return total;
}

std::set<std::string> as_set(const Context& c) {
  std::set<std::string> out;
  for (const auto& t : c.transitions) {
    out.insert(textio::format_double(t.s(0)) + "," + textio::format_double(t.s(1)) + "," +
               textio::format_double(t.a(0)) + "," + textio::format_double(t.r));
  }
  return out;
}

TEST(OfflineContext, SamplesWithoutReplacement) {
  const auto d = collect_dataset(kRobot, 10, 1);
  const auto c = sample_offline_context(d, 64, 5);
  ASSERT_EQ(c.size(), 64u);
  EXPECT_EQ(c.source, ContextSource::Offline);
  for (const auto& t : c.transitions) EXPECT_EQ(t.task_id, kRobot.task_id);
  const auto again = sample_offline_context(d, 64, 5);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(again.transitions[i], c.transitions[i]);
  EXPECT_EQ(as_set(c).size(), 64u);
}

TEST(OfflineContext, FullSizeIsWholeDataset) {
  const auto d = collect_dataset(kRobot, 1, 1);
  Context all;
  all.transitions = d.transitions;
  EXPECT_EQ(as_set(sample_offline_context(d, static_cast<int>(d.transitions.size()), 3)), as_set(all));
  try {
    sample_offline_context(d, static_cast<int>(d.transitions.size()) + 1, 3);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("N_c"), std::string::npos);
  }
}

TEST(PriorExploration, LengthAndPriorDraw) {
  const auto enc = random_encoder(1);
  const auto actor = random_actor(2);
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  const auto c = explore_prior(kRobot, as_policy(actor), enc, cfg, 3);
  EXPECT_EQ(c.size(), 40u);
  EXPECT_EQ(c.prior_draws, 1);
  EXPECT_EQ(c.source, ContextSource::OnlinePrior);
}

TEST(PriorExploration, SeedChangesLatentAndTrajectory) {
  const auto enc = random_encoder(4);
  const auto actor = random_actor(5);
  std::vector<VectorXd> seen;
  LatentPolicy spy = [&](const VectorXd& s, const VectorXd& z, ActMode mode, Rng& rng) {
    seen.push_back(z);
    return act(actor, s, z, mode, rng);
  };
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  const auto a = explore_prior(kRobot, spy, enc, cfg, 6);
  const VectorXd z0_a = seen.front();
  seen.clear();
  const auto b = explore_prior(kRobot, spy, enc, cfg, 7);
  EXPECT_NE(seen.front(), z0_a);
  EXPECT_NE(a.transitions[5].s, b.transitions[5].s);
}

TEST(NonpriorExploration, RandomPrefixIgnoresEncoderAndPolicy) {
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  const auto a1 = random_actor(8), a2 = random_actor(9);
  const auto e1 = random_encoder(10), e2 = random_encoder(11);
  const auto c1 = explore_nonprior(kRobot, as_policy(a1), e1, cfg, 12);
  const auto c2 = explore_nonprior(kRobot, as_policy(a2), e2, cfg, 12);
  ASSERT_EQ(c1.size(), 20u);
  for (int t = 0; t < cfg.random_steps; ++t) EXPECT_EQ(c1.transitions[t], c2.transitions[t]);
  EXPECT_EQ(c1.prior_draws, 0);
  EXPECT_EQ(c1.source, ContextSource::OnlineNonprior);
}

TEST(NonpriorExploration, FullRandomContextIsEncoderIndependent) {
  auto cfg = EvalConfig::for_family(Family::PointVelocity);
  cfg.random_steps = cfg.collect_steps;
  const TaskSpec vel{Family::PointVelocity, 2.0, 0, Split::Test};
  const auto c1 = explore_nonprior(vel, as_policy(random_actor(1, vel.family)), random_encoder(2, vel.family), cfg, 4);
  const auto c2 = explore_nonprior(vel, as_policy(random_actor(3, vel.family)), random_encoder(5, vel.family), cfg, 4);
  ASSERT_EQ(c1.size(), 50u);
  for (std::size_t t = 0; t < c1.size(); ++t) ASSERT_EQ(c1.transitions[t], c2.transitions[t]);
}

TEST(NonpriorExploration, PolicySeesRunningPosterior) {
  const auto enc = random_encoder(13);
  const auto actor = random_actor(14);
  std::vector<VectorXd> seen;
  LatentPolicy spy = [&](const VectorXd& s, const VectorXd& z, ActMode mode, Rng& rng) {
    seen.push_back(z);
    return act(actor, s, z, mode, rng);
  };
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  const auto c = explore_nonprior(kRobot, spy, enc, cfg, 15);
  ASSERT_EQ(seen.size(), static_cast<std::size_t>(cfg.collect_steps - cfg.random_steps));
  for (std::size_t i = 0; i < seen.size(); ++i) {
    const auto prefix = std::span(c.transitions).first(static_cast<std::size_t>(cfg.random_steps) + i);
    EXPECT_LT((seen[i] - encode_context(enc, prefix)).norm(), 1e-12);
  }
  // Rerunning reproduces the context exactly.
  const auto again = explore_nonprior(kRobot, as_policy(actor), enc, cfg, 15);
  for (std::size_t t = 0; t < c.size(); ++t) EXPECT_EQ(again.transitions[t], c.transitions[t]);
}

TEST(NonpriorExploration, EmptyPrefixRejected) {
  auto cfg = EvalConfig::for_family(Family::PointRobot);
  cfg.random_steps = 0;
  EXPECT_THROW(explore_nonprior(kRobot, as_policy(random_actor(1)), random_encoder(2), cfg, 3), UsageError);
}

TEST(Evaluate, OracleMatchesExpertReturn) {
  const auto enc = random_encoder(16);
  const auto d = collect_dataset(kRobot, 1, 2);
  const auto ctx = sample_offline_context(d, 10, 3);
  const double j = evaluate(kRobot, oracle_policy(kRobot), enc, ctx, 3, 4);
  EXPECT_NEAR(j, expert_return(kRobot), 1e-12);
  EXPECT_THROW(evaluate(kRobot, oracle_policy(kRobot), enc, Context{}, 3, 4), UsageError);
}

TEST(Evaluate, SingleEpisodeAndDeterminism) {
  const auto enc = random_encoder(17);
  const auto actor = random_actor(18);
  const auto d = collect_dataset(kRobot, 1, 2);
  const auto ctx = sample_offline_context(d, 16, 3);
  Rng rng(1);
  const double single = rollout_return(kRobot, as_policy(actor), encode_context(enc, ctx), ActMode::Deterministic, rng);
  EXPECT_DOUBLE_EQ(evaluate(kRobot, as_policy(actor), enc, ctx, 1, 9), single);
  EXPECT_EQ(evaluate(kRobot, as_policy(actor), enc, ctx, 4, 9), evaluate(kRobot, as_policy(actor), enc, ctx, 4, 9));
}

TEST(ContextShift, OracleHasNoGap) {
  const auto enc = random_encoder(19);
  const auto d = collect_dataset(kRobot, 2, 2);
  const auto rep = context_shift_gap(kRobot, oracle_policy(kRobot), enc, d, EvalConfig::for_family(kRobot.family), 5);
  EXPECT_NEAR(rep.gap_prior(), 0.0, 1e-12);
  EXPECT_NEAR(rep.gap_nonprior(), 0.0, 1e-12);
}

std::vector<Dataset> probe_datasets() {
  std::vector<Dataset> out;
  for (const auto& t : sample_tasks(Family::PointRobot, 3, 1, 2)) {
    if (t.split == Split::Train) out.push_back(collect_dataset(t, 5, 3));
  }
  return out;
}

TEST(Probe, ConstantEncoderIsChance) {
  const auto data = probe_datasets();
  const TransitionEmbedder constant = [](std::span<const Transition> ts) {
    return MatrixXd::Constant(3, static_cast<Eigen::Index>(ts.size()), 0.7);
  };
  EXPECT_NEAR(probe_policy_info(data, constant, 4), 0.25, 0.05);
}

TEST(Probe, LeakedCheckpointIsSeparable) {
  const auto data = probe_datasets();
  const TransitionEmbedder leak = [](std::span<const Transition> ts) {
    MatrixXd z = MatrixXd::Zero(4, static_cast<Eigen::Index>(ts.size()));
    for (std::size_t i = 0; i < ts.size(); ++i) z(ts[i].checkpoint_index, static_cast<Eigen::Index>(i)) = 1.0;
    return z;
  };
  EXPECT_GE(probe_policy_info(data, leak, 5), 0.99);
}

TEST(Silhouette, SeparatedAndCollapsedClusters) {
  Rng rng(6);
  MatrixXd x(40, 3);
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    for (int d = 0; d < 3; ++d) x(i, d) = 0.1 * rng.normal() + (i < 20 ? 0.0 : 50.0);
    labels.push_back(i < 20 ? 0 : 1);
  }
  EXPECT_GE(silhouette_score(x, labels), 0.9);
  EXPECT_LE(silhouette_score(MatrixXd::Ones(40, 3), labels), 0.0);
  EXPECT_THROW(silhouette_score(x, std::vector<int>(40, 0)), UsageError);
}

TEST(Pca, RankOneData) {
  MatrixXd x(30, 4);
  const VectorXd dir = (VectorXd(4) << 1, -2, 0.5, 3).finished().normalized();
  for (int i = 0; i < 30; ++i) x.row(i) = (0.3 * i - 4.0) * dir.transpose();
  VectorXd var;
  const MatrixXd p = pca_project(x, 2, &var);
  EXPECT_EQ(p.rows(), 30);
  EXPECT_LT(var(1), 1e-10);
  EXPECT_GT(var(0), 1.0);
  EXPECT_LT(p.col(1).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Embedding, ExportRowsAndDeterminism) {
  const auto enc = random_encoder(20);
  const auto actor = random_actor(21);
  const auto cfg = EvalConfig::for_family(Family::PointRobot);
  std::vector<LabeledContext> contexts;
  for (const auto& task : sample_tasks(Family::PointRobot, 1, 3, 7)) {
    for (int j = 0; j < 5; ++j) {
      contexts.push_back({task.task_id, task.param, explore_nonprior(task, as_policy(actor), enc, cfg, 100 + j)});
    }
  }
  const auto path = std::filesystem::temp_directory_path() / "shiftlab_unit_embed.txt";
  const auto rep = embed_and_project(enc, contexts, path);
  const auto lines = textio::read_lines(path);
  EXPECT_EQ(lines.size(), contexts.size() + 1);
  EXPECT_EQ(rep.projection.rows(), static_cast<Eigen::Index>(contexts.size()));
  EXPECT_EQ(rep.embeddings.cols(), 4);
  const auto again = embed_and_project(enc, contexts);
  EXPECT_EQ(serialize_embedding(again), textio::read_file(path));
  std::filesystem::remove(path);
}

TEST(MetricsRecord, LineRoundTrip) {
  MetricsRecord r{"csro", "online_nonprior", 9, 3, -6.25, {{"context_size", 20}, {"prior_draws", 0}}};
  const auto line = r.to_line();
  EXPECT_EQ(MetricsRecord::from_line(line), r);
  EXPECT_NE(line.find("avg_return="), std::string::npos);
  EXPECT_THROW(MetricsRecord::from_line("method=csro"), DataError);
}

}  // namespace
}  // namespace shiftlab
