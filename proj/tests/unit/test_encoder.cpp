#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "shiftlab/datagen.hpp"
#include "shiftlab/encoder.hpp"
#include "shiftlab/errors.hpp"

namespace shiftlab {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

Transition make_transition(VectorXd s, VectorXd a, double r, VectorXd s_next) {
  Transition t;
  t.s = std::move(s);
  t.a = std::move(a);
  t.r = r;
  t.s_next = std::move(s_next);
  t.behavior_mean = VectorXd::Zero(t.a.size());
  return t;
}

MatrixXd randn(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  return m;
}

// Four PointRobot tasks, two contexts each, 6 transitions per context.
ContextBatch small_batch(const ContextEncoder& enc, std::uint64_t seed) {
  const auto tasks = sample_tasks(Family::PointRobot, 4, 1, seed);
  std::vector<std::vector<Transition>> contexts;
  std::vector<int> labels;
  Rng rng(seed + 1);
  for (int t = 0; t < 4; ++t) {
    const auto d = collect_dataset(tasks[static_cast<std::size_t>(t)], 1, seed);
    for (int rep = 0; rep < 2; ++rep) {
      std::vector<Transition> c;
      for (int i = 0; i < 6; ++i) c.push_back(d.transitions[rng.below(d.transitions.size())]);
      contexts.push_back(std::move(c));
      labels.push_back(t);
    }
  }
  return make_context_batch(enc, contexts, labels);
}

ContextEncoder small_encoder(std::uint64_t seed) {
  Rng rng(seed);
  return ContextEncoder::create(Family::PointRobot, 3, {6}, 1.0, rng);
}

ClubEstimator small_club(std::uint64_t seed, int latent = 3) {
  Rng rng(seed);
  return ClubEstimator::create(4, latent, {5}, rng);
}

TEST(Encoder, ZeroWeightsGiveZeroEmbedding) {
  ContextEncoder enc;
  enc.net = Mlp::zeros({7, 4, 3});
  enc.latent_dim = 3;
  const auto t = make_transition(vec({1, 2}), vec({0.3, 0.1}), -2.0, vec({1.03, 2.01}));
  EXPECT_EQ(encode_transition(enc, t), VectorXd::Zero(3));
}

TEST(Encoder, GoldenEmbedding) {
  Rng rng(3);
  const auto enc = ContextEncoder::create(Family::PointRobot, 4, {8}, 1.0, rng);
  const auto t = make_transition(vec({0.1, 0.2}), vec({0.3, -0.4}), -0.5, vec({0.13, 0.16}));
  const VectorXd z = encode_transition(enc, t);
  const VectorXd expected = vec({-0.02459229067543367, -0.12854210681840114, 0.19336309783182218, -0.4049906982309116});
  EXPECT_LT((z - expected).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_EQ(encode_transition(enc, t), z);
}

TEST(Encoder, RewardDivisorScalesRewardFeature) {
  ContextEncoder enc;
  enc.net = Mlp::zeros({7, 1});
  enc.net.mutable_layer(0).weight(0, 4) = 1.0;  // reads the reward feature
  enc.latent_dim = 1;
  const auto t = make_transition(vec({0, 0}), vec({0, 0}), -3.0, vec({0, 0}));
  EXPECT_DOUBLE_EQ(encode_transition(enc, t)(0), -3.0);
  enc.reward_divisor = 100.0;
  EXPECT_DOUBLE_EQ(encode_transition(enc, t)(0), -0.03);
}

TEST(EncodeContext, MeanOfEmbeddings) {
  ContextEncoder enc;
  enc.net = Mlp::zeros({7, 2});
  enc.net.mutable_layer(0).weight(0, 0) = 1.0;
  enc.net.mutable_layer(0).weight(1, 1) = 1.0;
  enc.latent_dim = 2;
  const std::vector<Transition> c = {make_transition(vec({1, 0}), vec({0, 0}), 0, vec({1, 0})),
                                     make_transition(vec({0, 1}), vec({0, 0}), 0, vec({0, 1}))};
  const VectorXd z = encode_context(enc, c);
  EXPECT_DOUBLE_EQ(z(0), 0.5);
  EXPECT_DOUBLE_EQ(z(1), 0.5);
  EXPECT_EQ(encode_context(enc, std::span(c).first(1)), encode_transition(enc, c[0]));
  EXPECT_THROW(encode_context(enc, std::span<const Transition>{}), UsageError);
}

TEST(EncodeContext, PermutationInvariant) {
  const auto enc = small_encoder(5);
  auto d = collect_dataset({Family::PointRobot, 1.0, 0, Split::Train}, 1, 3);
  std::vector<Transition> c(d.transitions.begin(), d.transitions.begin() + 30);
  const VectorXd z = encode_context(enc, c);
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    for (std::size_t i = c.size() - 1; i > 0; --i) std::swap(c[i], c[rng.below(i + 1)]);
    EXPECT_LT((encode_context(enc, c) - z).norm(), 1e-12);
  }
}

TEST(MaxMi, Examples) {
  const MetricLossConfig cfg;
  const VectorXd a = vec({0, 0}), b = vec({1, 0});
  const std::vector<EmbeddingPair> same_equal = {{a, 1, a, 1}};
  const std::vector<EmbeddingPair> same_apart = {{a, 1, b, 1}};
  const std::vector<EmbeddingPair> diff_equal = {{a, 1, a, 2}};
  EXPECT_NEAR(loss_max_mi(same_equal, cfg), 0.0, 1e-9);
  EXPECT_NEAR(loss_max_mi(same_apart, cfg), 1.0, 1e-9);
  EXPECT_NEAR(loss_max_mi(diff_equal, cfg), 1000.0, 1e-9);
}

TEST(MaxMi, AllPairsMatchesExplicitPairs) {
  Rng rng(8);
  const MatrixXd z = randn(3, 6, rng);
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  MetricLossConfig cfg;
  std::vector<EmbeddingPair> pairs;
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) pairs.push_back({z.col(i), labels[i], z.col(j), labels[j]});
  const auto all = loss_max_mi_all_pairs(z, labels, cfg);
  EXPECT_NEAR(all.value, loss_max_mi(pairs, cfg), 1e-12);
  // Finite-difference check on the embedding gradient.
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    MatrixXd zp = z, zm = z;
    zp(i) += 1e-6;
    zm(i) -= 1e-6;
    const double numeric =
        (loss_max_mi_all_pairs(zp, labels, cfg).value - loss_max_mi_all_pairs(zm, labels, cfg).value) / 2e-6;
    EXPECT_NEAR(all.grad(i), numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
  }
}

TEST(MaxMi, RepulsionDecreasesWithDistance) {
  const MetricLossConfig cfg;
  double last = INFINITY;
  for (double d : {0.0, 0.1, 0.5, 1.0, 3.0}) {
    const std::vector<EmbeddingPair> p = {{vec({0.0}), 0, vec({d}), 1}};
    const double v = loss_max_mi(p, cfg);
    EXPECT_LT(v, last);
    last = v;
  }
}

TEST(LossVd, Examples) {
  ClubEstimator club;
  club.mean_net = Mlp::zeros({2, 1});
  club.mean_net.mutable_layer(0).bias(0) = 0.4;
  club.log_std_net = Mlp::zeros({2, 1});
  const MatrixXd x = MatrixXd::Random(2, 5);
  EXPECT_NEAR(loss_vd(club, x, MatrixXd::Constant(1, 5, 0.4)), kHalfLog2Pi, 1e-12);
  EXPECT_NEAR(loss_vd(club, x, MatrixXd::Constant(1, 5, 1.4)), kHalfLog2Pi + 0.5, 1e-12);
}

TEST(LossVd, DuplicationInvariant) {
  const auto club = small_club(2);
  Rng rng(3);
  const MatrixXd x = randn(4, 7, rng), z = randn(3, 7, rng);
  MatrixXd x2(4, 14), z2(3, 14);
  x2 << x, x;
  z2 << z, z;
  EXPECT_NEAR(loss_vd(club, x, z), loss_vd(club, x2, z2), 1e-12);
}

TEST(LossVd, GradientMatchesFiniteDifference) {
  const auto club = small_club(4);
  Rng rng(5);
  const MatrixXd x = randn(4, 9, rng), z = randn(3, 9, rng);
  ClubGrad g;
  loss_vd(club, x, z, &g);
  auto mean_res = grad_check(
      [&](const Mlp& m) { return loss_vd({m, club.log_std_net}, x, z); },
      [&](const Mlp&) { return g.mean_net; }, club.mean_net);
  auto std_res = grad_check(
      [&](const Mlp& m) { return loss_vd({club.mean_net, m}, x, z); },
      [&](const Mlp&) { return g.log_std_net; }, club.log_std_net);
  EXPECT_LT(mean_res.max_relative_error, 1e-4);
  EXPECT_LT(std_res.max_relative_error, 1e-4);
}

TEST(MinMi, ConstantHeadsGiveZero) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    ClubEstimator club;
    club.mean_net = Mlp::zeros({4, 3});
    club.log_std_net = Mlp::zeros({4, 3});
    for (int d = 0; d < 3; ++d) {
      club.mean_net.mutable_layer(0).bias(d) = rng.normal();
      club.log_std_net.mutable_layer(0).bias(d) = rng.uniform(-1, 1);
    }
    const MatrixXd x = randn(4, 10, rng), z = randn(3, 10, rng);
    EXPECT_NEAR(loss_min_mi(club, x, z).value, 0.0, 1e-10);
  }
}

TEST(MinMi, TwoSampleExample) {
  ClubEstimator club;
  club.mean_net = Mlp::zeros({1, 1});
  club.mean_net.mutable_layer(0).weight(0, 0) = 1.0;
  club.log_std_net = Mlp::zeros({1, 1});
  MatrixXd x(1, 2), z(1, 2);
  x << 0, 1;
  z << 0, 1;
  EXPECT_NEAR(loss_min_mi(club, x, z).value, 0.25, 1e-12);
  EXPECT_THROW(loss_min_mi(club, x.leftCols(1), z.leftCols(1)), UsageError);
}

TEST(MinMi, MatchesNaiveDoubleSumAndIsPermutationInvariant) {
  const auto club = small_club(7);
  Rng rng(8);
  const int b = 9;
  const MatrixXd x = randn(4, b, rng), z = randn(3, b, rng);
  const MatrixXd mu = club.mean_net.predict(x);
  const MatrixXd ls = club.log_std_net.predict(x).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  double naive = 0.0;
  for (int i = 0; i < b; ++i) {
    const DiagGaussian q(mu.col(i), ls.col(i));
    double neg = 0.0;
    for (int j = 0; j < b; ++j) neg += gaussian_log_prob(q, z.col(j));
    naive += gaussian_log_prob(q, z.col(i)) - neg / b;
  }
  naive /= b;
  const double fast = loss_min_mi(club, x, z).value;
  EXPECT_NEAR(fast, naive, 1e-10);
  std::vector<int> perm(b);
  for (int i = 0; i < b; ++i) perm[i] = (i * 4 + 3) % b;
  MatrixXd xp(4, b), zp(3, b);
  for (int i = 0; i < b; ++i) {
    xp.col(i) = x.col(perm[i]);
    zp.col(i) = z.col(perm[i]);
  }
  EXPECT_NEAR(loss_min_mi(club, xp, zp).value, fast, 1e-12);
}

TEST(MinMiByTask, SingleLabelMatchesBatchContrast) {
  const auto club = small_club(40);
  Rng rng(41);
  const MatrixXd x = randn(4, 7, rng), z = randn(3, 7, rng);
  const std::vector<int> labels(7, 2);
  const auto grouped = loss_min_mi_by_task(club, x, z, labels);
  const auto whole = loss_min_mi(club, x, z);
  EXPECT_NEAR(grouped.value, whole.value, 1e-12);
  EXPECT_LT((grouped.grad - whole.grad).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MinMiByTask, SizeWeightedMeanOfGroups) {
  const auto club = small_club(42);
  Rng rng(43);
  const MatrixXd x = randn(4, 8, rng), z = randn(3, 8, rng);
  // Interleaved labels: columns 0, 2, 4 belong to task 5, the rest to task 1.
  const std::vector<int> labels = {5, 1, 5, 1, 5, 1, 1, 1};
  MatrixXd xa(4, 3), za(3, 3), xb(4, 5), zb(3, 5);
  int ia = 0, ib = 0;
  for (int i = 0; i < 8; ++i) {
    if (labels[static_cast<std::size_t>(i)] == 5) {
      xa.col(ia) = x.col(i);
      za.col(ia++) = z.col(i);
    } else {
      xb.col(ib) = x.col(i);
      zb.col(ib++) = z.col(i);
    }
  }
  const auto a = loss_min_mi(club, xa, za);
  const auto b = loss_min_mi(club, xb, zb);
  const auto grouped = loss_min_mi_by_task(club, x, z, labels);
  EXPECT_NEAR(grouped.value, (3.0 * a.value + 5.0 * b.value) / 8.0, 1e-12);
  EXPECT_LT((grouped.grad.col(2) - 3.0 / 8.0 * a.grad.col(1)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((grouped.grad.col(7) - 5.0 / 8.0 * b.grad.col(4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(loss_min_mi_by_task(club, x, z, std::vector<int>(7, 0)), UsageError);
  EXPECT_THROW(loss_min_mi_by_task(club, x, z, std::vector<int>{0, 0, 0, 0, 0, 0, 0, 1}), UsageError);
}

TEST(MinMiByTask, NegativeSchemeNames) {
  EXPECT_EQ(parse_club_negatives("batch"), ClubNegatives::Batch);
  EXPECT_EQ(parse_club_negatives("task"), ClubNegatives::SameTask);
  EXPECT_EQ(to_string(ClubNegatives::SameTask), "task");
  EXPECT_THROW(parse_club_negatives("tasks"), ConfigError);
}

TEST(EncoderLoss, TotalIsMaxPlusWeightedMin) {
  const auto enc = small_encoder(11);
  const auto club = small_club(12);
  const auto batch = small_batch(enc, 13);
  EncoderUpdateConfig cfg;
  cfg.metric.min_mi_weight = 25.0;
  const auto rep = encoder_loss(enc, club, batch, cfg, nullptr);
  ASSERT_TRUE(rep.min_mi.has_value());
  EXPECT_NEAR(rep.total, rep.max_mi + 25.0 * *rep.min_mi, 1e-12);
  EXPECT_EQ(rep.context_means.cols(), 8);
}

TEST(EncoderLoss, ZeroLambdaMatchesPureMetricGradient) {
  const auto enc = small_encoder(14);
  const auto club = small_club(15);
  const auto batch = small_batch(enc, 16);
  EncoderUpdateConfig with_club;
  with_club.metric.min_mi_weight = 0.0;
  EncoderUpdateConfig metric_only = with_club;
  metric_only.use_club = false;
  MlpGrad g1, g2;
  encoder_loss(enc, club, batch, with_club, &g1);
  const auto rep = encoder_loss(enc, club, batch, metric_only, &g2);
  EXPECT_FALSE(rep.min_mi.has_value());
  for (std::size_t l = 0; l < g1.layers.size(); ++l) {
    EXPECT_EQ(g1.layers[l].weight, g2.layers[l].weight);
    EXPECT_EQ(g1.layers[l].bias, g2.layers[l].bias);
  }
}

TEST(EncoderLoss, MetricGradientThroughEncoder) {
  const auto enc = small_encoder(17);
  const auto club = small_club(18);
  const auto batch = small_batch(enc, 19);
  EncoderUpdateConfig cfg;
  cfg.use_club = false;
  const auto res = grad_check(
      [&](const Mlp& net) {
        ContextEncoder e = enc;
        e.net = net;
        return encoder_loss(e, club, batch, cfg, nullptr).total;
      },
      [&](const Mlp& net) {
        ContextEncoder e = enc;
        e.net = net;
        MlpGrad g;
        encoder_loss(e, club, batch, cfg, &g);
        return g;
      },
      enc.net);
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_index << " " << res.analytic << " " << res.numeric;
}

TEST(EncoderLoss, MinMiGradientThroughEncoder) {
  const auto enc = small_encoder(20);
  const auto club = small_club(21);
  const auto batch = small_batch(enc, 22);
  auto loss = [&](const Mlp& net) { return loss_min_mi(club, batch.state_action, net.predict(batch.encoder_input)).value; };
  const auto res = grad_check(loss,
                              [&](const Mlp& net) {
                                const auto cache = net.forward(batch.encoder_input);
                                return net.backward(cache, loss_min_mi(club, batch.state_action, cache.output()).grad);
                              },
                              enc.net);
  EXPECT_LT(res.max_relative_error, 1e-4);
}

TEST(EncoderLoss, SameTaskNegativesGradientThroughEncoder) {
  const auto enc = small_encoder(44);
  const auto club = small_club(45);
  const auto batch = small_batch(enc, 46);
  EncoderUpdateConfig cfg;
  cfg.negatives = ClubNegatives::SameTask;
  const auto res = grad_check(
      [&](const Mlp& net) {
        ContextEncoder e = enc;
        e.net = net;
        return encoder_loss(e, club, batch, cfg, nullptr).total;
      },
      [&](const Mlp& net) {
        ContextEncoder e = enc;
        e.net = net;
        MlpGrad g;
        encoder_loss(e, club, batch, cfg, &g);
        return g;
      },
      enc.net);
  EXPECT_LT(res.max_relative_error, 1e-4);
  EncoderUpdateConfig batch_cfg;
  EXPECT_NE(*encoder_loss(enc, club, batch, cfg, nullptr).min_mi, *encoder_loss(enc, club, batch, batch_cfg, nullptr).min_mi);
}

TEST(EncoderUpdate, NeedsTwoTasks) {
  auto enc = small_encoder(23);
  auto club = small_club(24);
  auto batch = small_batch(enc, 25);
  std::fill(batch.labels.begin(), batch.labels.end(), 0);
  EncoderUpdateConfig cfg;
  EncoderOptimizers opt;
  EXPECT_THROW(encoder_update(enc, club, batch, cfg, opt), UsageError);
}

TEST(EncoderUpdate, FocalLeavesEstimatorUntouched) {
  auto enc = small_encoder(26);
  auto club = small_club(27);
  const auto before = club;
  const auto batch = small_batch(enc, 28);
  EncoderUpdateConfig cfg;
  cfg.use_club = false;
  cfg.metric.min_mi_weight = 0.0;
  EncoderOptimizers opt;
  opt.encoder.lr = 1e-3;
  const auto rep = encoder_update(enc, club, batch, cfg, opt);
  EXPECT_FALSE(rep.vd.has_value());
  EXPECT_FALSE(rep.min_mi.has_value());
  for (std::size_t k = 0; k < club.mean_net.parameter_count(); ++k) {
    ASSERT_EQ(club.mean_net.parameter(k), before.mean_net.parameter(k));
  }
}

TEST(EncoderUpdate, MetricLossDecreasesOnFixedBatch) {
  auto enc = small_encoder(29);
  auto club = small_club(30);
  const auto batch = small_batch(enc, 31);
  EncoderUpdateConfig cfg;
  cfg.use_club = false;
  cfg.metric.min_mi_weight = 0.0;
  EncoderOptimizers opt;
  opt.encoder.lr = 3e-3;
  const double first = encoder_update(enc, club, batch, cfg, opt).max_mi;
  double last = first;
  for (int i = 0; i < 300; ++i) last = encoder_update(enc, club, batch, cfg, opt).max_mi;
  EXPECT_LT(last, 0.5 * first);
}

TEST(FitClub, LeakedLatentIsDetected) {
  // z copies the action, so q(z | s, a) can fit it and the MI bound is positive.
  Rng rng(32);
  const int b = 256;
  MatrixXd x = randn(4, b, rng);
  const MatrixXd z = x.bottomRows(2);
  Rng init(33);
  auto club = ClubEstimator::create(4, 2, {16}, init);
  ClubOptimizers opt;
  opt.mean.lr = 3e-3;
  opt.log_std.lr = 3e-3;
  std::vector<double> trace;
  for (int w = 0; w < 4; ++w) trace.push_back(fit_club(club, opt, x, z, 50, 64, rng));
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LT(trace[i], trace[i - 1]);
  EXPECT_GT(club_mi_estimate(club, x, z), 0.0);
}

TEST(MetricConfig, Validation) {
  MetricLossConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.power = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.power = 2;
  cfg.epsilon = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace shiftlab
