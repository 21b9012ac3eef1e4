#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "shiftlab/agent.hpp"
#include "shiftlab/encoder.hpp"
#include "shiftlab/envs.hpp"
#include "shiftlab/metatest.hpp"

namespace shiftlab {

/// csro: max-min MI encoder, non-prior test contexts.
/// focal: metric learning only (lambda = 0, no estimator updates).
/// csro_no_np: csro training, evaluated without non-prior collection.
/// csro_no_minmi is accepted as an alias of focal.
enum class Method { Csro, Focal, CsroNoNp };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

/// Every knob of an experiment. Keys are the kebab-case names used by both
/// the config file and the command-line flags.
struct RunConfig {
  Family family = Family::PointRobot;
  Method method = Method::Csro;
  std::vector<std::uint64_t> seeds{0};

  // data
  int n_train = 8;
  int n_test = 4;
  int episodes_per_checkpoint = 10;

  // training
  int training_steps = 20000;
  int meta_batch = 8;
  int batch_size = 256;
  int embedding_batch = 64;
  int log_interval = 500;
  int latent_dim = 8;
  int hidden = 64;
  int encoder_hidden = 64;
  double lambda = 25.0;
  double beta = 1.0;
  int metric_power = 2;
  double epsilon = 1e-3;
  double gamma = 0.9;
  double alpha = 0.0;
  double reward_scale = 100.0;
  double encoder_reward_divisor = 1.0;
  double tau = 0.005;
  int club_steps = 1;
  ClubNegatives club_negatives = ClubNegatives::Batch;
  double lr_actor = 3e-4;
  double lr_critic = 3e-4;
  double lr_encoder = 3e-4;
  double lr_club = 3e-4;

  // evaluation
  std::string regime = "online_nonprior";
  int t_r = 5;
  int n_c = 64;
  int eval_episodes = 5;
  int embed_contexts = 20;

  // paths
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint_dir = "";

  bool operator==(const RunConfig&) const = default;

  /// Keys absent from `values` take defaults; family-dependent defaults
  /// (lambda, gamma, alpha, reward-scale, t-r) follow the chosen family.
  /// Throws ConfigError naming the offending key.
  static RunConfig from_map(const std::map<std::string, std::string>& values);
  static RunConfig from_text(std::string_view text);
  static RunConfig from_file(const std::filesystem::path& path);
  /// One key=value per line, every field.
  std::string to_text() const;

  void validate() const;
  static const std::vector<std::string>& keys();

  MetricLossConfig metric_config() const;
  AgentConfig agent_config() const;
  EvalConfig eval_config() const;
  bool uses_club() const { return method != Method::Focal; }
};

/// Parses a key=value file body: one pair per line, '#' comments and blank
/// lines ignored.
std::map<std::string, std::string> parse_key_values(std::string_view text);

/// Reads a config file; a missing or unreadable file is a ConfigError.
std::string read_config_file(const std::filesystem::path& path);

}  // namespace shiftlab
