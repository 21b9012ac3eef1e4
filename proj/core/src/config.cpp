#include "shiftlab/config.hpp"

#include <algorithm>
#include <functional>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Csro: return "csro";
    case Method::Focal: return "focal";
    case Method::CsroNoNp: return "csro_no_np";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  if (name == "csro") return Method::Csro;
  if (name == "focal" || name == "csro_no_minmi") return Method::Focal;
  if (name == "csro_no_np") return Method::CsroNoNp;
  throw ConfigError(fmt::format("--method: unknown method '{}' (expected csro, focal, csro_no_minmi or csro_no_np)", name));
}

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    if constexpr (std::is_floating_point_v<T>) {
      return static_cast<T>(textio::parse_double(value));
    } else {
      return static_cast<T>(textio::parse_int(value));
    }
  } catch (const DataError&) {
    throw ConfigError(fmt::format("--{}: '{}' is not a valid number", key, value));
  }
}

#define SHIFTLAB_INT_FIELD(name, member)                                                  \
  Field {                                                                                 \
    name, [](RunConfig& c, const std::string& v) { c.member = parse_number<int>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                       \
  }
#define SHIFTLAB_REAL_FIELD(name, member)                                                      \
  Field {                                                                                      \
    name, [](RunConfig& c, const std::string& v) { c.member = parse_number<double>(name, v); }, \
        [](const RunConfig& c) { return textio::format_double(c.member); }                     \
  }
#define SHIFTLAB_PATH_FIELD(name, member)                                       \
  Field {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.member = v; },             \
        [](const RunConfig& c) { return c.member.string(); }                    \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"family", [](RunConfig& c, const std::string& v) { c.family = parse_family(v); },
            [](const RunConfig& c) { return std::string(to_string(c.family)); }},
      Field{"method", [](RunConfig& c, const std::string& v) { c.method = parse_method(v); },
            [](const RunConfig& c) { return std::string(to_string(c.method)); }},
      Field{"seed",
            [](RunConfig& c, const std::string& v) {
              c.seeds.clear();
              for (auto part : textio::split(v, ',')) {
                const auto tok = textio::trim(part);
                if (tok.empty()) throw ConfigError("--seed: empty entry in seed list");
                const auto s = parse_number<long long>("seed", std::string(tok));
                if (s < 0) throw ConfigError("--seed: seeds must be non-negative");
                c.seeds.push_back(static_cast<std::uint64_t>(s));
              }
            },
            [](const RunConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
              return out;
            }},
      SHIFTLAB_INT_FIELD("n-train", n_train),
      SHIFTLAB_INT_FIELD("n-test", n_test),
      SHIFTLAB_INT_FIELD("episodes-per-checkpoint", episodes_per_checkpoint),
      SHIFTLAB_INT_FIELD("training-steps", training_steps),
      SHIFTLAB_INT_FIELD("meta-batch", meta_batch),
      SHIFTLAB_INT_FIELD("batch-size", batch_size),
      SHIFTLAB_INT_FIELD("embedding-batch", embedding_batch),
      SHIFTLAB_INT_FIELD("log-interval", log_interval),
      SHIFTLAB_INT_FIELD("latent-dim", latent_dim),
      SHIFTLAB_INT_FIELD("hidden", hidden),
      SHIFTLAB_INT_FIELD("encoder-hidden", encoder_hidden),
      SHIFTLAB_REAL_FIELD("lambda", lambda),
      SHIFTLAB_REAL_FIELD("beta", beta),
      SHIFTLAB_INT_FIELD("metric-power", metric_power),
      SHIFTLAB_REAL_FIELD("epsilon", epsilon),
      SHIFTLAB_REAL_FIELD("gamma", gamma),
      SHIFTLAB_REAL_FIELD("alpha", alpha),
      SHIFTLAB_REAL_FIELD("reward-scale", reward_scale),
      SHIFTLAB_REAL_FIELD("encoder-reward-divisor", encoder_reward_divisor),
      SHIFTLAB_REAL_FIELD("tau", tau),
      SHIFTLAB_INT_FIELD("club-steps", club_steps),
      Field{"club-negatives", [](RunConfig& c, const std::string& v) { c.club_negatives = parse_club_negatives(v); },
            [](const RunConfig& c) { return std::string(to_string(c.club_negatives)); }},
      SHIFTLAB_REAL_FIELD("lr-actor", lr_actor),
      SHIFTLAB_REAL_FIELD("lr-critic", lr_critic),
      SHIFTLAB_REAL_FIELD("lr-encoder", lr_encoder),
      SHIFTLAB_REAL_FIELD("lr-club", lr_club),
      Field{"regime",
            [](RunConfig& c, const std::string& v) {
              parse_context_source(v);
              c.regime = v;
            },
            [](const RunConfig& c) { return c.regime; }},
      SHIFTLAB_INT_FIELD("t-r", t_r),
      SHIFTLAB_INT_FIELD("n-c", n_c),
      SHIFTLAB_INT_FIELD("eval-episodes", eval_episodes),
      SHIFTLAB_INT_FIELD("embed-contexts", embed_contexts),
      SHIFTLAB_PATH_FIELD("data-dir", data_dir),
      SHIFTLAB_PATH_FIELD("out", out_dir),
      SHIFTLAB_PATH_FIELD("checkpoint", checkpoint_dir),
  };
  return table;
}

#undef SHIFTLAB_INT_FIELD
#undef SHIFTLAB_REAL_FIELD
#undef SHIFTLAB_PATH_FIELD

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return names;
}

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  for (auto line : textio::split(text, '\n')) {
    ++line_no;
    line = textio::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(fmt::format("config line {}: expected key=value", line_no));
    const std::string key(textio::trim(line.substr(0, eq)));
    const std::string value(textio::trim(line.substr(eq + 1)));
    if (!out.emplace(key, value).second) throw ConfigError(fmt::format("config line {}: duplicate key '{}'", line_no, key));
  }
  return out;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
  for (const auto& [k, v] : values) {
    if (std::find(keys().begin(), keys().end(), k) == keys().end()) {
      throw ConfigError(fmt::format("unknown option '{}'", k));
    }
  }
  RunConfig cfg;
  if (auto it = values.find("family"); it != values.end()) {
    try {
      cfg.family = parse_family(it->second);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("--family: {}", e.what()));
    }
  }
  const auto& tr = traits(cfg.family);
  cfg.lambda = tr.min_mi_weight;
  cfg.gamma = tr.discount;
  cfg.alpha = tr.behavior_reg;
  cfg.reward_scale = tr.reward_scale;
  cfg.t_r = tr.horizon / 4;
  for (const auto& f : fields()) {
    if (auto it = values.find(f.key); it != values.end()) {
      try {
        f.set(cfg, it->second);
      } catch (const ConfigError& e) {
        const std::string_view msg = e.what();
        if (msg.starts_with("--")) throw;
        throw ConfigError(fmt::format("--{}: {}", f.key, msg));
      }
    }
  }
  if (cfg.method == Method::Focal) {
    if (values.count("lambda") != 0u && cfg.lambda != 0.0) {
      throw ConfigError("--lambda: method focal requires lambda = 0");
    }
    cfg.lambda = 0.0;
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_text(std::string_view text) { return from_map(parse_key_values(text)); }

std::string read_config_file(const std::filesystem::path& path) {
  try {
    return textio::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(fmt::format("--config: {}", e.what()));
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) { return from_text(read_config_file(path)); }

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  auto positive = [](int v, const char* key) {
    if (v < 1) throw ConfigError(fmt::format("--{} must be positive", key));
  };
  auto positive_real = [](double v, const char* key) {
    if (!(v > 0.0)) throw ConfigError(fmt::format("--{} must be positive", key));
  };
  if (seeds.empty()) throw ConfigError("--seed: at least one seed is required");
  positive(n_train, "n-train");
  positive(n_test, "n-test");
  positive(episodes_per_checkpoint, "episodes-per-checkpoint");
  positive(training_steps, "training-steps");
  positive(meta_batch, "meta-batch");
  positive(batch_size, "batch-size");
  positive(embedding_batch, "embedding-batch");
  positive(log_interval, "log-interval");
  positive(latent_dim, "latent-dim");
  positive(hidden, "hidden");
  positive(encoder_hidden, "encoder-hidden");
  positive(club_steps, "club-steps");
  positive(n_c, "n-c");
  positive(eval_episodes, "eval-episodes");
  positive(embed_contexts, "embed-contexts");
  positive_real(beta, "beta");
  positive_real(epsilon, "epsilon");
  positive_real(reward_scale, "reward-scale");
  positive_real(encoder_reward_divisor, "encoder-reward-divisor");
  positive_real(lr_actor, "lr-actor");
  positive_real(lr_critic, "lr-critic");
  positive_real(lr_encoder, "lr-encoder");
  positive_real(lr_club, "lr-club");
  if (!(lambda >= 0.0)) throw ConfigError("--lambda must be non-negative");
  if (method == Method::Focal && lambda != 0.0) throw ConfigError("--lambda: method focal requires lambda = 0");
  if (metric_power < 2 || metric_power % 2 != 0) throw ConfigError("--metric-power must be an even positive integer");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("--gamma must lie in (0, 1)");
  if (!(alpha >= 0.0)) throw ConfigError("--alpha must be non-negative");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("--tau must lie in (0, 1]");
  const int horizon = traits(family).horizon;
  if (t_r < 0 || t_r > horizon) throw ConfigError(fmt::format("--t-r must lie in [0, {}]", horizon));
  parse_context_source(regime);
}

MetricLossConfig RunConfig::metric_config() const {
  MetricLossConfig m;
  m.beta = beta;
  m.power = metric_power;
  m.epsilon = epsilon;
  m.min_mi_weight = lambda;
  return m;
}

AgentConfig RunConfig::agent_config() const {
  AgentConfig a;
  a.gamma = gamma;
  a.alpha = alpha;
  a.tau = tau;
  a.batch_size = batch_size;
  a.meta_batch = meta_batch;
  a.reward_scale = reward_scale;
  return a;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e = EvalConfig::for_family(family);
  e.context_size = n_c;
  e.random_steps = t_r;
  e.eval_episodes = eval_episodes;
  return e;
}

}  // namespace shiftlab
