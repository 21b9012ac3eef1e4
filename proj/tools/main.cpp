// shiftlab: data generation, meta-training, evaluation, probing and
// embedding export for the toy point environments.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "shiftlab/config.hpp"
#include "shiftlab/errors.hpp"
#include "shiftlab/experiment.hpp"

namespace {

struct Verb {
  const char* name;
  const char* help;
  bool needs_seed;
};

constexpr Verb kVerbs[] = {
    {"gen-data", "Sample tasks and roll out the offline datasets", false},
    {"train", "Meta-train encoder, estimator and actor-critic", true},
    {"eval", "Evaluate checkpoints on test tasks under a context regime", true},
    {"probe", "Probe embeddings for behaviour-policy information", false},
    {"embed", "Export non-prior context embeddings and their 2-D projection", false},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline meta-RL lab for context-shift experiments"};
  app.require_subcommand(1);

  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::string> config_files;
  std::vector<CLI::App*> subs;
  for (const auto& verb : kVerbs) {
    auto* sub = app.add_subcommand(verb.name, verb.help);
    sub->add_option("--config", config_files[verb.name], "key=value file; command-line flags override it");
    for (const auto& key : shiftlab::RunConfig::keys()) {
      sub->add_option("--" + key, values[verb.name][key]);
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return shiftlab::kExitUsage;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    auto* sub = subs[i];
    if (!sub->parsed()) continue;
    const auto& verb = kVerbs[i];
    try {
      std::map<std::string, std::string> merged;
      if (const auto& path = config_files[verb.name]; !path.empty()) {
        merged = shiftlab::parse_key_values(shiftlab::read_config_file(path));
      }
      for (const auto& key : shiftlab::RunConfig::keys()) {
        if (sub->count("--" + key) > 0) merged[key] = values[verb.name][key];
      }
      if (verb.needs_seed && merged.count("seed") == 0u) {
        throw shiftlab::ConfigError(fmt::format("--seed is required for {}", verb.name));
      }
      const auto cfg = shiftlab::RunConfig::from_map(merged);
      return shiftlab::run_verb(verb.name, cfg, std::cout, std::cerr);
    } catch (...) {
      return shiftlab::exit_code_for_current_exception(std::cerr);
    }
  }
  return shiftlab::kExitUsage;
}
