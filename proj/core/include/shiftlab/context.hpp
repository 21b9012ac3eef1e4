#pragma once

#include <string_view>
#include <vector>

#include "shiftlab/envs.hpp"

namespace shiftlab {

enum class ContextSource { Offline, OnlinePrior, OnlineNonprior };

std::string_view to_string(ContextSource source);
/// Throws ConfigError on an unknown name.
ContextSource parse_context_source(std::string_view name);

/// Ordered transitions used for task inference. prior_draws counts how many
/// latent vectors were sampled from the prior while collecting it.
struct Context {
  std::vector<Transition> transitions;
  ContextSource source = ContextSource::Offline;
  int prior_draws = 0;

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }
};

}  // namespace shiftlab
