#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/rng.hpp"

namespace shiftlab {

// Feed-forward networks with hand-written backprop. Batches are column-major:
// a batch of B inputs of width n is an n x B matrix.

struct Layer {
  Eigen::MatrixXd weight;  // fan_out x fan_in
  Eigen::VectorXd bias;    // fan_out
};

class Mlp;

/// Parameter-shaped container for gradients (and Adam moments).
struct MlpGrad {
  std::vector<Layer> layers;

  static MlpGrad zeros_like(const Mlp& net);
  MlpGrad& operator+=(const MlpGrad& other);
  MlpGrad& operator*=(double scale);
  bool all_finite() const;
  double max_abs() const;
};

/// Activations recorded by a forward pass. activations[0] is the input and
/// activations.back() the output; hidden entries are post-tanh.
struct ForwardCache {
  std::uint64_t revision = 0;
  std::vector<Eigen::MatrixXd> activations;

  const Eigen::MatrixXd& output() const { return activations.back(); }
};

/// tanh hidden layers, identity output.
class Mlp {
 public:
  Mlp() = default;

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  static Mlp glorot(std::vector<int> layer_sizes, Rng& rng);
  static Mlp zeros(std::vector<int> layer_sizes);

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  const std::vector<Layer>& layers() const { return layers_; }
  /// Mutable access invalidates outstanding forward caches.
  Layer& mutable_layer(std::size_t i);
  std::size_t parameter_count() const;
  double parameter(std::size_t flat_index) const;
  void set_parameter(std::size_t flat_index, double value);
  bool all_finite() const;
  std::uint64_t revision() const { return revision_; }
  /// Marks the parameters as changed.
  void touch();

  ForwardCache forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd predict(const Eigen::VectorXd& x) const;

  /// Exact gradients of sum(output .* grad_y). grad_x, when given, receives
  /// the input gradient. Throws UsageError if the cache is stale.
  MlpGrad backward(const ForwardCache& cache, const Eigen::MatrixXd& grad_y,
                   Eigen::MatrixXd* grad_x = nullptr) const;
  /// Input gradient only.
  Eigen::MatrixXd backward_input(const ForwardCache& cache, const Eigen::MatrixXd& grad_y) const;

 private:
  void check_cache(const ForwardCache& cache, const Eigen::MatrixXd& grad_y) const;
  void check_input(const Eigen::MatrixXd& x) const;

  std::vector<int> sizes_;
  std::vector<Layer> layers_;
  std::uint64_t revision_ = 0;
};

/// Adam with bias correction.
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(const Mlp& net);

  MlpGrad first_moment;
  MlpGrad second_moment;
  long step_count = 0;
};

/// Throws TrainingError (leaving net and state untouched) if any gradient is
/// not finite.
void adam_step(Mlp& net, const MlpGrad& grads, AdamState& state, double lr);

/// target <- (1 - tau) * target + tau * online.
void polyak_blend(Mlp& target, const Mlp& online, double tau);

bool same_architecture(const Mlp& a, const Mlp& b);

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;

struct DiagGaussian {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_std;

  DiagGaussian() = default;
  /// Clamps log_std to [kLogStdMin, kLogStdMax].
  DiagGaussian(Eigen::VectorXd mean, Eigen::VectorXd log_std);
  Eigen::VectorXd std() const { return log_std.array().exp().matrix(); }
};

double gaussian_log_prob(const DiagGaussian& dist, const Eigen::VectorXd& x);
/// KL(p || q), closed form for diagonal Gaussians.
double gaussian_kl(const DiagGaussian& p, const DiagGaussian& q);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences (step h) on every parameter of `net`, compared with
/// `gradient(net)`. Relative error uses max(|a|, |n|, floor) as denominator,
/// where floor = max(1e-8, 1e4 eps max(1, |L|) / h) is the smallest magnitude
/// the difference quotient resolves to 1e-4 relative precision.
GradCheckResult grad_check(const std::function<double(const Mlp&)>& loss,
                           const std::function<MlpGrad(const Mlp&)>& gradient, const Mlp& net,
                           double h = 1e-5);

/// Flat view of a gradient in Mlp::parameter order.
double grad_entry(const MlpGrad& grad, std::size_t flat_index);

}  // namespace shiftlab
