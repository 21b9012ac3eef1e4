#include "shiftlab/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"

namespace shiftlab {

namespace {

std::uint64_t next_revision() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// Locates flat index k as (layer, is_bias, row, col). Weights are enumerated
// column-major per layer, followed by the bias.
struct FlatPos {
  std::size_t layer;
  bool bias;
  Eigen::Index row;
  Eigen::Index col;
};

FlatPos locate(const std::vector<Layer>& layers, std::size_t k) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const auto nw = static_cast<std::size_t>(L.weight.size());
    if (k < nw) {
      const auto rows = static_cast<std::size_t>(L.weight.rows());
      return {l, false, static_cast<Eigen::Index>(k % rows), static_cast<Eigen::Index>(k / rows)};
    }
    k -= nw;
    const auto nb = static_cast<std::size_t>(L.bias.size());
    if (k < nb) return {l, true, static_cast<Eigen::Index>(k), 0};
    k -= nb;
  }
  throw UsageError("parameter index out of range");
}

}  // namespace

MlpGrad MlpGrad::zeros_like(const Mlp& net) {
  MlpGrad g;
  g.layers.reserve(net.layers().size());
  for (const auto& L : net.layers()) {
    g.layers.push_back({Eigen::MatrixXd::Zero(L.weight.rows(), L.weight.cols()),
                        Eigen::VectorXd::Zero(L.bias.size())});
  }
  return g;
}

MlpGrad& MlpGrad::operator+=(const MlpGrad& other) {
  if (other.layers.size() != layers.size()) throw UsageError("gradient shapes disagree");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += other.layers[l].weight;
    layers[l].bias += other.layers[l].bias;
  }
  return *this;
}

MlpGrad& MlpGrad::operator*=(double scale) {
  for (auto& L : layers) {
    L.weight *= scale;
    L.bias *= scale;
  }
  return *this;
}

bool MlpGrad::all_finite() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const Layer& L) { return L.weight.allFinite() && L.bias.allFinite(); });
}

double MlpGrad::max_abs() const {
  double m = 0.0;
  for (const auto& L : layers) {
    if (L.weight.size() > 0) m = std::max(m, L.weight.cwiseAbs().maxCoeff());
    if (L.bias.size() > 0) m = std::max(m, L.bias.cwiseAbs().maxCoeff());
  }
  return m;
}

Mlp Mlp::zeros(std::vector<int> layer_sizes) {
  if (layer_sizes.size() < 2) throw UsageError("an Mlp needs at least two layer sizes");
  for (int s : layer_sizes) {
    if (s < 1) throw UsageError("layer sizes must be positive");
  }
  Mlp net;
  net.sizes_ = std::move(layer_sizes);
  for (std::size_t l = 0; l + 1 < net.sizes_.size(); ++l) {
    net.layers_.push_back({Eigen::MatrixXd::Zero(net.sizes_[l + 1], net.sizes_[l]),
                           Eigen::VectorXd::Zero(net.sizes_[l + 1])});
  }
  net.touch();
  return net;
}

Mlp Mlp::glorot(std::vector<int> layer_sizes, Rng& rng) {
  Mlp net = zeros(std::move(layer_sizes));
  for (auto& L : net.layers_) {
    const double limit = std::sqrt(6.0 / static_cast<double>(L.weight.rows() + L.weight.cols()));
    for (Eigen::Index c = 0; c < L.weight.cols(); ++c) {
      for (Eigen::Index r = 0; r < L.weight.rows(); ++r) L.weight(r, c) = rng.uniform(-limit, limit);
    }
  }
  net.touch();
  return net;
}

Layer& Mlp::mutable_layer(std::size_t i) {
  touch();
  return layers_.at(i);
}

void Mlp::touch() { revision_ = next_revision(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& L : layers_) n += static_cast<std::size_t>(L.weight.size() + L.bias.size());
  return n;
}

double Mlp::parameter(std::size_t k) const {
  const auto p = locate(layers_, k);
  return p.bias ? layers_[p.layer].bias(p.row) : layers_[p.layer].weight(p.row, p.col);
}

void Mlp::set_parameter(std::size_t k, double value) {
  const auto p = locate(layers_, k);
  if (p.bias) {
    layers_[p.layer].bias(p.row) = value;
  } else {
    layers_[p.layer].weight(p.row, p.col) = value;
  }
  touch();
}

bool Mlp::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(),
                     [](const Layer& L) { return L.weight.allFinite() && L.bias.allFinite(); });
}

void Mlp::check_input(const Eigen::MatrixXd& x) const {
  if (layers_.empty()) throw UsageError("forward on an empty Mlp");
  if (x.rows() != input_dim()) {
    throw UsageError(fmt::format("Mlp input has {} rows, expected {}", x.rows(), input_dim()));
  }
}

namespace {

// tanh(x) = 1 - 2 / (exp(2x) + 1), which vectorises through Eigen's packet exp.
// Absolute error stays within a few ulps of 1; saturates cleanly at +-1.
void tanh_in_place(Eigen::MatrixXd& h) {
  h = 1.0 - 2.0 / ((2.0 * h.array()).exp() + 1.0);
}

}  // namespace

ForwardCache Mlp::forward(const Eigen::MatrixXd& x) const {
  check_input(x);
  ForwardCache cache;
  cache.revision = revision_;
  cache.activations.reserve(layers_.size() + 1);
  cache.activations.push_back(x);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd h = layers_[l].weight * cache.activations.back();
    h.colwise() += layers_[l].bias;
    if (l + 1 < layers_.size()) tanh_in_place(h);
    cache.activations.push_back(std::move(h));
  }
  return cache;
}

Eigen::MatrixXd Mlp::predict(const Eigen::MatrixXd& x) const {
  check_input(x);
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd next = layers_[l].weight * h;
    next.colwise() += layers_[l].bias;
    if (l + 1 < layers_.size()) tanh_in_place(next);
    h = std::move(next);
  }
  return h;
}

Eigen::VectorXd Mlp::predict(const Eigen::VectorXd& x) const {
  return predict(Eigen::MatrixXd(x)).col(0);
}

void Mlp::check_cache(const ForwardCache& cache, const Eigen::MatrixXd& grad_y) const {
  if (cache.revision != revision_ || cache.activations.size() != layers_.size() + 1) {
    throw UsageError("stale forward cache: parameters changed since the forward pass");
  }
  if (grad_y.rows() != output_dim() || grad_y.cols() != cache.output().cols()) {
    throw UsageError(fmt::format("grad_y is {}x{}, expected {}x{}", grad_y.rows(), grad_y.cols(),
                                 output_dim(), cache.output().cols()));
  }
}

MlpGrad Mlp::backward(const ForwardCache& cache, const Eigen::MatrixXd& grad_y,
                      Eigen::MatrixXd* grad_x) const {
  check_cache(cache, grad_y);
  MlpGrad grads;
  grads.layers.resize(layers_.size());
  Eigen::MatrixXd delta = grad_y;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Eigen::MatrixXd& input = cache.activations[l];
    grads.layers[l].weight.noalias() = delta * input.transpose();
    grads.layers[l].bias = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd upstream = layers_[l].weight.transpose() * delta;
      delta = upstream.array() * (1.0 - input.array().square());
    } else if (grad_x != nullptr) {
      *grad_x = layers_[0].weight.transpose() * delta;
    }
  }
  return grads;
}

Eigen::MatrixXd Mlp::backward_input(const ForwardCache& cache, const Eigen::MatrixXd& grad_y) const {
  check_cache(cache, grad_y);
  Eigen::MatrixXd delta = grad_y;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    Eigen::MatrixXd upstream = layers_[l].weight.transpose() * delta;
    if (l == 0) return upstream;
    delta = upstream.array() * (1.0 - cache.activations[l].array().square());
  }
  return delta;
}

AdamState::AdamState(const Mlp& net)
    : first_moment(MlpGrad::zeros_like(net)), second_moment(MlpGrad::zeros_like(net)) {}

void adam_step(Mlp& net, const MlpGrad& grads, AdamState& state, double lr) {
  if (!(lr >= 0.0)) throw UsageError("learning rate must be non-negative");
  if (grads.layers.size() != net.layers().size()) throw UsageError("gradient shapes disagree with net");
  if (!grads.all_finite()) {
    throw TrainingError(fmt::format("non-finite gradient at optimizer step {}", state.step_count + 1));
  }
  if (state.first_moment.layers.empty()) state = AdamState(net);
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = AdamState::kBeta1 * m + (1.0 - AdamState::kBeta1) * g;
    v = AdamState::kBeta2 * v + (1.0 - AdamState::kBeta2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::kEpsilon);
  };
  for (std::size_t l = 0; l < grads.layers.size(); ++l) {
    Layer& L = net.mutable_layer(l);
    update(L.weight, state.first_moment.layers[l].weight, state.second_moment.layers[l].weight,
           grads.layers[l].weight);
    update(L.bias, state.first_moment.layers[l].bias, state.second_moment.layers[l].bias,
           grads.layers[l].bias);
  }
}

bool same_architecture(const Mlp& a, const Mlp& b) { return a.layer_sizes() == b.layer_sizes(); }

void polyak_blend(Mlp& target, const Mlp& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("polyak tau must lie in [0, 1]");
  if (!same_architecture(target, online)) throw UsageError("polyak_blend: architectures differ");
  if (tau == 0.0) return;
  for (std::size_t l = 0; l < online.layers().size(); ++l) {
    Layer& T = target.mutable_layer(l);
    const Layer& O = online.layers()[l];
    if (tau == 1.0) {
      T = O;
    } else {
      T.weight = (1.0 - tau) * T.weight + tau * O.weight;
      T.bias = (1.0 - tau) * T.bias + tau * O.bias;
    }
  }
}

DiagGaussian::DiagGaussian(Eigen::VectorXd mean_in, Eigen::VectorXd log_std_in)
    : mean(std::move(mean_in)), log_std(log_std_in.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax)) {
  if (mean.size() != log_std.size()) throw UsageError("DiagGaussian: mean and log_std sizes differ");
}

double gaussian_log_prob(const DiagGaussian& dist, const Eigen::VectorXd& x) {
  if (x.size() != dist.mean.size()) throw UsageError("gaussian_log_prob: dimension mismatch");
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double z = (x[d] - dist.mean[d]) / std::exp(dist.log_std[d]);
    total += -half_log_2pi - dist.log_std[d] - 0.5 * z * z;
  }
  return total;
}

double gaussian_kl(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.mean.size() != q.mean.size()) throw UsageError("gaussian_kl: dimension mismatch");
  double total = 0.0;
  for (Eigen::Index d = 0; d < p.mean.size(); ++d) {
    const double var_p = std::exp(2.0 * p.log_std[d]);
    const double var_q = std::exp(2.0 * q.log_std[d]);
    const double diff = p.mean[d] - q.mean[d];
    total += (q.log_std[d] - p.log_std[d]) + (var_p + diff * diff) / (2.0 * var_q) - 0.5;
  }
  return total;
}

double grad_entry(const MlpGrad& grad, std::size_t k) {
  const auto p = locate(grad.layers, k);
  return p.bias ? grad.layers[p.layer].bias(p.row) : grad.layers[p.layer].weight(p.row, p.col);
}

GradCheckResult grad_check(const std::function<double(const Mlp&)>& loss,
                           const std::function<MlpGrad(const Mlp&)>& gradient, const Mlp& net,
                           double h) {
  GradCheckResult result;
  const MlpGrad analytic = gradient(net);
  // Central differences carry roundoff of order eps * |L| / h, so they cannot
  // resolve a relative error of 1e-4 on entries smaller than 1e4 times that.
  // Such entries (e.g. exactly-zero gradients of invariant losses) are
  // measured against this resolution instead of against themselves.
  const double noise_floor =
      std::max(1e-8, 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss(net))) / h);
  Mlp probe = net;
  for (std::size_t k = 0; k < net.parameter_count(); ++k) {
    const double original = net.parameter(k);
    probe.set_parameter(k, original + h);
    const double plus = loss(probe);
    probe.set_parameter(k, original - h);
    const double minus = loss(probe);
    probe.set_parameter(k, original);
    const double numeric = (plus - minus) / (2.0 * h);
    const double a = grad_entry(analytic, k);
    const double denom = std::max({std::abs(a), std::abs(numeric), noise_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_relative_error) result = {rel, k, a, numeric};
  }
  return result;
}

}  // namespace shiftlab
