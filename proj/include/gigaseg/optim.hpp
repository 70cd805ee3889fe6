#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "gigaseg/error.hpp"
#include "gigaseg/model.hpp"

namespace gigaseg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
  }
};

template <typename T>
struct AdamState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::uint64_t step = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

template <typename T>
AdamState<T> adam_init(const ModelParams<T>& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& g, const std::string& what) {
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!std::isfinite(static_cast<double>(g[i])))
      throw NumericError("non-finite gradient in " + what + " at element " + std::to_string(i));
}

template <typename T>
void adam_update(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, const AdamConfig& c, double bc1,
                 double bc2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1, vhat = vi / bc2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - c.lr * mhat / (std::sqrt(vhat) + c.eps));
  }
}

}  // namespace detail

// One Adam step with bias correction:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
// All gradients are checked before anything is modified.
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, const AdamConfig& c) {
  if (grads.layers.size() != params.layers.size() || state.m.layers.size() != params.layers.size())
    throw ShapeError("adam: parameter, gradient and state layer counts differ");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string tag = "L" + std::to_string(l);
    detail::require_finite(grads.layers[l].weights, tag + ".w");
    if (grads.layers[l].bias) detail::require_finite(*grads.layers[l].bias, tag + ".b");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    detail::adam_update(p.weights, g.weights, state.m.layers[l].weights, state.v.layers[l].weights, c, bc1, bc2);
    if (p.bias)
      detail::adam_update(*p.bias, *g.bias, *state.m.layers[l].bias, *state.v.layers[l].bias, c, bc1, bc2);
  }
}

}  // namespace gigaseg
