#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "gigaseg/tensor.hpp"

namespace gigaseg {

inline constexpr double kBceEpsilon = 1e-7;

// Mean binary cross-entropy over every element, predictions clamped to
// [eps, 1 - eps].
template <typename T>
double bce_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = kBceEpsilon) {
  if (pred.shape() != target.shape())
    throw ShapeError("bce shape mismatch: prediction " + pred.shape().str() + ", target " +
                     target.shape().str());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), eps, 1.0 - eps);
    const double t = static_cast<double>(target[i]);
    sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(pred.size());
}

// d(scale * bce)/d(pred). Zero where the clamp is active, matching the
// derivative of the clamped expression.
template <typename T>
Tensor<T> bce_grad(const Tensor<T>& pred, const Tensor<T>& target, double eps = kBceEpsilon,
                   double scale = 1.0) {
  if (pred.shape() != target.shape())
    throw ShapeError("bce shape mismatch: prediction " + pred.shape().str() + ", target " +
                     target.shape().str());
  Tensor<T> g(pred.shape());
  const double k = scale / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = static_cast<double>(pred[i]);
    if (p < eps || p > 1.0 - eps) continue;
    const double t = static_cast<double>(target[i]);
    g[i] = static_cast<T>(k * (-t / p + (1.0 - t) / (1.0 - p)));
  }
  return g;
}

}  // namespace gigaseg
