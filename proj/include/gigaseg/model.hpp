#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gigaseg/arch.hpp"
#include "gigaseg/autodiff.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

// Witness returned by search_architecture(ArchConstraints{}); committed so runs
// stay comparable across machines. tests/test_arch.cpp re-runs the search.
inline constexpr const char* kPinnedArchText =
    "arch v1\n"
    "layer 0 encoder conv k=8x8 s=8 in=1 out=6 bias=1 act=relu\n"
    "layer 1 encoder conv k=8x8 s=2 in=6 out=4 bias=1 act=relu\n"
    "layer 2 encoder conv k=1x1 s=1 in=4 out=27 bias=1 act=relu\n"
    "layer 3 decoder tconv k=1x1 s=1 in=27 out=4 bias=1 act=relu\n"
    "layer 4 decoder tconv k=8x8 s=2 in=4 out=6 bias=1 act=relu\n"
    "layer 5 decoder tconv k=8x8 s=8 in=6 out=2 bias=1 act=relu\n"
    "layer 6 head conv k=1x1 s=1 in=2 out=1 bias=1 act=sigmoid\n"
    "skip 0 4\n"
    "skip 1 3\n";

inline const ArchSpec& pinned_arch() {
  static const ArchSpec arch = arch_from_text(kPinnedArchText);
  return arch;
}

template <typename T>
struct LayerParams {
  Tensor<T> weights;
  std::optional<Tensor<T>> bias;  // shape (1, out, 1, 1)
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename T>
struct ModelParams {
  ArchSpec arch;
  std::vector<LayerParams<T>> layers;
  std::uint64_t seed = 0;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + (l.bias ? l.bias->size() : 0);
    return n;
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z;
  z.arch = p.arch;
  z.seed = p.seed;
  for (const auto& l : p.layers) {
    LayerParams<T> lz{Tensor<T>(l.weights.shape()), std::nullopt};
    if (l.bias) lz.bias = Tensor<T>(l.bias->shape());
    z.layers.push_back(std::move(lz));
  }
  return z;
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out;
  out.arch = p.arch;
  out.seed = p.seed;
  for (const auto& l : p.layers) {
    LayerParams<U> lu{l.weights.template cast<U>(), std::nullopt};
    if (l.bias) lu.bias = l.bias->template cast<U>();
    out.layers.push_back(std::move(lu));
  }
  return out;
}

// Number of taps that reach one output pixel.
inline std::size_t fan_in(const ConvSpec& c) {
  if (!c.transposed) return c.in_channels * c.kernel_h * c.kernel_w;
  const auto taps = [&](std::size_t k) { return (k + c.stride - 1) / c.stride; };
  return c.in_channels * taps(c.kernel_h) * taps(c.kernel_w);
}

inline std::size_t fan_out(const ConvSpec& c) {
  if (c.transposed) return c.out_channels * c.kernel_h * c.kernel_w;
  const auto taps = [&](std::size_t k) { return (k + c.stride - 1) / c.stride; };
  return c.out_channels * taps(c.kernel_h) * taps(c.kernel_w);
}

// He-normal weights for ReLU layers, Glorot-normal for the sigmoid head, zero
// biases. Draws run layer by layer in storage order from one mt19937_64.
template <typename T>
ModelParams<T> init_params(const ArchSpec& arch, std::uint64_t seed) {
  validate_arch(arch);
  ModelParams<T> p;
  p.arch = arch;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& l : arch.layers) {
    const double fi = static_cast<double>(fan_in(l.conv));
    const double fo = static_cast<double>(fan_out(l.conv));
    const double stddev = l.act == Activation::Relu ? std::sqrt(2.0 / fi) : std::sqrt(2.0 / (fi + fo));
    std::normal_distribution<double> dist(0.0, stddev);
    LayerParams<T> lp{Tensor<T>(l.conv.weight_shape()), std::nullopt};
    for (std::size_t i = 0; i < lp.weights.size(); ++i) lp.weights[i] = static_cast<T>(dist(rng));
    if (l.conv.has_bias) lp.bias = Tensor<T>(Shape{1, l.conv.out_channels, 1, 1});
    p.layers.push_back(std::move(lp));
  }
  return p;
}

// Records the network on a tape, starting from `input`. Node labels follow
// "L<i>.<w|b|conv|add|relu|sigmoid>"; the memory planner relies on the same
// names and release order. Gradients accumulate into `grads` when given.
template <typename T>
NodeId build_forward(Tape<T>& tape, const ModelParams<T>& params, ModelParams<T>* grads, NodeId input) {
  const ArchSpec& arch = params.arch;
  const std::size_t L = arch.layers.size();
  // Forward consumers left per layer activation: the next layer plus skips.
  std::vector<std::size_t> pending(L, 0);
  for (std::size_t i = 0; i + 1 < L; ++i) pending[i] = 1;
  for (const auto& s : arch.skips) ++pending[s.source];
  std::vector<NodeId> act(L);

  auto consume = [&](std::size_t layer) {
    if (--pending[layer] == 0) tape.release(act[layer]);
  };

  NodeId h = input;
  for (std::size_t i = 0; i < L; ++i) {
    const std::string tag = "L" + std::to_string(i);
    const auto& lp = params.layers[i];
    LayerParams<T>* lg = grads ? &grads->layers[i] : nullptr;
    const NodeId w = tape.param(lp.weights, lg ? &lg->weights : nullptr, tag + ".w");
    std::optional<NodeId> b;
    if (lp.bias) b = tape.param(*lp.bias, lg ? &*lg->bias : nullptr, tag + ".b");
    NodeId z = tape.conv(h, w, b, arch.layers[i].conv, tag + ".conv");
    if (i == 0) tape.release(input);
    else consume(i - 1);
    for (std::size_t src : arch.skip_sources_into(i)) {
      const NodeId sum = tape.add(z, act[src], tag + ".add");
      tape.release(z);
      consume(src);
      z = sum;
    }
    act[i] = arch.layers[i].act == Activation::Relu ? tape.relu(z, tag + ".relu")
                                                    : tape.sigmoid(z, tag + ".sigmoid");
    tape.release(z);
    h = act[i];
  }
  return h;
}

// One training-mode pass: forward, mean BCE against `target`, backward.
// Parameter gradients are added into `grads`; the tape's memory trace is
// copied to *trace when given. Returns the loss.
template <typename T>
double loss_and_grads(const ModelParams<T>& params, Tensor<T> image, Tensor<T> target,
                      ModelParams<T>& grads, const ExecPolicy& policy = {},
                      std::vector<MemoryEvent>* trace = nullptr) {
  if (image.shape().c != 1)
    throw ShapeError("model input must have 1 channel, got " + std::to_string(image.shape().c));
  if (target.shape() != image.shape())
    throw ShapeError("target shape " + target.shape().str() + " != image shape " + image.shape().str());
  infer_dims(params.arch, image.shape().h, image.shape().w);
  Tape<T> tape(policy, true);
  const NodeId in = tape.input(std::move(image), "input");
  const NodeId tgt = tape.input(std::move(target), "target");
  const NodeId out = build_forward(tape, params, &grads, in);
  const NodeId loss = tape.bce(out, tgt, "loss");
  tape.release(tgt);
  tape.release(out);
  const double value = static_cast<double>(tape.value(loss)[0]);
  tape.backward(loss);
  if (trace) *trace = tape.trace();
  return value;
}

// Probability map with the input's height and width.
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& image, const ExecPolicy& policy = {}) {
  if (image.shape().c != 1)
    throw ShapeError("model input must have 1 channel, got " + std::to_string(image.shape().c));
  infer_dims(params.arch, image.shape().h, image.shape().w);
  Tape<T> tape(policy, false);
  const NodeId in = tape.input(image, "input");
  const NodeId out = build_forward(tape, params, static_cast<ModelParams<T>*>(nullptr), in);
  return tape.value(out);
}

}  // namespace gigaseg
