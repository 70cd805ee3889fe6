#pragma once

// Differentiable kernels over Tensor: valid strided convolution, its adjoint
// (transposed convolution), ReLU, sigmoid and elementwise add. All dot products
// accumulate in double and round once to the storage type. Every output element
// is produced by exactly one worker in a fixed summation order, so results do
// not depend on the thread count.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gigaseg/parallel.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

template <typename T>
struct ConvGrads {
  Tensor<T> input;    // empty when not requested
  Tensor<T> weights;
  std::vector<T> bias;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline std::string dim_mismatch(const char* name, std::size_t got, std::size_t want) {
  return std::string(name) + " mismatch: got " + std::to_string(got) + ", expected " +
         std::to_string(want);
}

template <typename T>
void check_weights(const Tensor<T>& weights, std::span<const T> bias, const ConvSpec& spec) {
  const Shape ws = spec.weight_shape();
  require(weights.shape() == ws,
          "weight shape mismatch: got " + weights.shape().str() + ", expected " + ws.str());
  if (spec.has_bias)
    require(bias.size() == spec.out_channels,
            dim_mismatch("bias length", bias.size(), spec.out_channels));
  else
    require(bias.empty(), "bias given for a conv declared without bias");
}

// out[b, o, oy, ox] = bias[o] + sum_{i, ky, kx} x[b, i, oy*s+ky, ox*s+kx] * w(o, i, ky, kx)
// where w(o, i, ...) reads weights laid out as (O, I, kh, kw).
template <typename T>
void correlate(const Tensor<T>& x, const T* weights, std::span<const T> bias, std::size_t kh,
               std::size_t kw, std::size_t stride, Tensor<T>& out, const ExecPolicy& policy) {
  const Shape& is = x.shape();
  const Shape& os = out.shape();
  const std::size_t rows = os.n * os.c * os.h;
  parallel_for(
      rows, policy,
      [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t r = begin; r < end; ++r) {
          const std::size_t oy = r % os.h;
          const std::size_t o = (r / os.h) % os.c;
          const std::size_t b = r / (os.h * os.c);
          T* dst = out.row(b, o, oy);
          const double bo = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
          for (std::size_t ox = 0; ox < os.w; ++ox) {
            double acc = 0.0;
            for (std::size_t i = 0; i < is.c; ++i) {
              const T* wk = weights + (o * is.c + i) * kh * kw;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const T* src = x.row(b, i, oy * stride + ky) + ox * stride;
                const T* wr = wk + ky * kw;
                for (std::size_t kx = 0; kx < kw; ++kx)
                  acc += static_cast<double>(src[kx]) * static_cast<double>(wr[kx]);
              }
            }
            dst[ox] = static_cast<T>(acc + bo);
          }
        }
      },
      1);
}

// Gather form of the transposed convolution:
// out[b, o, y, x] = bias[o] + sum_{i, ky, kx} x[b, i, (y-ky)/s, (x-kx)/s] * w(i, o, ky, kx)
// over taps where (y-ky) and (x-kx) land on the input grid. Weights are (I, O, kh, kw).
template <typename T>
void spread(const Tensor<T>& x, const T* weights, std::span<const T> bias, std::size_t kh,
            std::size_t kw, std::size_t stride, Tensor<T>& out, const ExecPolicy& policy) {
  const Shape& is = x.shape();
  const Shape& os = out.shape();

  // Column taps: for output column c, the (kx, ix) pairs in ascending kx.
  std::vector<std::size_t> col_begin(os.w + 1, 0);
  std::vector<std::size_t> col_kx;
  std::vector<std::size_t> col_ix;
  for (std::size_t c = 0; c < os.w; ++c) {
    for (std::size_t kx = c % stride; kx < kw && kx <= c; kx += stride) {
      const std::size_t ix = (c - kx) / stride;
      if (ix < is.w) {
        col_kx.push_back(kx);
        col_ix.push_back(ix);
      }
    }
    col_begin[c + 1] = col_kx.size();
  }

  const std::size_t rows = os.n * os.c * os.h;
  parallel_for(
      rows, policy,
      [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t r = begin; r < end; ++r) {
          const std::size_t y = r % os.h;
          const std::size_t o = (r / os.h) % os.c;
          const std::size_t b = r / (os.h * os.c);
          T* dst = out.row(b, o, y);
          const double bo = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
          for (std::size_t xo = 0; xo < os.w; ++xo) {
            double acc = 0.0;
            for (std::size_t i = 0; i < is.c; ++i) {
              const T* wk = weights + (i * os.c + o) * kh * kw;
              for (std::size_t ky = y % stride; ky < kh && ky <= y; ky += stride) {
                const std::size_t iy = (y - ky) / stride;
                if (iy >= is.h) continue;
                const T* src = x.row(b, i, iy);
                const T* wr = wk + ky * kw;
                for (std::size_t t = col_begin[xo]; t < col_begin[xo + 1]; ++t)
                  acc += static_cast<double>(src[col_ix[t]]) * static_cast<double>(wr[col_kx[t]]);
              }
            }
            dst[xo] = static_cast<T>(acc + bo);
          }
        }
      },
      1);
}

// dw[o, i, ky, kx] = sum_{b, gy, gx} g[b, o, gy, gx] * x[b, i, gy*s+ky, gx*s+kx]
// with g on the strided grid and x on the dense grid. Result laid out (O, I, kh, kw).
template <typename T>
Tensor<T> weight_grad(const Tensor<T>& g, const Tensor<T>& x, std::size_t kh, std::size_t kw,
                      std::size_t stride, const ExecPolicy& policy) {
  const Shape& gs = g.shape();
  const Shape& xs = x.shape();
  Tensor<T> dw(Shape{gs.c, xs.c, kh, kw});
  const std::size_t taps = kh * kw;

  auto accumulate = [&](std::size_t o, std::size_t i, std::size_t row_begin, std::size_t row_end,
                        std::vector<double>& acc) {
    for (std::size_t r = row_begin; r < row_end; ++r) {
      const std::size_t gy = r % gs.h;
      const std::size_t b = r / gs.h;
      const T* gr = g.row(b, o, gy);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const T* xr = x.row(b, i, gy * stride + ky);
        double* ar = acc.data() + ky * kw;
        for (std::size_t gx = 0; gx < gs.w; ++gx) {
          const double gv = static_cast<double>(gr[gx]);
          if (gv == 0.0) continue;
          const T* xp = xr + gx * stride;
          for (std::size_t kx = 0; kx < kw; ++kx) ar[kx] += gv * static_cast<double>(xp[kx]);
        }
      }
    }
  };

  const std::size_t pairs = gs.c * xs.c;
  const std::size_t grid_rows = gs.n * gs.h;
  if (policy.deterministic || worker_count(pairs, policy) >= policy.threads) {
    parallel_for(pairs, policy, [&](std::size_t begin, std::size_t end, std::size_t) {
      std::vector<double> acc(taps);
      for (std::size_t p = begin; p < end; ++p) {
        const std::size_t o = p / xs.c;
        const std::size_t i = p % xs.c;
        std::fill(acc.begin(), acc.end(), 0.0);
        accumulate(o, i, 0, grid_rows, acc);
        T* dst = dw.data() + p * taps;
        for (std::size_t t = 0; t < taps; ++t) dst[t] = static_cast<T>(acc[t]);
      }
    });
    return dw;
  }

  // Fast mode: split grid rows across workers, reduce partials in worker order.
  const std::size_t workers = worker_count(grid_rows, policy);
  std::vector<std::vector<double>> partial(workers, std::vector<double>(pairs * taps, 0.0));
  parallel_for(grid_rows, policy, [&](std::size_t begin, std::size_t end, std::size_t w) {
    std::vector<double> acc(taps);
    for (std::size_t p = 0; p < pairs; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      accumulate(p / xs.c, p % xs.c, begin, end, acc);
      std::copy(acc.begin(), acc.end(), partial[w].begin() + static_cast<std::ptrdiff_t>(p * taps));
    }
  });
  for (std::size_t k = 0; k < pairs * taps; ++k) {
    double s = 0.0;
    for (const auto& part : partial) s += part[k];
    dw[k] = static_cast<T>(s);
  }
  return dw;
}

template <typename T>
std::vector<T> bias_grad(const Tensor<T>& g) {
  const Shape& s = g.shape();
  std::vector<T> out(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* p = g.row(b, c, 0);
      for (std::size_t k = 0; k < s.plane(); ++k) acc += static_cast<double>(p[k]);
    }
    out[c] = static_cast<T>(acc);
  }
  return out;
}

}  // namespace detail

// Valid strided convolution. Weights (out, in, kh, kw).
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias,
                         const ConvSpec& spec, const ExecPolicy& policy = {}) {
  detail::require(!spec.transposed, "conv2d_forward given a transposed spec");
  detail::check_weights(weights, bias, spec);
  Tensor<T> out(conv_output_shape(input.shape(), spec));
  detail::correlate(input, weights.data(), bias, spec.kernel_h, spec.kernel_w, spec.stride, out,
                    policy);
  return out;
}

// Gradients of conv2d_forward. grad_input is skipped when want_input is false.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weights, const ConvSpec& spec,
                             const ExecPolicy& policy = {}, bool want_input = true) {
  detail::require(!spec.transposed, "conv2d_backward given a transposed spec");
  const Shape expect = conv_output_shape(input.shape(), spec);
  detail::require(grad_out.shape() == expect, "grad_out shape mismatch: got " +
                                                  grad_out.shape().str() + ", expected " +
                                                  expect.str());
  detail::require(weights.shape() == spec.weight_shape(), "weight shape mismatch");
  ConvGrads<T> g;
  if (want_input) {
    g.input = Tensor<T>(input.shape());
    // grad_input is the transposed conv of grad_out with the same array.
    detail::spread(grad_out, weights.data(), std::span<const T>{}, spec.kernel_h, spec.kernel_w,
                   spec.stride, g.input, policy);
  }
  g.weights = detail::weight_grad(grad_out, input, spec.kernel_h, spec.kernel_w, spec.stride, policy);
  if (spec.has_bias) g.bias = detail::bias_grad(grad_out);
  return g;
}

// Transposed convolution, the adjoint of conv2d_forward with the same (k, s).
// Weights (in, out, kh, kw).
template <typename T>
Tensor<T> tconv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias,
                          const ConvSpec& spec, const ExecPolicy& policy = {}) {
  detail::require(spec.transposed, "tconv2d_forward needs a transposed spec");
  detail::check_weights(weights, bias, spec);
  Tensor<T> out(conv_output_shape(input.shape(), spec));
  detail::spread(input, weights.data(), bias, spec.kernel_h, spec.kernel_w, spec.stride, out,
                 policy);
  return out;
}

template <typename T>
ConvGrads<T> tconv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                              const Tensor<T>& weights, const ConvSpec& spec,
                              const ExecPolicy& policy = {}, bool want_input = true) {
  detail::require(spec.transposed, "tconv2d_backward needs a transposed spec");
  const Shape expect = conv_output_shape(input.shape(), spec);
  detail::require(grad_out.shape() == expect, "grad_out shape mismatch: got " +
                                                  grad_out.shape().str() + ", expected " +
                                                  expect.str());
  detail::require(weights.shape() == spec.weight_shape(), "weight shape mismatch");
  ConvGrads<T> g;
  if (want_input) {
    g.input = Tensor<T>(input.shape());
    detail::correlate(grad_out, weights.data(), std::span<const T>{}, spec.kernel_h, spec.kernel_w,
                      spec.stride, g.input, policy);
  }
  // Roles swap: the input lives on the strided grid, grad_out on the dense one.
  g.weights = detail::weight_grad(input, grad_out, spec.kernel_h, spec.kernel_w, spec.stride, policy);
  if (spec.has_bias) g.bias = detail::bias_grad(grad_out);
  return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Takes the forward output; the derivative at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  detail::require(grad_out.shape() == output.shape(), "relu backward shape mismatch");
  Tensor<T> g(output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = output[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = static_cast<T>(stable_sigmoid(static_cast<double>(x[i])));
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  detail::require(grad_out.shape() == output.shape(), "sigmoid backward shape mismatch");
  Tensor<T> g(output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double y = static_cast<double>(output[i]);
    g[i] = static_cast<T>(static_cast<double>(grad_out[i]) * y * (1.0 - y));
  }
  return g;
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

// dst += src, summed in double and rounded once.
template <typename T>
void accumulate_into(Tensor<T>& dst, const Tensor<T>& src) {
  detail::require(dst.shape() == src.shape(), "accumulate shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = static_cast<T>(static_cast<double>(dst[i]) + static_cast<double>(src[i]));
}

}  // namespace gigaseg
