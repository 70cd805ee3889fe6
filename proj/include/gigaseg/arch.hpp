#pragma once

// Declarative description of the segmentation network family and an
// exhaustive search for a member with a given layer and parameter count.
//
// Family (depth n, m bottleneck convs, L = 2n + m + 1 parametric layers):
//   encoder   E1..En   strided valid convs, kernel >= stride, widths c1..cn
//   bottleneck         m 1x1 convs at width cn
//   decoder   Dn..D1   transposed convs mirroring E_i's (kernel, stride);
//                      D_{i+1} outputs c_i, D1 outputs the full-resolution width d
//   head               one stride-1 conv d -> 1 with sigmoid
//   skips              E_i's activation is added to D_{i+1}'s conv output
//                      before D_{i+1}'s ReLU, for a subset of levels 1..n-1
//
// Search order, outermost first: depth (deepest first), head bias (with
// before without), head kernel (ascending), encoder (kernel, stride) per layer
// with pairs ordered by stride descending then kernel ascending, d ascending,
// c1..cn ascending, then skip sets (largest first, lexicographic levels).
// The first member whose parameter total hits the target, and which
// round-trips every reference size, is returned.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gigaseg/error.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

enum class LayerRole { Encoder, Bottleneck, Decoder, Head };
enum class Activation { Relu, Sigmoid };

inline const char* role_name(LayerRole r) {
  switch (r) {
    case LayerRole::Encoder: return "encoder";
    case LayerRole::Bottleneck: return "bottleneck";
    case LayerRole::Decoder: return "decoder";
    case LayerRole::Head: return "head";
  }
  return "?";
}

struct LayerSpec {
  LayerRole role = LayerRole::Encoder;
  ConvSpec conv{};
  Activation act = Activation::Relu;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Adds the activation of layer `source` to the conv output of layer `dest`.
struct Skip {
  std::size_t source = 0;
  std::size_t dest = 0;
  friend bool operator==(const Skip&, const Skip&) = default;
};

struct ArchSpec {
  std::vector<LayerSpec> layers;
  std::vector<Skip> skips;
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;

  // Product of encoder strides.
  std::size_t composite_stride() const {
    std::size_t s = 1;
    for (const auto& l : layers)
      if (l.role == LayerRole::Encoder) s *= l.conv.stride;
    return s;
  }
  std::vector<std::size_t> skip_sources_into(std::size_t dest) const {
    std::vector<std::size_t> out;
    for (const auto& s : skips)
      if (s.dest == dest) out.push_back(s.source);
    return out;
  }
};

struct ArchConstraints {
  std::size_t layer_count = 7;
  std::size_t target_params = 4492;
  std::vector<std::size_t> kernels{1, 3, 5, 8, 16};
  std::vector<std::size_t> strides{1, 2, 4, 8};
  std::size_t min_channels = 1;
  std::size_t max_channels = 32;
  std::size_t min_skips = 1;
  std::size_t max_skips = 8;
  // Every (height, width) here must pass through the network unchanged.
  std::vector<std::pair<std::size_t, std::size_t>> reference_dims{
      {16000, 64000}, {64, 256}, {512, 2048}, {2000, 8000}};

  void validate() const {
    if (layer_count < 1) throw ConfigError("arch.layer_count must be >= 1");
    if (target_params < 1) throw ConfigError("arch.target_params must be > 0");
    if (kernels.empty()) throw ConfigError("arch.kernels must not be empty");
    if (strides.empty()) throw ConfigError("arch.strides must not be empty");
    for (auto k : kernels)
      if (k < 1) throw ConfigError("arch.kernels entries must be >= 1");
    for (auto s : strides)
      if (s < 1) throw ConfigError("arch.strides entries must be >= 1");
    if (min_channels < 1 || min_channels > max_channels)
      throw ConfigError("arch.min_channels must be in [1, max_channels]");
    if (min_skips > max_skips) throw ConfigError("arch.min_skips must be <= arch.max_skips");
    for (auto [h, w] : reference_dims)
      if (h < 1 || w < 1) throw ConfigError("arch.reference_dims entries must be >= 1");
  }
};

class NoSolutionError : public Error {
 public:
  NoSolutionError(std::size_t target, std::optional<std::size_t> below, std::optional<std::size_t> above)
      : Error(describe(target, below, above)), target_(target), below_(below), above_(above) {}
  std::size_t target() const { return target_; }
  std::optional<std::size_t> nearest_below() const { return below_; }
  std::optional<std::size_t> nearest_above() const { return above_; }

 private:
  static std::string describe(std::size_t target, std::optional<std::size_t> below,
                              std::optional<std::size_t> above) {
    std::ostringstream os;
    os << "no architecture with exactly " << target << " parameters; nearest below: "
       << (below ? std::to_string(*below) : "none")
       << ", nearest above: " << (above ? std::to_string(*above) : "none");
    return os.str();
  }
  std::size_t target_;
  std::optional<std::size_t> below_;
  std::optional<std::size_t> above_;
};

inline std::size_t param_count(const ArchSpec& arch) {
  std::size_t total = 0;
  for (const auto& l : arch.layers)
    total += l.conv.weight_count() + (l.conv.has_bias ? l.conv.out_channels : 0);
  return total;
}

struct LayerDims {
  std::size_t c, h, w;
  friend bool operator==(const LayerDims&, const LayerDims&) = default;
};

// Per-layer output dims for a 1-channel input of the given size. Throws
// DivisibilityError when a valid conv does not tile its input.
inline std::vector<LayerDims> infer_dims(const ArchSpec& arch, std::size_t height, std::size_t width) {
  std::vector<LayerDims> out;
  out.reserve(arch.layers.size());
  Shape cur{1, 1, height, width};
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    try {
      cur = conv_output_shape(cur, arch.layers[i].conv);
    } catch (const DivisibilityError& e) {
      throw DivisibilityError("input " + std::to_string(height) + "x" + std::to_string(width) +
                              " does not fit layer " + std::to_string(i) + ": " + e.what());
    }
    for (auto src : arch.skip_sources_into(i)) {
      const LayerDims& s = out.at(src);
      if (s.c != cur.c || s.h != cur.h || s.w != cur.w)
        throw ShapeError("skip " + std::to_string(src) + " -> " + std::to_string(i) +
                         " joins mismatched shapes");
    }
    out.push_back({cur.c, cur.h, cur.w});
  }
  return out;
}

// Structural checks independent of any target count.
inline void validate_arch(const ArchSpec& arch) {
  if (arch.layers.empty()) throw ShapeError("architecture has no layers");
  std::size_t prev = 1;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    l.conv.validate();
    if (l.conv.in_channels != prev)
      throw ShapeError("layer " + std::to_string(i) + " expects " + std::to_string(l.conv.in_channels) +
                       " input channels but receives " + std::to_string(prev));
    if (l.conv.transposed != (l.role == LayerRole::Decoder))
      throw ShapeError("layer " + std::to_string(i) + ": only decoder layers are transposed");
    const bool last = i + 1 == arch.layers.size();
    if ((l.act == Activation::Sigmoid) != last)
      throw ShapeError("sigmoid must be the final layer's activation and only there");
    prev = l.conv.out_channels;
  }
  if (prev != 1) throw ShapeError("final layer must produce one channel");
  for (const auto& s : arch.skips) {
    if (s.source >= s.dest || s.dest >= arch.layers.size())
      throw ShapeError("skip " + std::to_string(s.source) + " -> " + std::to_string(s.dest) +
                       " must point forward within the network");
    if (arch.layers[s.source].conv.out_channels != arch.layers[s.dest].conv.out_channels)
      throw ShapeError("skip " + std::to_string(s.source) + " -> " + std::to_string(s.dest) +
                       " joins different channel counts");
  }
}

// Output dims equal input dims.
inline bool round_trips(const ArchSpec& arch, std::size_t height, std::size_t width) {
  try {
    const auto dims = infer_dims(arch, height, width);
    return dims.back() == LayerDims{1, height, width};
  } catch (const ShapeError&) {
    return false;
  }
}

// Every invariant a searched witness must satisfy; returns violations.
inline std::vector<std::string> arch_violations(const ArchSpec& arch, const ArchConstraints& c) {
  std::vector<std::string> v;
  try {
    validate_arch(arch);
  } catch (const ShapeError& e) {
    v.emplace_back(e.what());
  }
  if (arch.layers.size() != c.layer_count)
    v.push_back("layer count " + std::to_string(arch.layers.size()) + " != " + std::to_string(c.layer_count));
  if (param_count(arch) != c.target_params)
    v.push_back("parameter count " + std::to_string(param_count(arch)) + " != " +
                std::to_string(c.target_params));
  if (arch.skips.size() < c.min_skips || arch.skips.size() > c.max_skips)
    v.push_back("skip count " + std::to_string(arch.skips.size()) + " outside the required range");
  for (auto [h, w] : c.reference_dims)
    if (!round_trips(arch, h, w))
      v.push_back("input " + std::to_string(h) + "x" + std::to_string(w) + " does not round-trip");
  return v;
}

namespace detail {

struct FamilyPoint {
  std::size_t depth = 0;
  std::size_t bottleneck = 0;
  bool head_bias = true;
  std::size_t head_kernel = 1;
  std::vector<std::pair<std::size_t, std::size_t>> enc;  // (kernel, stride)
  std::size_t width = 1;                                 // d
  std::vector<std::size_t> channels;                     // c1..cn
  std::vector<std::size_t> skip_levels;                  // i in 1..n-1
};

inline ArchSpec build_arch(const FamilyPoint& p) {
  ArchSpec a;
  const std::size_t n = p.depth;
  std::vector<std::size_t> ch{1};
  ch.insert(ch.end(), p.channels.begin(), p.channels.end());
  for (std::size_t i = 1; i <= n; ++i) {
    auto [k, s] = p.enc[i - 1];
    a.layers.push_back({LayerRole::Encoder, ConvSpec{k, k, s, ch[i - 1], ch[i], false, true}, Activation::Relu});
  }
  std::size_t width = n > 0 ? ch[n] : 1;
  for (std::size_t j = 0; j < p.bottleneck; ++j) {
    const std::size_t out = n > 0 ? ch[n] : p.width;
    a.layers.push_back({LayerRole::Bottleneck, ConvSpec{1, 1, 1, width, out, false, true}, Activation::Relu});
    width = out;
  }
  for (std::size_t i = n; i >= 1; --i) {
    auto [k, s] = p.enc[i - 1];
    const std::size_t out = i == 1 ? p.width : ch[i - 1];
    a.layers.push_back({LayerRole::Decoder, ConvSpec{k, k, s, width, out, true, true}, Activation::Relu});
    width = out;
  }
  a.layers.push_back({LayerRole::Head,
                      ConvSpec{p.head_kernel, p.head_kernel, 1, width, 1, false, p.head_bias},
                      Activation::Sigmoid});
  for (std::size_t lvl : p.skip_levels) a.skips.push_back({lvl - 1, 2 * n + p.bottleneck - lvl - 1});
  return a;
}

// All subsets of {1..levels} with size in [lo, hi], largest first, then
// lexicographic.
inline std::vector<std::vector<std::size_t>> skip_sets(std::size_t levels, std::size_t lo, std::size_t hi) {
  std::vector<std::vector<std::size_t>> out;
  hi = std::min(hi, levels);
  for (std::size_t size = hi + 1; size-- > lo;) {
    std::vector<std::size_t> pick;
    std::function<void(std::size_t)> rec = [&](std::size_t from) {
      if (pick.size() == size) {
        out.push_back(pick);
        return;
      }
      for (std::size_t l = from; l <= levels; ++l) {
        pick.push_back(l);
        rec(l + 1);
        pick.pop_back();
      }
    };
    rec(1);
    if (size == 0) break;
  }
  return out;
}

}  // namespace detail

inline ArchSpec search_architecture(const ArchConstraints& c) {
  c.validate();
  std::vector<std::size_t> kernels = c.kernels;
  std::sort(kernels.begin(), kernels.end());
  kernels.erase(std::unique(kernels.begin(), kernels.end()), kernels.end());
  std::vector<std::size_t> strides = c.strides;
  std::sort(strides.begin(), strides.end(), std::greater<>());
  strides.erase(std::unique(strides.begin(), strides.end()), strides.end());

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto s : strides)
    for (auto k : kernels)
      if (k >= s) pairs.emplace_back(k, s);
  const bool have_unit = std::binary_search(kernels.begin(), kernels.end(), std::size_t{1});

  std::optional<std::size_t> below;
  std::optional<std::size_t> above;
  const std::size_t target = c.target_params;

  for (std::size_t n = (c.layer_count - 1) / 2 + 1; n-- > 0;) {
    const std::size_t m = c.layer_count - 1 - 2 * n;
    if (m > 0 && !have_unit) continue;
    const auto skips = detail::skip_sets(n > 0 ? n - 1 : 0, c.min_skips, c.max_skips);
    if (skips.empty()) continue;

    for (bool bias : {true, false}) {
      for (std::size_t hk : kernels) {
        std::vector<std::size_t> enc_idx(n, 0);
        detail::FamilyPoint p;
        p.depth = n;
        p.bottleneck = m;
        p.head_bias = bias;
        p.head_kernel = hk;
        p.skip_levels = skips.front();
        // Free widths: d first, then c1..cn. A full-width d is only present
        // when something feeds the head besides the input image.
        const std::size_t free_vars = (n > 0 || m > 0 ? 1 : 0) + n;
        bool more_tuples = n == 0 || !pairs.empty();
        while (more_tuples) {
          p.enc.clear();
          for (auto idx : enc_idx) p.enc.push_back(pairs[idx]);

          // Shape feasibility does not depend on widths; probe with unit widths.
          p.width = 1;
          p.channels.assign(n, 1);
          const ArchSpec probe = detail::build_arch(p);
          bool feasible = true;
          for (auto [h, w] : c.reference_dims)
            if (!round_trips(probe, h, w)) {
              feasible = false;
              break;
            }

          if (feasible) {
            std::vector<std::size_t> vars(free_vars, c.min_channels);
            auto count_for = [&](const std::vector<std::size_t>& v) {
              std::size_t off = 0;
              if (n > 0 || m > 0) p.width = v[off++];
              for (std::size_t i = 0; i < n; ++i) p.channels[i] = v[off + i];
              return param_count(detail::build_arch(p));
            };
            // Each variable enters the count with non-negative coefficients,
            // so counts grow monotonically and we can cut at the first overshoot.
            std::optional<std::vector<std::size_t>> hit;
            std::function<bool(std::size_t)> rec = [&](std::size_t j) -> bool {
              for (std::size_t v = c.min_channels; v <= c.max_channels; ++v) {
                vars[j] = v;
                for (std::size_t r = j + 1; r < free_vars; ++r) vars[r] = c.min_channels;
                const std::size_t floor_count = count_for(vars);
                if (floor_count > target) {
                  if (!above || floor_count < *above) above = floor_count;
                  return false;
                }
                if (j + 1 == free_vars) {
                  if (floor_count == target) {
                    hit = vars;
                    return true;
                  }
                  if (!below || floor_count > *below) below = floor_count;
                } else if (rec(j + 1)) {
                  return true;
                }
              }
              return false;
            };
            bool found = false;
            if (free_vars == 0) {
              const std::size_t cnt = param_count(probe);
              if (cnt == target) {
                hit = std::vector<std::size_t>{};
                found = true;
              } else if (cnt < target) {
                if (!below || cnt > *below) below = cnt;
              } else if (!above || cnt < *above) {
                above = cnt;
              }
            } else {
              found = rec(0);
            }
            if (found) {
              count_for(*hit);
              return detail::build_arch(p);
            }
          }

          // Next encoder tuple, layer 1 most significant.
          more_tuples = false;
          for (std::size_t j = n; j-- > 0;) {
            if (++enc_idx[j] < pairs.size()) {
              more_tuples = true;
              break;
            }
            enc_idx[j] = 0;
          }
        }
      }
    }
  }
  throw NoSolutionError(target, below, above);
}

// Text form: one record per line.
//   arch v1
//   layer <i> <role> <conv|tconv> k=<kh>x<kw> s=<stride> in=<c> out=<c> bias=<0|1> act=<relu|sigmoid>
//   skip <source> <dest>
inline std::string to_text(const ArchSpec& a) {
  std::ostringstream os;
  os << "arch v1\n";
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& l = a.layers[i];
    os << "layer " << i << ' ' << role_name(l.role) << ' ' << (l.conv.transposed ? "tconv" : "conv")
       << " k=" << l.conv.kernel_h << 'x' << l.conv.kernel_w << " s=" << l.conv.stride
       << " in=" << l.conv.in_channels << " out=" << l.conv.out_channels
       << " bias=" << (l.conv.has_bias ? 1 : 0)
       << " act=" << (l.act == Activation::Relu ? "relu" : "sigmoid") << '\n';
  }
  for (const auto& s : a.skips) os << "skip " << s.source << ' ' << s.dest << '\n';
  return os.str();
}

inline ArchSpec arch_from_text(const std::string& text) {
  ArchSpec a;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("arch text line " + std::to_string(lineno) + ": " + why);
  };
  auto field = [&](const std::string& tok, const std::string& key) {
    if (tok.rfind(key + "=", 0) != 0) throw fail("expected " + key + "=..., got '" + tok + "'");
    return tok.substr(key.size() + 1);
  };
  auto number = [&](const std::string& s) -> std::size_t {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      throw fail("bad number '" + s + "'");
    }
    if (pos != s.size()) throw fail("bad number '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (!header) {
      if (tok.size() != 2 || tok[0] != "arch") throw fail("missing 'arch v1' header");
      if (tok[1] != "v1") throw fail("unsupported arch version " + tok[1]);
      header = true;
      continue;
    }
    if (tok[0] == "layer") {
      if (tok.size() != 10) throw fail("layer record needs 10 fields");
      if (number(tok[1]) != a.layers.size()) throw fail("layer indices must be consecutive");
      LayerSpec l;
      const std::string& r = tok[2];
      if (r == "encoder") l.role = LayerRole::Encoder;
      else if (r == "bottleneck") l.role = LayerRole::Bottleneck;
      else if (r == "decoder") l.role = LayerRole::Decoder;
      else if (r == "head") l.role = LayerRole::Head;
      else throw fail("unknown role '" + r + "'");
      if (tok[3] != "conv" && tok[3] != "tconv") throw fail("unknown layer type '" + tok[3] + "'");
      l.conv.transposed = tok[3] == "tconv";
      const std::string k = field(tok[4], "k");
      const auto x = k.find('x');
      if (x == std::string::npos) throw fail("kernel must read <h>x<w>");
      l.conv.kernel_h = number(k.substr(0, x));
      l.conv.kernel_w = number(k.substr(x + 1));
      l.conv.stride = number(field(tok[5], "s"));
      l.conv.in_channels = number(field(tok[6], "in"));
      l.conv.out_channels = number(field(tok[7], "out"));
      const std::string b = field(tok[8], "bias");
      if (b != "0" && b != "1") throw fail("bias must be 0 or 1");
      l.conv.has_bias = b == "1";
      const std::string act = field(tok[9], "act");
      if (act == "relu") l.act = Activation::Relu;
      else if (act == "sigmoid") l.act = Activation::Sigmoid;
      else throw fail("unknown activation '" + act + "'");
      a.layers.push_back(l);
    } else if (tok[0] == "skip") {
      if (tok.size() != 3) throw fail("skip record needs source and dest");
      a.skips.push_back({number(tok[1]), number(tok[2])});
    } else {
      throw fail("unknown record '" + tok[0] + "'");
    }
  }
  if (!header) throw FormatError("arch text is empty");
  try {
    validate_arch(a);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("arch text describes an invalid network: ") + e.what());
  }
  return a;
}

}  // namespace gigaseg
