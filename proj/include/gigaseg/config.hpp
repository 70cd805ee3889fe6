#pragma once

// Run configuration: one JSON document with a section per module.
//
//   {
//     "deterministic": true, "threads": 1,
//     "train":   {...}, "label": {...}, "dataset": {...}, "arch": {...},
//     "synth":   {...}, "memory": {...}, "bench": {...}, "eval": {...}
//   }
//
// Precedence: built-in defaults < defaults file < --config file < --set
// overrides. Unknown sections and keys are rejected. Comments are allowed.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gigaseg/arch.hpp"
#include "gigaseg/error.hpp"
#include "gigaseg/model.hpp"
#include "gigaseg/pipeline.hpp"
#include "gigaseg/trainer.hpp"

namespace gigaseg {

struct MemoryConfig {
  std::size_t height = 16000;
  std::size_t width = 64000;
  std::size_t element_bytes = 4;
  double budget_gb = 0.0;  // > 0: also report the largest trainable crop
  std::size_t aspect_h = 1;
  std::size_t aspect_w = 4;

  void validate() const {
    if (element_bytes != 4 && element_bytes != 8) throw ConfigError("memory.element_bytes must be 4 or 8");
    if (budget_gb < 0.0) throw ConfigError("memory.budget_gb must be >= 0");
    if (aspect_h == 0 || aspect_w == 0) throw ConfigError("memory.aspect_h and memory.aspect_w must be >= 1");
  }
};

struct BenchSettings {
  BenchConfig run;
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{512, 2048}, {1024, 4096}, {2000, 8000}};

  void validate() const {
    if (run.val_every == 0) throw ConfigError("bench.val_every must be >= 1");
    for (auto [h, w] : sizes)
      if (h == 0 || w == 0) throw ConfigError("bench.sizes entries must be >= 1");
  }
};

struct EvalConfig {
  double threshold = 0.5;
  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must be in (0, 1)");
  }
};

struct RunConfig {
  TrainConfig train;  // carries the top-level deterministic and threads
  LabelRecipe label;
  DatasetSpec dataset;
  ArchConstraints arch;
  std::string arch_file;  // arch.file: model spec text; empty uses the pinned model
  SynthParams synth;
  std::uint64_t synth_seed = 1;
  MemoryConfig memory;
  BenchSettings bench;
  EvalConfig eval;

  ExecPolicy policy() const { return train.policy(); }

  ArchSpec model_arch() const {
    if (arch_file.empty()) return pinned_arch();
    std::ifstream in(arch_file);
    if (!in) throw IoError("cannot open arch.file " + arch_file);
    std::stringstream ss;
    ss << in.rdbuf();
    ArchSpec a = arch_from_text(ss.str());
    validate_arch(a);
    return a;
  }

  void validate() const {
    train.validate();
    label.validate();
    dataset.validate();
    arch.validate();
    synth.validate();
    memory.validate();
    bench.validate();
    eval.validate();
  }
};

namespace detail {

// Calls f(section, key, field&) for every configurable field. Section ""
// holds the top-level keys.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("", "deterministic", c.train.deterministic);
  f("", "threads", c.train.threads);

  f("train", "lr", c.train.adam.lr);
  f("train", "beta1", c.train.adam.beta1);
  f("train", "beta2", c.train.adam.beta2);
  f("train", "eps", c.train.adam.eps);
  f("train", "batch_size", c.train.batch_size);
  f("train", "max_steps", c.train.max_steps);
  f("train", "val_every", c.train.val_every);
  f("train", "seed", c.train.seed);
  f("train", "checkpoint_dir", c.train.checkpoint_dir);
  f("train", "memory_sample_steps", c.train.memory_sample_steps);

  f("label", "downsample_factor", c.label.downsample_factor);
  f("label", "background_threshold", c.label.background_threshold);
  f("label", "threshold_on_gray", c.label.threshold_on_gray);
  f("label", "median_kernel", c.label.median_kernel);
  f("label", "morph_size", c.label.morph_size);
  f("label", "erode_iterations", c.label.erode_iterations);
  f("label", "dilate_iterations", c.label.dilate_iterations);
  f("label", "band_rows", c.label.band_rows);

  f("dataset", "root", c.dataset.root);
  f("dataset", "train", c.dataset.train);
  f("dataset", "val", c.dataset.val);
  f("dataset", "test", c.dataset.test);
  f("dataset", "height", c.dataset.height);
  f("dataset", "width", c.dataset.width);

  f("arch", "file", c.arch_file);
  f("arch", "layer_count", c.arch.layer_count);
  f("arch", "target_params", c.arch.target_params);
  f("arch", "kernels", c.arch.kernels);
  f("arch", "strides", c.arch.strides);
  f("arch", "min_channels", c.arch.min_channels);
  f("arch", "max_channels", c.arch.max_channels);
  f("arch", "min_skips", c.arch.min_skips);
  f("arch", "max_skips", c.arch.max_skips);
  f("arch", "reference_dims", c.arch.reference_dims);

  f("synth", "seed", c.synth_seed);
  f("synth", "min_blobs", c.synth.min_blobs);
  f("synth", "max_blobs", c.synth.max_blobs);
  f("synth", "min_radius", c.synth.min_radius);
  f("synth", "max_radius", c.synth.max_radius);
  f("synth", "irregularity", c.synth.irregularity);
  f("synth", "background_lo", c.synth.background_lo);
  f("synth", "background_hi", c.synth.background_hi);
  f("synth", "tissue_lo", c.synth.tissue_lo);
  f("synth", "tissue_hi", c.synth.tissue_hi);

  f("memory", "height", c.memory.height);
  f("memory", "width", c.memory.width);
  f("memory", "element_bytes", c.memory.element_bytes);
  f("memory", "budget_gb", c.memory.budget_gb);
  f("memory", "aspect_h", c.memory.aspect_h);
  f("memory", "aspect_w", c.memory.aspect_w);

  f("bench", "repeats", c.bench.run.repeats);
  f("bench", "warmup", c.bench.run.warmup);
  f("bench", "val_every", c.bench.run.val_every);
  f("bench", "val_images", c.bench.run.val_images);
  f("bench", "seed", c.bench.run.seed);
  f("bench", "sizes", c.bench.sizes);

  f("eval", "threshold", c.eval.threshold);
}

inline std::string field_name(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

template <typename T>
void read_field(const nlohmann::json& j, T& dst, const std::string& name) {
  auto bad = [&](const char* want) {
    return ConfigError(name + ": expected " + want + ", got " + std::string(j.type_name()) + " " + j.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw bad("a boolean");
    dst = j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw bad("an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_integer() && !j.is_number_unsigned()) throw ConfigError(name + ": must be >= 0");
      const auto v = j.get<std::uint64_t>();
      if (v > std::numeric_limits<T>::max()) throw ConfigError(name + ": value too large");
      dst = static_cast<T>(v);
    } else {
      const auto v = j.get<std::int64_t>();
      if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max())
        throw ConfigError(name + ": value out of range");
      dst = static_cast<T>(v);
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw bad("a number");
    dst = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw bad("a string");
    dst = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    if (!j.is_array()) throw bad("an array of integers");
    T out;
    for (std::size_t i = 0; i < j.size(); ++i) {
      std::size_t v = 0;
      read_field(j[i], v, name + "[" + std::to_string(i) + "]");
      out.push_back(v);
    }
    dst = std::move(out);
  } else {
    static_assert(std::is_same_v<T, std::vector<std::pair<std::size_t, std::size_t>>>);
    if (!j.is_array()) throw bad("an array of [height, width] pairs");
    T out;
    for (std::size_t i = 0; i < j.size(); ++i) {
      const std::string n = name + "[" + std::to_string(i) + "]";
      if (!j[i].is_array() || j[i].size() != 2) throw ConfigError(n + ": expected [height, width]");
      std::size_t h = 0, w = 0;
      read_field(j[i][0], h, n);
      read_field(j[i][1], w, n);
      out.emplace_back(h, w);
    }
    dst = std::move(out);
  }
}

// 1-based line and column of a byte offset.
inline std::string line_col(const std::string& text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < text.size() && i + 1 < offset; ++i) {
    if (text[i] == '\n') ++line, col = 1;
    else ++col;
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  detail::visit_fields(c, [&](const std::string& section, const std::string& key, const auto& v) {
    if (section.empty()) j[key] = v;
    else j[section][key] = v;
  });
  return j;
}

// Applies every key present in `j` onto `c`; absent keys keep their values.
inline void apply_json(RunConfig& c, const nlohmann::json& j, const std::string& origin) {
  if (!j.is_object()) throw ConfigError(origin + ": the config root must be an object");
  std::set<std::string> sections, top;
  detail::visit_fields(c, [&](const std::string& section, const std::string& key, auto&) {
    if (section.empty()) top.insert(key);
    else sections.insert(section);
  });
  for (const auto& [k, v] : j.items()) {
    if (top.count(k)) continue;
    if (!sections.count(k)) throw ConfigError(origin + ": unknown key '" + k + "'");
    if (!v.is_object()) throw ConfigError(origin + ": section '" + k + "' must be an object");
    for (const auto& [key, _] : v.items()) {
      bool known = false;
      detail::visit_fields(c, [&](const std::string& s, const std::string& kk, auto&) {
        known = known || (s == k && kk == key);
      });
      if (!known) throw ConfigError(origin + ": unknown key '" + k + "." + key + "'");
    }
  }
  detail::visit_fields(c, [&](const std::string& section, const std::string& key, auto& field) {
    const nlohmann::json* node = nullptr;
    if (section.empty()) {
      if (j.contains(key)) node = &j[key];
    } else if (j.contains(section) && j[section].contains(key)) {
      node = &j[section][key];
    }
    if (node) detail::read_field(*node, field, origin + ": " + detail::field_name(section, key));
  });
}

inline nlohmann::json parse_config_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    std::string what = e.what();
    const auto colon = what.rfind(": ");
    if (colon != std::string::npos) what = what.substr(colon + 2);
    throw ConfigError(origin + ": parse error at " + detail::line_col(text, e.byte) + ": " + what);
  }
}

inline nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

// "section.key=value" with value parsed as JSON, or taken as a string when it
// is not valid JSON.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json j;
  const auto dot = path.find('.');
  if (dot == std::string::npos) j[path] = value;
  else j[path.substr(0, dot)][path.substr(dot + 1)] = value;
  apply_json(c, j, "--set " + path);
}

inline constexpr const char* kConfigDirEnv = "GIGASEG_CONFIG_DIR";

// Defaults file: $GIGASEG_CONFIG_DIR/gigaseg.json when the variable is set
// and the file exists.
inline std::optional<std::filesystem::path> default_config_path() {
  const char* dir = std::getenv(kConfigDirEnv);
  if (!dir || !*dir) return std::nullopt;
  const std::filesystem::path p = std::filesystem::path(dir) / "gigaseg.json";
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<std::string>& overrides) {
  RunConfig c;
  if (auto d = default_config_path()) apply_json(c, read_config_file(*d), d->string());
  if (file) apply_json(c, read_config_file(*file), file->string());
  for (const auto& o : overrides) apply_override(c, o);
  c.validate();
  return c;
}

}  // namespace gigaseg
