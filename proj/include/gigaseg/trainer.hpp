#pragma once

// Training loop, checkpoint selection, evaluation and step benchmarks.
//
// Checkpoint directory contents:
//   initial.gsck        parameters before the first step, with the step-0
//                       validation loss
//   step_XXXXXX.gsck    written whenever the validation loss improves
//   best.gsck           copy of the latest improvement
//   train.jsonl         one record per step

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gigaseg/dataset.hpp"
#include "gigaseg/error.hpp"
#include "gigaseg/io.hpp"
#include "gigaseg/loss.hpp"
#include "gigaseg/model.hpp"
#include "gigaseg/optim.hpp"
#include "gigaseg/parallel.hpp"
#include "gigaseg/sysmem.hpp"

namespace gigaseg {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 1;
  std::size_t max_steps = 2000;
  std::size_t val_every = 1;
  std::uint64_t seed = 1;
  bool deterministic = true;
  unsigned threads = 1;
  std::string checkpoint_dir = "runs/default";
  std::size_t memory_sample_steps = 8;

  void validate() const {
    adam.validate();
    if (batch_size != 1) throw ConfigError("train.batch_size must be 1, got " + std::to_string(batch_size));
    if (val_every == 0) throw ConfigError("train.val_every must be >= 1");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    if (checkpoint_dir.empty()) throw ConfigError("train.checkpoint_dir must not be empty");
  }
  ExecPolicy policy() const { return {threads, deterministic}; }
};

struct TrainResult {
  ModelParams<float> params;  // after the last step
  std::size_t steps = 0;
  std::size_t best_step = 0;  // 0 when no step beat the initial validation loss
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
};

inline std::string step_checkpoint_name(std::size_t step) {
  std::string n = std::to_string(step);
  return "step_" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n + ".gsck";
}

// Mean BCE of the model over a dataset.
inline double mean_loss(const ModelParams<float>& params, const Dataset& ds, const ExecPolicy& policy = {}) {
  if (ds.size() == 0) throw ConfigError("validation set is empty");
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample s = ds.get(i);
    sum += bce_loss(forward(params, s.image, policy), s.target);
  }
  return sum / static_cast<double>(ds.size());
}

// Visit order for each epoch: a permutation drawn from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Trains from init_params(arch, cfg.seed). Validation runs every val_every
// steps; a strictly lower validation loss writes step and best checkpoints.
inline TrainResult train(const ArchSpec& arch, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0 && cfg.max_steps > 0) throw ConfigError("training set is empty");
  const ExecPolicy policy = cfg.policy();
  const std::filesystem::path dir(cfg.checkpoint_dir);
  std::filesystem::create_directories(dir);
  // Stale checkpoints from an earlier run would confuse selection.
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".gsck") std::filesystem::remove(e.path());
  JsonlWriter log(dir / "train.jsonl");

  TrainResult r;
  r.params = init_params<float>(arch, cfg.seed);
  AdamState<float> adam = adam_init(r.params);
  r.initial_val_loss = r.best_val_loss = mean_loss(r.params, val_set, policy);
  save_checkpoint(dir / "initial.gsck", Checkpoint{r.params, adam, 0, r.initial_val_loss});

  std::vector<std::size_t> order;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool sample_rss = step <= cfg.memory_sample_steps;
    if (sample_rss) reset_peak_rss();

    const std::size_t n = train_set.size();
    const std::size_t pos = (step - 1) % n;
    if (pos == 0) order = epoch_order(n, cfg.seed, (step - 1) / n);
    Sample s = train_set.get(order[pos]);

    ModelParams<float> grads = zeros_like(r.params);
    const double loss = loss_and_grads(r.params, std::move(s.image), std::move(s.target), grads, policy);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    try {
      adam_step(r.params, grads, adam, cfg.adam);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
    }

    std::optional<double> val;
    bool improved = false;
    if (step % cfg.val_every == 0) {
      val = mean_loss(r.params, val_set, policy);
      if (*val < r.best_val_loss) {
        improved = true;
        r.best_val_loss = *val;
        r.best_step = step;
        const Checkpoint ck{r.params, adam, step, *val};
        save_checkpoint(dir / step_checkpoint_name(step), ck);
        save_checkpoint(dir / "best.gsck", ck);
      }
    }
    const std::size_t peak = sample_rss ? peak_rss_bytes() : 0;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json rec{{"step", step}, {"loss", loss}, {"wall_ms", ms}, {"improved", improved}};
    rec["val_loss"] = val ? nlohmann::json(*val) : nlohmann::json(nullptr);
    if (sample_rss) rec["peak_rss_bytes"] = peak;
    log.write(rec);
    r.steps = step;
  }
  return r;
}

// best.gsck when training ever improved, else initial.gsck.
inline std::filesystem::path selected_checkpoint(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "best.gsck")) return dir / "best.gsck";
  if (std::filesystem::exists(dir / "initial.gsck")) return dir / "initial.gsck";
  throw IoError("no checkpoint in " + dir.string());
}

// ---- metrics -------------------------------------------------------------------

// Dice of two binary masks given as "non-zero is foreground"; 1 when both
// are empty.
template <typename A, typename B>
double dice(const A* a, const B* b, std::size_t n) {
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool x = a[i] != A(0), y = b[i] != B(0);
    na += x;
    nb += y;
    inter += x && y;
  }
  return na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double dice(const Image8& a, const Image8& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    throw ShapeError("dice: mask " + a.dims() + " vs " + b.dims());
  return dice(a.data.data(), b.data.data(), a.data.size());
}

// Foreground where the probability is at least `threshold`.
inline Image8 binarize(const Tensor<float>& prob, double threshold = 0.5) {
  const Shape s = prob.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("binarize expects 1x1xHxW, got " + s.str());
  Image8 m(1, s.h, s.w);
  for (std::size_t i = 0; i < prob.size(); ++i) m.data[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
  return m;
}

inline Image8 predict_mask(const ModelParams<float>& params, const Image8& rgb, double threshold = 0.5,
                           const ExecPolicy& policy = {}) {
  return binarize(forward(params, preprocess_input(rgb), policy), threshold);
}

struct EvalEntry {
  std::string name;
  double dice = 0.0;
};

struct EvalReport {
  std::vector<EvalEntry> entries;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one entry
  double threshold = 0.5;
};

inline EvalReport evaluate(const ModelParams<float>& params, const Dataset& ds, double threshold = 0.5,
                           const ExecPolicy& policy = {}) {
  if (ds.size() == 0) throw ConfigError("evaluation set is empty");
  EvalReport rep;
  rep.threshold = threshold;
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample s = ds.get(i);
    const Image8 pred = binarize(forward(params, s.image, policy), threshold);
    const double d = dice(pred.data.data(), s.target.data(), pred.data.size());
    rep.entries.push_back({s.name, d});
    sum += d;
  }
  const double n = static_cast<double>(rep.entries.size());
  rep.mean = sum / n;
  if (rep.entries.size() > 1) {
    double ss = 0.0;
    for (const auto& e : rep.entries) ss += (e.dice - rep.mean) * (e.dice - rep.mean);
    rep.stddev = std::sqrt(ss / (n - 1.0));
  }
  return rep;
}

// Loads the checkpoint a run selected; the stored arch must equal `expected`.
inline Checkpoint load_selected(const std::filesystem::path& dir, const ArchSpec& expected) {
  Checkpoint ck = load_checkpoint(selected_checkpoint(dir));
  if (!(ck.params.arch == expected))
    throw ConfigError("checkpoint in " + dir.string() + " was trained with a different architecture");
  return ck;
}

// ---- benchmark -----------------------------------------------------------------

struct BenchConfig {
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::size_t val_every = 1;   // validation cadence, as in training
  std::size_t val_images = 4;  // 0 times the bare training step
  std::uint64_t seed = 1;
};

struct BenchReport {
  std::size_t height = 0, width = 0;
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double median_ms = 0.0;
};

// Times training steps (forward, backward, Adam update, plus validation over
// val_images synthetic slides on every val_every-th step) at one size, after
// `warmup` untimed steps.
inline BenchReport bench_training_step(const ArchSpec& arch, std::size_t height, std::size_t width,
                                       const BenchConfig& cfg, const ExecPolicy& policy = {}) {
  infer_dims(arch, height, width);
  if (cfg.val_every == 0) throw ConfigError("bench validation cadence must be >= 1");
  BenchReport rep{height, width, {}, 0.0, 0.0};
  if (cfg.repeats == 0) return rep;
  auto sample = [&](std::uint64_t seed) {
    const SynthSample s = synth_generate(seed, height, width);
    return make_sample("bench", s.image, s.mask, height, width);
  };
  const Sample train_sample = sample(cfg.seed);
  InMemoryDataset val;
  for (std::size_t i = 0; i < cfg.val_images; ++i) val.add(sample(cfg.seed + 1 + i));

  ModelParams<float> params = init_params<float>(arch, cfg.seed);
  AdamState<float> adam = adam_init(params);
  const AdamConfig adam_cfg;
  std::size_t step_index = 0;
  auto step = [&] {
    ModelParams<float> g = zeros_like(params);
    loss_and_grads(params, train_sample.image, train_sample.target, g, policy);
    adam_step(params, g, adam, adam_cfg);
    if (++step_index % cfg.val_every == 0 && val.size() > 0) mean_loss(params, val, policy);
  };
  for (std::size_t i = 0; i < cfg.warmup; ++i) step();
  for (std::size_t i = 0; i < cfg.repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    step();
    rep.samples_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  rep.mean_ms = std::accumulate(rep.samples_ms.begin(), rep.samples_ms.end(), 0.0) / static_cast<double>(cfg.repeats);
  std::vector<double> sorted = rep.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size() / 2;
  rep.median_ms = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  return rep;
}

// Least-squares fit of time against pixel count.
struct LinearFit {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
};

inline LinearFit fit_linear(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("a linear fit needs at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ConfigError("a linear fit needs distinct x values");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

}  // namespace gigaseg
