#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gigaseg/trainer.hpp"
#include "oracles.hpp"

using namespace gigaseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "gigaseg_test_trainer" / name;
  fs::remove_all(d);
  return d;
}

InMemoryDataset synth_set(std::uint64_t base, std::size_t n, std::size_t h, std::size_t w) {
  InMemoryDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = synth_generate(base + i, h, w);
    ds.add(make_sample("s" + std::to_string(i), s.image, s.mask, h, w));
  }
  return ds;
}

TrainConfig small_config(const std::string& dir, std::size_t steps) {
  TrainConfig c;
  c.max_steps = steps;
  c.checkpoint_dir = dir;
  c.seed = 3;
  c.adam.lr = 1e-2;
  return c;
}

}  // namespace

TEST(Bce, KnownValues) {
  Tensor<float> half(Shape{1, 1, 2, 2}, 0.5f), ones(Shape{1, 1, 2, 2}, 1.0f), zeros(Shape{1, 1, 2, 2});
  EXPECT_NEAR(bce_loss(half, ones), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(half, zeros), std::log(2.0), 1e-12);
  // Clamped at eps: a perfect prediction costs -log(1 - eps).
  EXPECT_NEAR(bce_loss(ones, ones), -std::log(1.0 - 1e-7), 1e-12);
  EXPECT_NEAR(bce_loss(zeros, ones), -std::log(1e-7), 1e-9);
  EXPECT_THROW(bce_loss(half, Tensor<float>(Shape{1, 1, 2, 3})), ShapeError);
}

TEST(Bce, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(1);
  auto p = oracle::random_tensor<double>(Shape{1, 1, 3, 5}, rng, 0.05, 0.95);
  const auto t = oracle::random_tensor<double>(Shape{1, 1, 3, 5}, rng, 0.0, 1.0);
  const auto g = bce_grad(p, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double fd = oracle::central_diff([&] { return bce_loss(p, t); }, p[i], 1e-6);
    EXPECT_LT(oracle::rel_err(g[i], fd), 1e-6) << i;
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = init_params<float>(pinned_arch(), 1);
  const auto before = p;
  auto st = adam_init(p);
  adam_step(p, zeros_like(p), st, AdamConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLr) {
  // After bias correction the first update is lr * g / (|g| + eps).
  auto p = init_params<double>(pinned_arch(), 1);
  const auto before = p;
  auto g = zeros_like(p);
  g.layers[0].weights[0] = 3.0;
  g.layers[6].weights[0] = -1e-3;
  auto st = adam_init(p);
  AdamConfig c;
  adam_step(p, g, st, c);
  EXPECT_NEAR(p.layers[0].weights[0], before.layers[0].weights[0] - c.lr * 3.0 / (3.0 + c.eps), 1e-15);
  EXPECT_NEAR(p.layers[6].weights[0], before.layers[6].weights[0] + c.lr * 1e-3 / (1e-3 + c.eps), 1e-15);
}

TEST(Adam, MatchesScalarOracleOverTenSteps) {
  auto p = init_params<double>(pinned_arch(), 2);
  auto st = adam_init(p);
  AdamConfig c;
  c.lr = 0.01;
  double w = p.layers[2].weights[5], m = 0.0, v = 0.0;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int t = 1; t <= 10; ++t) {
    auto g = zeros_like(p);
    const double gi = nd(rng);
    g.layers[2].weights[5] = gi;
    adam_step(p, g, st, c);
    m = 0.9 * m + 0.1 * gi;
    v = 0.999 * v + 0.001 * gi * gi;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-7);
    ASSERT_NEAR(p.layers[2].weights[5], w, 1e-12) << t;
  }
}

TEST(Adam, NonFiniteGradientNamesLayerAndLeavesState) {
  auto p = init_params<float>(pinned_arch(), 1);
  const auto before = p;
  auto st = adam_init(p);
  auto g = zeros_like(p);
  g.layers[0].weights[0] = 1.0f;
  (*g.layers[4].bias)[1] = std::nanf("");
  try {
    adam_step(p, g, st, AdamConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("L4.b"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 0u);
  AdamConfig bad;
  bad.beta1 = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Dice, Examples) {
  const std::uint8_t a[] = {1, 1, 0, 0}, b[] = {1, 0, 1, 0}, z[] = {0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(dice(a, a, 4), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, b, 4), 0.5);
  EXPECT_DOUBLE_EQ(dice(b, a, 4), 0.5);
  EXPECT_DOUBLE_EQ(dice(z, z, 4), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, z, 4), 0.0);
  Tensor<float> prob(Shape{1, 1, 1, 4});
  prob[0] = 0.49f;
  prob[1] = 0.5f;
  prob[2] = 0.51f;
  const Image8 m = binarize(prob);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1, 1, 0}));
}

TEST(Descent, OneSmallStepLowersLossOnFrozenExample) {
  const auto s = synth_generate(30, 64, 128);
  const Sample ex = make_sample("x", s.image, s.mask, 64, 128);
  double before_sum = 0.0, after_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = init_params<float>(pinned_arch(), seed);
    auto g = zeros_like(p);
    const double before = loss_and_grads(p, ex.image, ex.target, g);
    auto st = adam_init(p);
    AdamConfig c;
    c.lr = 1e-4;
    adam_step(p, g, st, c);
    const double after = bce_loss(forward(p, ex.image), ex.target);
    EXPECT_LT(after, before) << seed;
    before_sum += before;
    after_sum += after;
  }
  EXPECT_LT(after_sum, before_sum);
}

TEST(Dice, SymmetricOnRandomMasks) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::uint8_t> a(100), b(100);
    for (auto& v : a) v = rng() % 2;
    for (auto& v : b) v = rng() % 2;
    EXPECT_DOUBLE_EQ(dice(a.data(), b.data(), 100), dice(b.data(), a.data(), 100));
    EXPECT_GE(dice(a.data(), b.data(), 100), 0.0);
    EXPECT_LE(dice(a.data(), b.data(), 100), 1.0);
  }
}

TEST(Train, ZeroStepsWritesInitialOnly) {
  const auto dir = scratch("zero");
  const auto tr = synth_set(1, 2, 64, 128), val = synth_set(50, 1, 64, 128);
  const TrainResult r = train(pinned_arch(), tr, val, small_config(dir.string(), 0));
  EXPECT_EQ(r.steps, 0u);
  EXPECT_EQ(r.params, init_params<float>(pinned_arch(), 3));
  EXPECT_EQ(selected_checkpoint(dir), dir / "initial.gsck");
  const Checkpoint ck = load_checkpoint(dir / "initial.gsck");
  EXPECT_EQ(ck.params, r.params);
  EXPECT_DOUBLE_EQ(ck.val_loss, r.initial_val_loss);
  EXPECT_TRUE(read_jsonl(dir / "train.jsonl").empty());
}

TEST(Train, DeterministicCheckpointsAndLogs) {
  const auto tr = synth_set(1, 3, 64, 128), val = synth_set(50, 2, 64, 128);
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  const TrainResult a = train(pinned_arch(), tr, val, small_config(d1.string(), 12));
  const TrainResult b = train(pinned_arch(), tr, val, small_config(d2.string(), 12));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.best_step, b.best_step);
  for (const auto& e : fs::directory_iterator(d1)) {
    if (e.path().extension() != ".gsck") continue;
    EXPECT_EQ(load_checkpoint(e.path()), load_checkpoint(d2 / e.path().filename())) << e.path();
  }
  const auto la = read_jsonl(d1 / "train.jsonl"), lb = read_jsonl(d2 / "train.jsonl");
  ASSERT_EQ(la.size(), 12u);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i]["loss"], lb[i]["loss"]);
    EXPECT_EQ(la[i]["val_loss"], lb[i]["val_loss"]);
  }
}

TEST(Train, SelectedCheckpointIsValidationMinimum) {
  const auto tr = synth_set(10, 4, 64, 128), val = synth_set(60, 2, 64, 128);
  const auto dir = scratch("select");
  TrainConfig c = small_config(dir.string(), 30);
  c.val_every = 2;
  const TrainResult r = train(pinned_arch(), tr, val, c);
  const auto log = read_jsonl(dir / "train.jsonl");
  ASSERT_EQ(log.size(), 30u);
  double best = r.initial_val_loss;
  std::size_t best_step = 0;
  for (const auto& rec : log) {
    EXPECT_EQ(rec.contains("peak_rss_bytes"), rec["step"].get<std::size_t>() <= 8);
    if (rec["val_loss"].is_null()) {
      EXPECT_NE(rec["step"].get<std::size_t>() % 2, 0u);
      continue;
    }
    const double v = rec["val_loss"].get<double>();
    EXPECT_EQ(rec["improved"].get<bool>(), v < best);
    if (v < best) best = v, best_step = rec["step"].get<std::size_t>();
  }
  EXPECT_EQ(r.best_step, best_step);
  const Checkpoint ck = load_checkpoint(selected_checkpoint(dir));
  EXPECT_EQ(ck.step, best_step);
  EXPECT_DOUBLE_EQ(ck.val_loss, best);
  EXPECT_DOUBLE_EQ(mean_loss(ck.params, val), best);
  ASSERT_TRUE(ck.adam.has_value());
  EXPECT_EQ(ck.adam->step, best_step);
  if (best_step) EXPECT_TRUE(fs::exists(dir / step_checkpoint_name(best_step)));
}

TEST(Train, LossDecreasesOnSynthSlides) {
  const auto tr = synth_set(20, 4, 128, 256), val = synth_set(70, 2, 128, 256);
  const auto dir = scratch("descent");
  const TrainResult r = train(pinned_arch(), tr, val, small_config(dir.string(), 60));
  EXPECT_LT(r.best_val_loss, 0.8 * r.initial_val_loss);
  const EvalReport rep = evaluate(load_selected(dir, pinned_arch()).params, val);
  EXPECT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.entries[0].name, "s0");
}

TEST(Train, Errors) {
  const auto tr = synth_set(1, 1, 64, 64);
  InMemoryDataset empty;
  EXPECT_THROW(train(pinned_arch(), tr, empty, small_config(scratch("e1").string(), 1)), ConfigError);
  TrainConfig c = small_config(scratch("e2").string(), 1);
  c.batch_size = 2;
  EXPECT_THROW(train(pinned_arch(), tr, tr, c), ConfigError);
  InMemoryDataset nan_set;
  Sample s = tr.get(0);
  s.target[0] = std::nanf("");
  nan_set.add(s);
  try {
    train(pinned_arch(), nan_set, tr, small_config(scratch("e3").string(), 3));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(evaluate(init_params<float>(pinned_arch(), 1), empty), ConfigError);
  EXPECT_THROW(selected_checkpoint(scratch("nothing")), IoError);
}

TEST(Eval, ArchMismatchAndStatistics) {
  const auto dir = scratch("mismatch");
  const auto tr = synth_set(1, 1, 64, 64);
  train(pinned_arch(), tr, tr, small_config(dir.string(), 0));
  ArchSpec other = pinned_arch();
  other.skips.pop_back();
  EXPECT_THROW(load_selected(dir, other), ConfigError);

  const auto val = synth_set(80, 3, 64, 128);
  const EvalReport rep = evaluate(init_params<float>(pinned_arch(), 5), val);
  double mean = 0.0;
  for (const auto& e : rep.entries) mean += e.dice / 3.0;
  double ss = 0.0;
  for (const auto& e : rep.entries) ss += (e.dice - mean) * (e.dice - mean);
  EXPECT_NEAR(rep.mean, mean, 1e-15);
  EXPECT_NEAR(rep.stddev, std::sqrt(ss / 2.0), 1e-15);

  // Targets equal to the model's own predictions score 1 with no spread.
  const auto params = init_params<float>(pinned_arch(), 5);
  InMemoryDataset self;
  for (std::size_t i = 0; i < val.size(); ++i) {
    Sample s = val.get(i);
    const Image8 pred = binarize(forward(params, s.image));
    s.target = mask_to_tensor(pred);
    self.add(s);
  }
  const EvalReport perfect = evaluate(params, self);
  EXPECT_DOUBLE_EQ(perfect.mean, 1.0);
  EXPECT_DOUBLE_EQ(perfect.stddev, 0.0);
}

TEST(Bench, ReportsSamples) {
  BenchConfig c;
  c.repeats = 0;
  EXPECT_TRUE(bench_training_step(pinned_arch(), 64, 128, c).samples_ms.empty());
  c.repeats = 3;
  c.warmup = 0;
  c.val_images = 1;
  const BenchReport r = bench_training_step(pinned_arch(), 64, 128, c);
  ASSERT_EQ(r.samples_ms.size(), 3u);
  for (double ms : r.samples_ms) EXPECT_GT(ms, 0.0);
  double sum = 0.0;
  for (double ms : r.samples_ms) sum += ms;
  EXPECT_DOUBLE_EQ(r.mean_ms, sum / 3.0);
  std::vector<double> sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_DOUBLE_EQ(r.median_ms, sorted[1]);
  EXPECT_THROW(bench_training_step(pinned_arch(), 60, 128, c), DivisibilityError);
}

TEST(Bench, LinearFit) {
  const LinearFit f = fit_linear({1, 2, 3, 4}, {3, 5, 7, 9});
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 1.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  EXPECT_LT(fit_linear({1, 2, 3}, {1, 3, 1}).r2, 0.01);
  EXPECT_THROW(fit_linear({1}, {1}), ConfigError);
}
