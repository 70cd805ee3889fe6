// gigaseg: command-line entry point.
//
// Exit codes: 0 ok, 1 unexpected, 2 usage or config, 3 I/O or file format,
// 4 shape, 5 numeric, 6 no solution or over budget.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gigaseg/arch.hpp"
#include "gigaseg/config.hpp"
#include "gigaseg/dataset.hpp"
#include "gigaseg/io.hpp"
#include "gigaseg/memplan.hpp"
#include "gigaseg/model.hpp"
#include "gigaseg/pipeline.hpp"
#include "gigaseg/trainer.hpp"

using namespace gigaseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kBandRows = 256;

struct Options {
  std::string config;
  std::vector<std::string> sets;
  bool print_config = false;

  std::string input, output, checkpoint, split = "test", report;
  std::size_t height = 0, width = 0, crop_h = 0, crop_w = 0;
  std::uint64_t seed = 0;
  bool tsv = false;
};

RunConfig load(const Options& o) {
  std::vector<std::string> sets = o.sets;
  RunConfig c = load_run_config(o.config.empty() ? std::nullopt : std::optional<fs::path>(o.config), sets);
  if (o.print_config) std::cout << config_to_json(c).dump(2) << std::endl;
  return c;
}

void write_json_file(const std::string& path, const json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("--split must be train, val or test, got '" + s + "'");
}

ModelParams<float> load_model(const RunConfig& c, const Options& o) {
  const ArchSpec arch = c.model_arch();
  if (o.checkpoint.empty()) return load_selected(c.train.checkpoint_dir, arch).params;
  Checkpoint ck = load_checkpoint(o.checkpoint);
  if (!(ck.params.arch == arch)) throw ConfigError("checkpoint " + o.checkpoint + " has a different architecture");
  return ck.params;
}

int cmd_find_arch(const Options& o) {
  const RunConfig c = load(o);
  const ArchSpec a = search_architecture(c.arch);
  std::cout << to_text(a);
  std::cout << "layers: " << a.layers.size() << "\n";
  std::cout << "parameters: " << param_count(a) << "\n";
  std::cout << "composite stride: " << a.composite_stride() << "\n";
  std::cout << "matches pinned model: " << (a == pinned_arch() ? "yes" : "no") << "\n";
  if (!o.output.empty()) {
    std::ofstream out(o.output);
    out << to_text(a);
    if (!out) throw IoError("cannot write " + o.output);
  }
  return 0;
}

int cmd_preprocess(const Options& o) {
  load(o);
  const fs::path in(o.input);
  if (is_raw_path(in)) {
    RawReader r(in);
    const RawHeader& h = r.header();
    const std::size_t ch = o.crop_h ? o.crop_h : h.height, cw = o.crop_w ? o.crop_w : h.width;
    if (ch > h.height || cw > h.width)
      throw ShapeError("crop " + std::to_string(ch) + "x" + std::to_string(cw) + " exceeds the image");
    RawWriter w(o.output, RawHeader{1, ch, cw, ElemKind::F32});
    std::vector<float> row(cw);
    for (std::size_t y0 = 0; y0 < ch; y0 += kBandRows) {
      const std::size_t n = std::min(kBandRows, ch - y0);
      const Image8 band = r.read_rows(y0, n);
      for (std::size_t y = 0; y < n; ++y) {
        preprocess_row(band.row(y), band.channels, cw, row.data());
        w.write_rows(row.data(), 1);
      }
    }
    w.close();
  } else {
    const Image8 img = read_image(in);
    write_raw_tensor(o.output, preprocess_input(img, o.crop_h ? o.crop_h : img.height, o.crop_w ? o.crop_w : img.width));
  }
  std::cout << "wrote " << o.output << "\n";
  return 0;
}

int cmd_make_labels(const Options& o) {
  const RunConfig c = load(o);
  if (o.input.empty()) {
    const std::size_t n = write_labels(c.dataset, c.label, c.policy());
    std::cout << "labels written: " << n << "\n";
    return 0;
  }
  if (o.output.empty()) throw ConfigError("--output is required with --input");
  if (is_raw_path(o.input)) {
    RawReader r(o.input);
    const RawHeader h = r.header();
    RawWriter w(o.output, RawHeader{1, h.height, h.width, ElemKind::U8});
    std::vector<std::uint8_t> out(h.width);
    generate_label_streamed(
        h.channels, h.height, h.width, [&](std::size_t y0, std::size_t n) { return r.read_rows(y0, n); },
        [&](std::size_t, const std::uint8_t* row) {
          for (std::size_t x = 0; x < h.width; ++x) out[x] = row[x] ? 255 : 0;
          w.write_rows(out.data(), 1);
        },
        c.label, c.policy());
    w.close();
  } else {
    write_mask(o.output, generate_label(read_image(o.input), c.label, c.policy()));
  }
  std::cout << "wrote " << o.output << "\n";
  return 0;
}

int cmd_synth(const Options& o) {
  const RunConfig c = load(o);
  if (o.output.empty()) {
    write_synth_dataset(c.dataset, c.synth_seed, c.synth);
    std::cout << "synthetic dataset in " << c.dataset.root << ": train " << c.dataset.train << ", val "
              << c.dataset.val << ", test " << c.dataset.test << " at " << c.dataset.height << "x" << c.dataset.width
              << "\n";
    return 0;
  }
  // One slide, e.g. a large raw image for streaming tests.
  const std::size_t h = o.height ? o.height : c.dataset.height, w = o.width ? o.width : c.dataset.width;
  const SynthSample s = synth_generate(o.seed ? o.seed : c.synth_seed, h, w, c.synth);
  write_image(o.output, s.image);
  std::cout << "wrote " << o.output << " (" << h << "x" << w << ")\n";
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = load(o);
  const ArchSpec arch = c.model_arch();
  c.dataset.validate(arch.composite_stride());
  const DirectoryDataset tr(c.dataset, Split::Train), val(c.dataset, Split::Val);
  const TrainResult r = train(arch, tr, val, c.train);
  const json j{{"steps", r.steps},
               {"best_step", r.best_step},
               {"initial_val_loss", r.initial_val_loss},
               {"best_val_loss", r.best_val_loss},
               {"selected", selected_checkpoint(c.train.checkpoint_dir).string()}};
  std::cout << j.dump() << "\n";
  write_json_file(o.report, j);
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = load(o);
  const ModelParams<float> params = load_model(c, o);
  c.dataset.validate(params.arch.composite_stride());
  const DirectoryDataset ds(c.dataset, parse_split(o.split));
  const EvalReport rep = evaluate(params, ds, c.eval.threshold, c.policy());
  json per = json::array();
  for (const auto& e : rep.entries) {
    std::cout << e.name << "\t" << e.dice << "\n";
    per.push_back({{"name", e.name}, {"dice", e.dice}});
  }
  std::printf("dice: %.4f +/- %.4f over %zu images (threshold %.2f)\n", rep.mean, rep.stddev, rep.entries.size(),
              rep.threshold);
  write_json_file(o.report, {{"mean", rep.mean}, {"std", rep.stddev}, {"threshold", rep.threshold}, {"images", per}});
  return 0;
}

int cmd_predict(const Options& o) {
  const RunConfig c = load(o);
  const ModelParams<float> params = load_model(c, o);
  const Image8 img = read_image(o.input);
  write_mask(o.output, predict_mask(params, img, c.eval.threshold, c.policy()));
  std::cout << "wrote " << o.output << "\n";
  return 0;
}

int cmd_estimate_mem(Options o) {
  if (o.height) o.sets.push_back("memory.height=" + std::to_string(o.height));
  if (o.width) o.sets.push_back("memory.width=" + std::to_string(o.width));
  const RunConfig c = load(o);
  const ArchSpec arch = c.model_arch();
  const MemoryEstimate e = estimate_training_peak(arch, c.memory.height, c.memory.width, c.memory.element_bytes);
  std::cout << (o.tsv ? format_table(e) : format_report(e));
  if (c.memory.budget_gb > 0.0) {
    const auto budget = static_cast<std::size_t>(c.memory.budget_gb * 1e9);
    const Dims d = max_trainable_dims(arch, budget, c.memory.aspect_h, c.memory.aspect_w, c.memory.element_bytes);
    std::cout << "largest trainable input within " << with_commas(budget) << " bytes: " << d.height << "x"
              << d.width << "\n";
  }
  json rows = json::array();
  for (const auto& r : e.rows) rows.push_back({{"name", r.name}, {"category", r.category}, {"bytes", r.bytes}});
  write_json_file(o.report, {{"height", e.height}, {"width", e.width}, {"peak_bytes", e.peak_bytes}, {"rows", rows}});
  return 0;
}

int cmd_bench(Options o) {
  if (o.height && o.width) o.sets.push_back("bench.sizes=[[" + std::to_string(o.height) + "," + std::to_string(o.width) + "]]");
  const RunConfig c = load(o);
  const ArchSpec arch = c.model_arch();
  json runs = json::array();
  std::vector<double> px, ms;
  for (auto [h, w] : c.bench.sizes) {
    const BenchReport r = bench_training_step(arch, h, w, c.bench.run, c.policy());
    const json j{{"height", h},          {"width", w},           {"pixels", h * w},
                 {"mean_ms", r.mean_ms}, {"median_ms", r.median_ms}, {"samples_ms", r.samples_ms}};
    std::cout << j.dump() << "\n";
    runs.push_back(j);
    if (!r.samples_ms.empty()) {
      px.push_back(static_cast<double>(h * w));
      ms.push_back(r.mean_ms);
    }
  }
  json out{{"runs", runs}, {"val_every", c.bench.run.val_every}, {"val_images", c.bench.run.val_images}};
  if (px.size() >= 2) {
    const LinearFit f = fit_linear(px, ms);
    out["fit"] = {{"ms_per_pixel", f.slope}, {"intercept_ms", f.intercept}, {"r2", f.r2}};
    std::printf("fit: %.6g ms/pixel + %.1f ms, r2 %.5f\n", f.slope, f.intercept, f.r2);
  }
  write_json_file(o.report, out);
  return 0;
}

int categorize(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const ShapeError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e)) return 5;
  if (dynamic_cast<const NoSolutionError*>(&e) || dynamic_cast<const BudgetError*>(&e)) return 6;
  return 1;
}

const char* category_name(int code) {
  switch (code) {
    case 2: return "config error";
    case 3: return "io error";
    case 4: return "shape error";
    case 5: return "numeric error";
    case 6: return "no solution";
  }
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"gigaseg: gigapixel tissue segmentation on one machine"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.add_option("-c,--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", o.sets, "Override a config value: section.key=value")->take_all();
  app.add_flag("--print-config", o.print_config, "Print the effective config before running");

  auto add_report = [&](CLI::App* s) { s->add_option("--report", o.report, "Write a JSON report here"); };

  auto* find = app.add_subcommand("find-arch", "Search the network family for the configured constraints");
  find->add_option("-o,--output", o.output, "Write the arch text here");

  auto* pre = app.add_subcommand("preprocess", "Convert an RGB image into the model's f32 input");
  pre->add_option("-i,--input", o.input, "Input image (.ppm/.pgm or .gsraw)")->required();
  pre->add_option("-o,--output", o.output, "Output .gsraw (f32)")->required();
  pre->add_option("--crop-height", o.crop_h, "Top-left crop height (0: full)");
  pre->add_option("--crop-width", o.crop_w, "Top-left crop width (0: full)");

  auto* labels = app.add_subcommand("make-labels", "Generate tissue masks (whole dataset, or one image)");
  labels->add_option("-i,--input", o.input, "One image; omit to label every split of the dataset");
  labels->add_option("-o,--output", o.output, "Mask output for --input");

  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset, or one synthetic slide");
  synth->add_option("-o,--output", o.output, "Write a single slide here instead of a dataset");
  synth->add_option("--height", o.height, "Slide height for --output");
  synth->add_option("--width", o.width, "Slide width for --output");
  synth->add_option("--seed", o.seed, "Slide seed for --output");

  auto* tr = app.add_subcommand("train", "Train on the dataset's train split, selecting by validation loss");
  add_report(tr);

  auto* ev = app.add_subcommand("eval", "Dice of the selected checkpoint on a split");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: selected one in train.checkpoint_dir)");
  ev->add_option("--split", o.split, "train, val or test");
  add_report(ev);

  auto* pr = app.add_subcommand("predict", "Write the predicted mask of one image");
  pr->add_option("-i,--input", o.input, "Input image")->required();
  pr->add_option("-o,--output", o.output, "Mask output")->required();
  pr->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: selected one in train.checkpoint_dir)");

  auto* mem = app.add_subcommand("estimate-mem", "Predict peak memory of one training step");
  mem->add_option("--height", o.height, "Input height (overrides memory.height)");
  mem->add_option("--width", o.width, "Input width (overrides memory.width)");
  mem->add_flag("--tsv", o.tsv, "Tab-separated rows instead of the text report");
  add_report(mem);

  auto* bench = app.add_subcommand("bench", "Time training steps at the configured sizes");
  bench->add_option("--height", o.height, "Single size height (with --width)");
  bench->add_option("--width", o.width, "Single size width (with --height)");
  add_report(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*find) return cmd_find_arch(o);
    if (*pre) return cmd_preprocess(o);
    if (*labels) return cmd_make_labels(o);
    if (*synth) return cmd_synth(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*pr) return cmd_predict(o);
    if (*mem) return cmd_estimate_mem(o);
    if (*bench) return cmd_bench(o);
  } catch (const std::exception& e) {
    const int code = categorize(e);
    std::cerr << "gigaseg: " << category_name(code) << ": " << e.what() << "\n";
    return code;
  }
  return 1;
}
