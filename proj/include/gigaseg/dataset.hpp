#pragma once

// Training samples and the on-disk dataset layout.

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gigaseg/error.hpp"
#include "gigaseg/image.hpp"
#include "gigaseg/io.hpp"
#include "gigaseg/parallel.hpp"
#include "gigaseg/pipeline.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

struct Sample {
  std::string name;
  Tensor<float> image;   // 1x1xHxW preprocessed
  Tensor<float> target;  // 1x1xHxW in {0, 1}
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t i) const = 0;
};

class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset() = default;
  explicit InMemoryDataset(std::vector<Sample> samples) : samples_(std::move(samples)) {}
  void add(Sample s) { samples_.push_back(std::move(s)); }
  std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t i) const override { return samples_.at(i); }

 private:
  std::vector<Sample> samples_;
};

inline Sample make_sample(std::string name, const Image8& rgb, const Image8& mask, std::size_t h, std::size_t w) {
  if (mask.channels != 1) throw ShapeError(name + ": label must be single-channel, got " + mask.dims());
  return {std::move(name), preprocess_input(rgb, h, w), mask_to_tensor(crop_top_left(mask, h, w))};
}

// Reads one split of the layout described by DatasetSpec lazily, cropping
// every image and label to the spec's height x width from the top-left.
class DirectoryDataset : public Dataset {
 public:
  DirectoryDataset(DatasetSpec spec, Split split) : spec_(std::move(spec)), split_(split) {
    const auto dir = spec_.dir(split_, "images");
    if (!std::filesystem::is_directory(dir)) throw IoError("missing dataset directory " + dir.string());
    for (std::size_t i = 0;; ++i) {
      if (!std::filesystem::exists(spec_.image(split_, i))) break;
      if (!std::filesystem::exists(spec_.label(split_, i)))
        throw IoError("image " + spec_.image(split_, i).string() + " has no label " + spec_.label(split_, i).string());
      ++count_;
    }
  }
  std::size_t size() const override { return count_; }
  Sample get(std::size_t i) const override {
    if (i >= count_) throw IoError("sample index " + std::to_string(i) + " out of range");
    return make_sample(std::string(split_name(split_)) + "/" + DatasetSpec::stem(i), read_image(spec_.image(split_, i)),
                       read_mask(spec_.label(split_, i)), spec_.height, spec_.width);
  }

 private:
  DatasetSpec spec_;
  Split split_;
  std::size_t count_ = 0;
};

// Synthetic slides plus their generator masks, for every split.
inline void write_synth_dataset(const DatasetSpec& spec, std::uint64_t seed, const SynthParams& p = {}) {
  p.validate();
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    std::filesystem::create_directories(spec.dir(s, "images"));
    std::filesystem::create_directories(spec.dir(s, "reference"));
    for (std::size_t i = 0; i < spec.count(s); ++i) {
      const SynthSample sample = synth_generate(synth_seed(seed, s, i), spec.height, spec.width, p);
      write_image(spec.image(s, i), sample.image);
      write_mask(spec.reference(s, i), sample.mask);
    }
  }
}

// Runs the label recipe over every image of every split present.
inline std::size_t write_labels(const DatasetSpec& spec, const LabelRecipe& r, const ExecPolicy& policy = {}) {
  r.validate();
  std::size_t n = 0;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    if (!std::filesystem::is_directory(spec.dir(s, "images"))) continue;
    std::filesystem::create_directories(spec.dir(s, "labels"));
    for (std::size_t i = 0; std::filesystem::exists(spec.image(s, i)); ++i, ++n)
      write_mask(spec.label(s, i), generate_label(read_image(spec.image(s, i)), r, policy));
  }
  return n;
}

}  // namespace gigaseg
