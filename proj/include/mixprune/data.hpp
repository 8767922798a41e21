#pragma once

// Labelled image datasets and the synthetic class-blob generator.
//
// Binary dataset file (little-endian):
//   "MXDS" | u16 version | u32 count, channels, height, width, classes
//   | count*C*H*W f32 pixels (NCHW) | count i32 labels

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixprune/autodiff.hpp"

namespace mixprune {

struct Dataset {
  int channels = 1, height = 16, width = 16, classes = 2;
  Array<float> images;      // [count, C, H, W]
  std::vector<int> labels;  // [count]

  Index count() const { return static_cast<Index>(labels.size()); }
  Index sample_size() const { return static_cast<Index>(channels) * height * width; }

  /// Images of the given samples, stacked in order.
  Array<float> gather(std::span<const Index> rows) const;
  std::vector<int> gather_labels(std::span<const Index> rows) const;

  /// Inverse class frequencies, rescaled to average 1 over the samples.
  std::vector<float> inverse_frequency_weights() const;

  bool operator==(const Dataset& o) const {
    return channels == o.channels && height == o.height && width == o.width && classes == o.classes &&
           labels == o.labels && images.size() == o.images.size() && (images == o.images).all();
  }
};

struct Splits {
  Dataset train, val, test;
};

/// Gaussian class blobs rendered into images.
///
/// Every class owns `blobs` Gaussian bumps at random positions and channels.
/// A sample renders its class's bumps with each centre jittered by up to
/// `jitter` pixels and each amplitude scaled by U(0.7, 1.3), then adds i.i.d.
/// N(0, noise^2) pixel noise. Labels are balanced (sample i has class i mod K
/// before shuffling).
struct SyntheticSpec {
  int classes = 4;
  int channels = 1;
  int height = 16;
  int width = 16;
  int samples = 2000;
  double noise = 0.3;
  int blobs = 3;
  double blob_sigma = 2.0;
  double jitter = 1.5;
  double train_fraction = 0.66;
  double val_fraction = 0.17;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Generates the dataset and splits it train/val/test. Split sizes are
/// round(f * n) for train and val; test takes the remainder.
Splits synthesize(const SyntheticSpec& spec);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace mixprune
