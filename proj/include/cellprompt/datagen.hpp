// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic nuclei: textured elliptical blobs, some placed in touching
// clusters, with a linear intensity gradient on a dark background. Smooth
// untextured blobs of the same brightness, kept apart from the nuclei, act as
// debris and belong to the background. Gaussian noise covers the whole tile.
// Sample i is generated from its own stream seeded with seed ^ i, so samples
// can be produced in any order.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellprompt/tensor.hpp"

namespace cellprompt {

struct DatagenConfig {
  std::size_t image_size = 64;
  std::size_t min_blobs = 3;
  std::size_t max_blobs = 8;
  double min_radius = 5.0;  // semi-axis range in pixels
  double max_radius = 10.0;
  double noise = 0.05;      // Gaussian noise standard deviation
  double texture = 0.12;    // per-pixel speckle standard deviation inside nuclei
  double cluster_prob = 0.3;  // chance that a nucleus touches the previous one
  std::size_t min_distractors = 0;
  std::size_t max_distractors = 3;
  std::size_t min_component_area = 4;
  std::size_t erosion_radius = 2;

  void validate() const;
};

struct Ellipse {
  double cx = 0.0, cy = 0.0;
  double a = 1.0, b = 1.0;  // semi-axes
  double theta = 0.0;       // rotation of the a-axis, radians

  /// Whether the pixel centre (x, y) satisfies the ellipse inequality.
  bool contains(double x, double y) const;
};

struct SyntheticSample {
  Tensor image;       // 1×S×S in [0, 1]
  Tensor gt_mask;     // S×S binary
  Tensor pos_target;  // S×S binary, equals gt_mask
  Tensor neg_target;  // S×S binary, eroded background
  std::vector<Ellipse> blobs;        // nuclei
  std::vector<Ellipse> distractors;  // debris
};

/// Background pixels whose (2r+1)×(2r+1) neighbourhood contains no
/// foreground; pixels outside the frame count as background.
Tensor eroded_background(const Tensor& mask, std::size_t radius);

Tensor rasterize(const std::vector<Ellipse>& blobs, std::size_t size);

SyntheticSample generate_sample(const DatagenConfig& cfg, std::uint64_t seed, std::size_t index);
std::vector<SyntheticSample> generate_dataset(std::size_t n, std::uint64_t seed, const DatagenConfig& cfg);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct Split {
  std::vector<std::size_t> train, val, test;  // sample indices
};

/// Seeded shuffle, then contiguous parts of size floor(f_train·n),
/// floor(f_val·n) and the remainder. Throws ValidationError if any part would
/// be empty.
Split split_indices(std::size_t n, std::uint64_t seed, const SplitFractions& f = {});

/// Writes <root>/{train,val,test}/{images,masks}/NNNNN.pgm and dataset.json.
void write_dataset(const std::string& root, const std::vector<SyntheticSample>& samples, const Split& split,
                   std::uint64_t seed, const DatagenConfig& cfg);

struct LabeledImage {
  std::string name;  // file stem
  Tensor image;      // 1×H×W in [0, 1]
  Tensor mask;       // H×W binary
};

/// Loads one split ("train", "val" or "test") in file-name order.
std::vector<LabeledImage> load_split(const std::string& root, const std::string& split);

}  // namespace cellprompt
