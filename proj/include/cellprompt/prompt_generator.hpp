// SPDX-License-Identifier: Apache-2.0
//
// Auxiliary network that turns an image into per-pixel prompt logits. The two
// output channels are independent: sigmoid(channel 0) is the probability that
// a pixel is a good positive prompt, sigmoid(channel 1) a good negative one.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "cellprompt/nn.hpp"

namespace cellprompt {

/// 2-D convolution layer with per-channel bias, "same" padding.
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in, std::size_t out, std::size_t k, Rng& rng, double gain = 2.0);

  struct Cache {
    Tensor x;
  };

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& dy, bool need_dx = true);

  void collect_params(NamedParams& out, const std::string& prefix);

  Param kernels;  // F×C×k×k
  Param bias;     // F
  int pad = 0;
};

struct GeneratorConfig {
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> widths{8, 16, 32, 64};
};

struct GeneratorOutput {
  Tensor logits;  // 2×H×W
};

struct ProbabilityMap {
  Tensor pos;  // H×W, entries in [0,1]
  Tensor neg;  // H×W, entries in [0,1]

  std::size_t height() const { return pos.dim(0); }
  std::size_t width() const { return pos.dim(1); }
};

/// Four-level UNet: conv-relu-conv-relu per level with 2× max pooling on the
/// way down, nearest upsampling plus skip concatenation on the way up, and a
/// final 1×1 convolution to two channels.
class PromptGenerator {
 public:
  static constexpr std::size_t kLevels = 4;

  PromptGenerator() = default;
  PromptGenerator(const GeneratorConfig& cfg, Rng& rng);

  struct DoubleConv {
    Conv2dLayer c1, c2;
  };
  struct DoubleConvCache {
    Conv2dLayer::Cache c1, c2;
    Tensor pre1, pre2;
  };
  struct Cache {
    std::array<DoubleConvCache, kLevels> enc;
    std::array<std::vector<std::size_t>, kLevels - 1> pool_argmax;
    std::array<Shape, kLevels - 1> pool_shapes;
    std::array<DoubleConvCache, kLevels - 1> dec;
    Conv2dLayer::Cache head;
  };

  GeneratorOutput generate(const Tensor& image, Cache* cache = nullptr) const;
  /// Backpropagates a gradient on the 2×H×W logits into the parameters.
  void backward(const Cache& cache, const Tensor& dlogits);

  void collect_params(NamedParams& out, const std::string& prefix = "generator");
  const GeneratorConfig& config() const { return cfg_; }

  std::array<DoubleConv, kLevels> enc;
  std::array<DoubleConv, kLevels - 1> dec;  // dec[l] produces level l
  Conv2dLayer head;

 private:
  GeneratorConfig cfg_;
};

GeneratorOutput generate(const Tensor& image, const PromptGenerator& generator);

/// Per-channel sigmoid: channel 0 → P_pos, channel 1 → P_neg.
ProbabilityMap to_probability(const GeneratorOutput& out);

/// Mean binary cross-entropy over both channels and all pixels, with
/// sigmoid(logits) as the prediction and log arguments clamped at 1e-12.
/// Writes d(loss)/d(logits) when dlogits is non-null. Throws ValidationError
/// on non-binary targets and DimensionError on shape mismatch.
double generator_loss(const GeneratorOutput& pred, const Tensor& target_pos, const Tensor& target_neg,
                      Tensor* dlogits = nullptr);

/// Writes P_pos and P_neg as 16-bit binary PGMs (value·65535, rounded). For
/// inspection only; the quantization is lossy.
void export_probability_map(const ProbabilityMap& map, const std::string& pos_path,
                            const std::string& neg_path);

}  // namespace cellprompt
