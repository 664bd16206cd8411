// SPDX-License-Identifier: Apache-2.0
//
// Frozen point-prompt encoder. A prompt at pixel (x, y) becomes a sinusoidal
// encoding of ((x+0.5)/S, (y+0.5)/S) plus a label embedding. An empty prompt
// set is represented by a single "no-prompt" token.
#pragma once

#include "cellprompt/nn.hpp"
#include "cellprompt/prompt_selection.hpp"

namespace cellprompt {

/// d-dimensional encoding of a normalized position (u, v) ∈ [0, 1]².
/// d/4 frequencies per axis, geometric from π to 128π; layout
/// [sin(f·u), cos(f·u)] for each frequency, then the same for v.
Tensor positional_encoding(double u, double v, std::size_t d);

/// g²×d encoding of patch centres for a g×g grid over an S×S image, using the
/// same pixel-coordinate convention as prompts.
Tensor dense_positional_encoding(std::size_t grid, std::size_t image_size, std::size_t d);

struct PromptEmbedding {
  Tensor tokens;  // n×d, n ≥ 1
};

class PromptEncoder {
 public:
  PromptEncoder() = default;
  /// d must be a positive multiple of 4. All parameters are created frozen.
  PromptEncoder(std::size_t d, Rng& rng);

  /// Throws ValidationError for prompts outside [0, image_size)².
  PromptEmbedding encode(const PromptSet& prompts, std::size_t image_size) const;

  void collect_params(NamedParams& out, const std::string& prefix = "prompt_encoder");
  std::size_t width() const { return positive.value.size(); }

  Param positive;   // 1×d
  Param negative;   // 1×d
  Param no_prompt;  // 1×d
};

PromptEmbedding encode_prompts(const PromptSet& prompts, std::size_t image_size, const PromptEncoder& encoder);

}  // namespace cellprompt
