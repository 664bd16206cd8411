// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/prompt_encoder.hpp"

#include <cmath>
#include <numbers>

#include "cellprompt/errors.hpp"

namespace cellprompt {

Tensor positional_encoding(double u, double v, std::size_t d) {
  if (d == 0 || d % 4) throw ConfigError("positional encoding width must be a positive multiple of 4");
  const std::size_t nf = d / 4;
  Tensor out({d});
  for (std::size_t k = 0; k < nf; ++k) {
    const double expo = nf > 1 ? 7.0 * static_cast<double>(k) / static_cast<double>(nf - 1) : 0.0;
    const double f = std::numbers::pi * std::exp2(expo);
    out[2 * k] = std::sin(f * u);
    out[2 * k + 1] = std::cos(f * u);
    out[2 * nf + 2 * k] = std::sin(f * v);
    out[2 * nf + 2 * k + 1] = std::cos(f * v);
  }
  return out;
}

Tensor dense_positional_encoding(std::size_t grid, std::size_t image_size, std::size_t d) {
  if (grid == 0 || image_size % grid) throw ConfigError("image size must be a multiple of the grid size");
  const double s = static_cast<double>(image_size);
  const double p = s / static_cast<double>(grid);
  Tensor out({grid * grid, d});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      // Patch centre pixel coordinate c = g·p + (p-1)/2, normalized as (c+0.5)/S.
      const Tensor pe = positional_encoding((static_cast<double>(gx) + 0.5) * p / s,
                                            (static_cast<double>(gy) + 0.5) * p / s, d);
      std::copy(pe.ptr(), pe.ptr() + d, out.ptr() + (gy * grid + gx) * d);
    }
  }
  return out;
}

PromptEncoder::PromptEncoder(std::size_t d, Rng& rng) {
  if (d == 0 || d % 4) throw ConfigError("prompt encoder width must be a positive multiple of 4");
  positive = Param(normal_tensor({1, d}, 1.0, rng), false);
  negative = Param(normal_tensor({1, d}, 1.0, rng), false);
  no_prompt = Param(normal_tensor({1, d}, 1.0, rng), false);
}

PromptEmbedding PromptEncoder::encode(const PromptSet& prompts, std::size_t image_size) const {
  const std::size_t d = width();
  if (prompts.empty()) return {no_prompt.value};
  const double s = static_cast<double>(image_size);
  Tensor tokens({prompts.size(), d});
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt& p = prompts.prompts()[i];
    if (p.x < 0 || p.y < 0 || static_cast<std::size_t>(p.x) >= image_size ||
        static_cast<std::size_t>(p.y) >= image_size) {
      throw ValidationError("prompt " + std::to_string(i) + " at (" + std::to_string(p.x) + "," +
                            std::to_string(p.y) + ") lies outside the " + std::to_string(image_size) +
                            "x" + std::to_string(image_size) + " image");
    }
    const Tensor pe = positional_encoding((p.x + 0.5) / s, (p.y + 0.5) / s, d);
    const Tensor& label = p.label == PromptLabel::positive ? positive.value : negative.value;
    for (std::size_t j = 0; j < d; ++j) tokens[i * d + j] = pe[j] + label[j];
  }
  return {tokens};
}

void PromptEncoder::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "positive"), &positive);
  out.emplace_back(join_name(prefix, "negative"), &negative);
  out.emplace_back(join_name(prefix, "no_prompt"), &no_prompt);
}

PromptEmbedding encode_prompts(const PromptSet& prompts, std::size_t image_size, const PromptEncoder& encoder) {
  return encoder.encode(prompts, image_size);
}

}  // namespace cellprompt
