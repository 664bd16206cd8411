// SPDX-License-Identifier: Apache-2.0
//
// The assembled pipeline: image encoder, prompt generator, frozen prompt
// encoder and mask decoder, with one flat parameter namespace.
#pragma once

#include <cstdint>
#include <string>

#include "cellprompt/image_encoder.hpp"
#include "cellprompt/mask_decoder.hpp"
#include "cellprompt/prompt_encoder.hpp"
#include "cellprompt/prompt_generator.hpp"
#include "json.hpp"

namespace cellprompt {

struct ModelConfig {
  EncoderConfig encoder;
  GeneratorConfig generator;
  std::size_t decoder_heads = 4;
  std::size_t decoder_rounds = 2;
  std::uint64_t seed = 0;

  DecoderConfig decoder() const;
  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

class SacModel {
 public:
  explicit SacModel(const ModelConfig& cfg);

  /// Every parameter under the prefixes encoder., generator., prompt_encoder., decoder.
  NamedParams params();

  DecoderOutput predict(const Tensor& image, const PromptSet& prompts) const;
  ProbabilityMap prompt_map(const Tensor& image) const;

  const ModelConfig& config() const { return cfg_; }

  ImageEncoder encoder;
  PromptGenerator generator;
  PromptEncoder prompt_encoder;
  MaskDecoder decoder;

 private:
  ModelConfig cfg_;
};

}  // namespace cellprompt
