// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/model.hpp"

#include "cellprompt/errors.hpp"
#include "cellprompt/rng.hpp"

namespace cellprompt {

DecoderConfig ModelConfig::decoder() const {
  DecoderConfig d;
  d.width = encoder.width;
  d.heads = decoder_heads;
  d.cross_width = encoder.width / 2;
  d.mlp_hidden = 2 * encoder.width;
  d.rounds = decoder_rounds;
  d.image_size = encoder.image_size;
  d.grid = encoder.grid();
  return d;
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder().validate();
  if (encoder.width % 4) throw ConfigError("model width must be a multiple of 4");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.encoder.image_size;
  j["patch_size"] = c.encoder.patch_size;
  j["channels"] = c.encoder.channels;
  j["width"] = c.encoder.width;
  j["depth"] = c.encoder.depth;
  j["heads"] = c.encoder.heads;
  j["lora_rank"] = c.encoder.lora_rank;
  j["mlp_ratio"] = c.encoder.mlp_ratio;
  j["generator_widths"] = c.generator.widths;
  j["decoder_heads"] = c.decoder_heads;
  j["decoder_rounds"] = c.decoder_rounds;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.encoder.image_size = j.at("image_size").get<std::size_t>();
    c.encoder.patch_size = j.at("patch_size").get<std::size_t>();
    c.encoder.channels = j.at("channels").get<std::size_t>();
    c.encoder.width = j.at("width").get<std::size_t>();
    c.encoder.depth = j.at("depth").get<std::size_t>();
    c.encoder.heads = j.at("heads").get<std::size_t>();
    c.encoder.lora_rank = j.at("lora_rank").get<std::size_t>();
    c.encoder.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.generator.in_channels = c.encoder.channels;
    c.generator.widths = j.at("generator_widths").get<std::array<std::size_t, 4>>();
    c.decoder_heads = j.at("decoder_heads").get<std::size_t>();
    c.decoder_rounds = j.at("decoder_rounds").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
}

namespace {

template <class T, class Cfg>
T build(const Cfg& cfg, std::uint64_t seed, std::uint64_t tag) {
  Rng rng(derive_seed(seed, tag));
  return T(cfg, rng);
}

}  // namespace

SacModel::SacModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  encoder = build<ImageEncoder>(cfg.encoder, cfg.seed, 1);
  generator = build<PromptGenerator>(cfg.generator, cfg.seed, 2);
  prompt_encoder = build<PromptEncoder>(cfg.encoder.width, cfg.seed, 3);
  decoder = build<MaskDecoder>(cfg.decoder(), cfg.seed, 4);
}

NamedParams SacModel::params() {
  NamedParams out;
  encoder.collect_params(out, "encoder");
  generator.collect_params(out, "generator");
  prompt_encoder.collect_params(out, "prompt_encoder");
  decoder.collect_params(out, "decoder");
  return out;
}

DecoderOutput SacModel::predict(const Tensor& image, const PromptSet& prompts) const {
  return decoder.decode(encoder.encode(image), prompt_encoder.encode(prompts, cfg_.encoder.image_size));
}

ProbabilityMap SacModel::prompt_map(const Tensor& image) const {
  return to_probability(generator.generate(image));
}

}  // namespace cellprompt
