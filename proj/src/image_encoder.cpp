// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/image_encoder.hpp"

#include "cellprompt/errors.hpp"

namespace cellprompt {

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (heads == 0 || width % heads) {
    throw ConfigError("width " + std::to_string(width) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (lora_rank == 0 || lora_rank > width) throw ConfigError("lora_rank must be in [1, width]");
  if (depth == 0 || channels == 0 || mlp_ratio == 0) throw ConfigError("encoder sizes must be positive");
}

Tensor grid_to_tokens(const Tensor& grid) {
  if (grid.ndim() != 3 || grid.dim(1) != grid.dim(2)) {
    throw DimensionError("embedding grid must be d×g×g, got " + shape_str(grid.shape()));
  }
  const std::size_t d = grid.dim(0), t = grid.dim(1) * grid.dim(2);
  Tensor tokens({t, d});
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < t; ++i) tokens[i * d + c] = grid[c * t + i];
  }
  return tokens;
}

Tensor tokens_to_grid(const Tensor& tokens, std::size_t g) {
  if (tokens.ndim() != 2 || tokens.dim(0) != g * g) {
    throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not form a " +
                         std::to_string(g) + "×" + std::to_string(g) + " grid");
  }
  const std::size_t d = tokens.dim(1), t = g * g;
  Tensor grid({d, g, g});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < d; ++c) grid[c * t + i] = tokens[i * d + c];
  }
  return grid;
}

Tensor patchify(const Tensor& image, std::size_t p) {
  if (image.ndim() != 3 || image.dim(1) % p || image.dim(2) % p) {
    throw DimensionError("patchify: image " + shape_str(image.shape()) + " not divisible into " +
                         std::to_string(p) + "-pixel patches");
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t gh = h / p, gw = w / p, len = c * p * p;
  Tensor rows({gh * gw, len});
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = rows.ptr() + (gy * gw + gx) * len;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            *dst++ = image.at(ch, gy * p + py, gx * p + px);
          }
        }
      }
    }
  }
  return rows;
}

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.width;
  patch_embed = Linear(cfg_.channels * cfg_.patch_size * cfg_.patch_size, d, rng);
  pos_embed = Param(normal_tensor({cfg_.tokens(), d}, 0.02, rng));
  blocks.resize(cfg_.depth);
  for (auto& b : blocks) {
    b.ln1 = LayerNorm(d);
    b.attn = AdaptedAttention(d, cfg_.heads, cfg_.lora_rank, rng);
    b.ln2 = LayerNorm(d);
    b.mlp = Mlp(d, cfg_.mlp_ratio * d, d, rng);
  }
  ln_out = LayerNorm(d);
  set_trainable_policy(*this, TrainablePolicy::lora_only);
}

Tensor ImageEncoder::forward_tokens(const Tensor& image, Cache* cache) const {
  if (image.shape() != Shape{cfg_.channels, cfg_.image_size, cfg_.image_size}) {
    throw DimensionError("encoder expects image " +
                         shape_str({cfg_.channels, cfg_.image_size, cfg_.image_size}) + ", got " +
                         shape_str(image.shape()));
  }
  Tensor x = patch_embed.forward(patchify(image, cfg_.patch_size), cache ? &cache->patch : nullptr);
  add_inplace(x, pos_embed.value);
  if (cache) cache->blocks.assign(blocks.size(), {});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    BlockCache* bc = cache ? &cache->blocks[i] : nullptr;
    const Tensor a = b.attn.forward(b.ln1.forward(x, bc ? &bc->ln1 : nullptr), bc ? &bc->attn : nullptr);
    add_inplace(x, a);
    const Tensor m = b.mlp.forward(b.ln2.forward(x, bc ? &bc->ln2 : nullptr), bc ? &bc->mlp : nullptr);
    add_inplace(x, m);
  }
  return ln_out.forward(x, cache ? &cache->ln_out : nullptr);
}

ImageEmbedding ImageEncoder::encode(const Tensor& image, Cache* cache) const {
  return {tokens_to_grid(forward_tokens(image, cache), cfg_.grid())};
}

void ImageEncoder::backward_tokens(const Cache& cache, const Tensor& dtokens) {
  Tensor dx = ln_out.backward(cache.ln_out, dtokens);
  for (std::size_t i = blocks.size(); i-- > 0;) {
    Block& b = blocks[i];
    const BlockCache& bc = cache.blocks[i];
    add_inplace(dx, b.ln2.backward(bc.ln2, b.mlp.backward(bc.mlp, dx)));
    add_inplace(dx, b.ln1.backward(bc.ln1, b.attn.backward(bc.attn, dx)));
  }
  pos_embed.accumulate(dx);
  patch_embed.backward(cache.patch, dx, false);
}

void ImageEncoder::backward(const Cache& cache, const ImageEmbedding& dembedding) {
  backward_tokens(cache, grid_to_tokens(dembedding.grid));
}

void ImageEncoder::collect_params(NamedParams& out, const std::string& prefix) {
  patch_embed.collect_params(out, join_name(prefix, "patch_embed"));
  out.emplace_back(join_name(prefix, "pos_embed"), &pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string bp = join_name(prefix, "blocks." + std::to_string(i));
    blocks[i].ln1.collect_params(out, join_name(bp, "ln1"));
    blocks[i].attn.collect_params(out, join_name(bp, "attn"));
    blocks[i].ln2.collect_params(out, join_name(bp, "ln2"));
    blocks[i].mlp.collect_params(out, join_name(bp, "mlp"));
  }
  ln_out.collect_params(out, join_name(prefix, "ln_out"));
}

std::vector<AdaptedAttention*> ImageEncoder::attention_layers() {
  std::vector<AdaptedAttention*> layers;
  for (auto& b : blocks) layers.push_back(&b.attn);
  return layers;
}

ImageEmbedding encode(const Tensor& image, const ImageEncoder& encoder) { return encoder.encode(image); }

void set_trainable_policy(ImageEncoder& encoder, TrainablePolicy policy) {
  NamedParams params;
  encoder.collect_params(params);
  set_trainable(params, policy == TrainablePolicy::full_ft);
  if (policy == TrainablePolicy::lora_only) {
    for (AdaptedAttention* layer : encoder.attention_layers()) layer->set_lora_only();
  }
}

}  // namespace cellprompt
