// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "cellprompt/lora.hpp"
#include "cellprompt/nn.hpp"

namespace cellprompt {

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t width = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t lora_rank = 4;
  std::size_t mlp_ratio = 2;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
};

/// d × g × g feature grid, g = image_size / patch_size.
struct ImageEmbedding {
  Tensor grid;
};

/// Token-major view (g²×d) of an embedding grid, and back.
Tensor grid_to_tokens(const Tensor& grid);
Tensor tokens_to_grid(const Tensor& tokens, std::size_t g);

enum class TrainablePolicy { lora_only, full_ft, frozen };

/// ViT-style encoder: patch embedding + positional embedding, pre-norm
/// transformer blocks whose attention carries Q/V adapters, final layer norm.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const EncoderConfig& cfg, Rng& rng);

  struct Block {
    LayerNorm ln1;
    AdaptedAttention attn;
    LayerNorm ln2;
    Mlp mlp;
  };

  struct BlockCache {
    LayerNormCache ln1;
    AdaptedAttention::Cache attn;
    LayerNormCache ln2;
    Mlp::Cache mlp;
  };

  struct Cache {
    Linear::Cache patch;
    std::vector<BlockCache> blocks;
    LayerNormCache ln_out;
  };

  /// Token output (g²×d) before reshaping into a grid.
  Tensor forward_tokens(const Tensor& image, Cache* cache = nullptr) const;
  ImageEmbedding encode(const Tensor& image, Cache* cache = nullptr) const;
  /// Backpropagates a gradient on the token output (g²×d).
  void backward_tokens(const Cache& cache, const Tensor& dtokens);
  void backward(const Cache& cache, const ImageEmbedding& dembedding);

  void collect_params(NamedParams& out, const std::string& prefix = "encoder");
  std::vector<AdaptedAttention*> attention_layers();

  const EncoderConfig& config() const { return cfg_; }

  Linear patch_embed;
  Param pos_embed;  // g²×d
  std::vector<Block> blocks;
  LayerNorm ln_out;

 private:
  EncoderConfig cfg_;
};

/// Rearranges C×H×W into g²×(C·p²) patch rows (row-major over the patch grid).
Tensor patchify(const Tensor& image, std::size_t patch_size);

ImageEmbedding encode(const Tensor& image, const ImageEncoder& encoder);

/// lora_only: adapters only; full_ft: every encoder parameter; frozen: none.
void set_trainable_policy(ImageEncoder& encoder, TrainablePolicy policy);

}  // namespace cellprompt
