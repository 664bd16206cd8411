// SPDX-License-Identifier: Apache-2.0
//
// Trainable mask decoder. Two learned output tokens (score, mask) are
// prepended to the prompt tokens; rounds of two-way attention exchange
// information between these tokens and the image tokens. The image tokens are
// then upscaled ×4 with transposed convolutions, the mask token is mapped by a
// small hypernetwork to per-channel weights, and their dot product gives mask
// logits that are resized bilinearly to the input resolution. The score token
// feeds a linear head with a sigmoid.
#pragma once

#include <vector>

#include "cellprompt/attention.hpp"
#include "cellprompt/image_encoder.hpp"
#include "cellprompt/prompt_encoder.hpp"

namespace cellprompt {

struct DecoderConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t cross_width = 32;  // internal width of token/image cross-attention
  std::size_t mlp_hidden = 128;
  std::size_t rounds = 2;
  std::size_t up1_channels = 16;
  std::size_t up2_channels = 8;
  std::size_t image_size = 64;
  std::size_t grid = 8;

  /// Factor of the final bilinear resize: image_size / (4·grid).
  std::size_t resize_factor() const { return image_size / (4 * grid); }
  void validate() const;
};

struct DecoderOutput {
  Tensor mask_logits;  // H×W
  double score = 0.0;  // in (0, 1)
};

class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(const DecoderConfig& cfg, Rng& rng);

  struct Round {
    ProjectedAttention self_attn;
    LayerNorm norm1;
    ProjectedAttention token_to_image;
    LayerNorm norm2;
    Mlp mlp;
    LayerNorm norm3;
    ProjectedAttention image_to_token;
    LayerNorm norm4;
  };

  struct RoundCache {
    ProjectedAttention::Cache self_attn;
    LayerNormCache norm1;
    ProjectedAttention::Cache token_to_image;
    LayerNormCache norm2;
    Mlp::Cache mlp;
    LayerNormCache norm3;
    ProjectedAttention::Cache image_to_token;
    LayerNormCache norm4;
  };

  struct Cache {
    std::size_t prompt_count = 0;
    std::vector<RoundCache> rounds;
    ProjectedAttention::Cache final_attn;
    LayerNormCache final_norm;
    Tensor grid;     // d×g×g after attention
    Tensor up1_pre;  // before ReLU
    Tensor up1;
    Tensor up2_pre;
    Tensor up2;      // c×4g×4g features
    Mlp::Cache hyper;
    Tensor hyper_out;  // 1×c
    Linear::Cache score_head;
    double score = 0.0;
  };

  DecoderOutput decode(const ImageEmbedding& image, const PromptEmbedding& prompts,
                       Cache* cache = nullptr) const;

  struct InputGrads {
    ImageEmbedding image;  // d×g×g
    Tensor prompts;        // n×d
  };
  /// Accumulates parameter gradients and returns gradients of the inputs.
  InputGrads backward(const Cache& cache, const Tensor& dmask_logits, double dscore);

  void collect_params(NamedParams& out, const std::string& prefix = "decoder");
  const DecoderConfig& config() const { return cfg_; }

  Param output_tokens;  // 2×d: row 0 score, row 1 mask
  std::vector<Round> rounds;
  ProjectedAttention final_attn;
  LayerNorm final_norm;
  Param up1_kernels, up1_bias;
  Param up2_kernels, up2_bias;
  Mlp hyper;
  Linear score_head;

 private:
  DecoderConfig cfg_;
  Tensor image_pe_;  // g²×d, fixed
};

DecoderOutput decode(const ImageEmbedding& image, const PromptEmbedding& prompts, const MaskDecoder& decoder);

/// 1 where logit ≥ threshold, else 0.
Tensor binarize(const DecoderOutput& out, double threshold = 0.0);
Tensor binarize(const Tensor& logits, double threshold = 0.0);

}  // namespace cellprompt
