// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/mask_decoder.hpp"

#include <cmath>

#include "cellprompt/errors.hpp"

namespace cellprompt {

namespace {

Tensor stack_rows(const Tensor& a, const Tensor& b) {
  const std::size_t d = a.dim(1);
  Tensor out({a.dim(0) + b.dim(0), d});
  std::copy(a.ptr(), a.ptr() + a.size(), out.ptr());
  std::copy(b.ptr(), b.ptr() + b.size(), out.ptr() + a.size());
  return out;
}

Tensor rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.dim(1);
  Tensor out({end - begin, d});
  std::copy(x.ptr() + begin * d, x.ptr() + end * d, out.ptr());
  return out;
}

void add_rows(Tensor& x, std::size_t begin, const Tensor& src) {
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < src.size(); ++i) x[begin * d + i] += src[i];
}

}  // namespace

void DecoderConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads) throw ConfigError("decoder width must be divisible by heads");
  if (cross_width == 0 || cross_width % heads) throw ConfigError("decoder cross width must be divisible by heads");
  if (rounds == 0) throw ConfigError("decoder needs at least one attention round");
  if (grid == 0 || image_size % (4 * grid)) {
    throw ConfigError("decoder image size must be a multiple of 4·grid (got " + std::to_string(image_size) +
                      " and grid " + std::to_string(grid) + ")");
  }
}

MaskDecoder::MaskDecoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const std::size_t d = cfg.width;
  output_tokens = Param(normal_tensor({2, d}, 1.0, rng));
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    Round round{ProjectedAttention(d, d, cfg.heads, rng),
                LayerNorm(d),
                ProjectedAttention(d, cfg.cross_width, cfg.heads, rng),
                LayerNorm(d),
                Mlp(d, cfg.mlp_hidden, d, rng),
                LayerNorm(d),
                ProjectedAttention(d, cfg.cross_width, cfg.heads, rng),
                LayerNorm(d)};
    rounds.push_back(std::move(round));
  }
  final_attn = ProjectedAttention(d, cfg.cross_width, cfg.heads, rng);
  final_norm = LayerNorm(d);
  up1_kernels = Param(normal_tensor({d, cfg.up1_channels, 2, 2}, std::sqrt(2.0 / static_cast<double>(d)), rng));
  up1_bias = Param(Tensor({cfg.up1_channels}));
  up2_kernels = Param(normal_tensor({cfg.up1_channels, cfg.up2_channels, 2, 2},
                                    std::sqrt(2.0 / static_cast<double>(cfg.up1_channels)), rng));
  up2_bias = Param(Tensor({cfg.up2_channels}));
  hyper = Mlp(d, d, cfg.up2_channels, rng);
  score_head = Linear(d, 1, rng);
  image_pe_ = dense_positional_encoding(cfg.grid, cfg.image_size, d);
}

DecoderOutput MaskDecoder::decode(const ImageEmbedding& image, const PromptEmbedding& prompts, Cache* cache) const {
  const std::size_t d = cfg_.width, g = cfg_.grid;
  if (image.grid.shape() != Shape{d, g, g}) {
    throw DimensionError("decoder expects a " + shape_str({d, g, g}) + " image embedding, got " +
                         shape_str(image.grid.shape()));
  }
  if (prompts.tokens.ndim() != 2 || prompts.tokens.dim(1) != d || prompts.tokens.dim(0) == 0) {
    throw DimensionError("decoder expects n×" + std::to_string(d) + " prompt tokens, got " +
                         shape_str(prompts.tokens.shape()));
  }
  if (cache) {
    cache->prompt_count = prompts.tokens.dim(0);
    cache->rounds.assign(rounds.size(), RoundCache{});
  }

  const Tensor t0 = stack_rows(output_tokens.value, prompts.tokens);
  Tensor t = t0;
  Tensor x = grid_to_tokens(image.grid);
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    const Round& rd = rounds[r];
    RoundCache* rc = cache ? &cache->rounds[r] : nullptr;
    Tensor q = add(t, t0);
    Tensor a = rd.self_attn.forward(q, q, t, rc ? &rc->self_attn : nullptr);
    t = rd.norm1.forward(add(t, a), rc ? &rc->norm1 : nullptr);

    const Tensor xk = add(x, image_pe_);
    a = rd.token_to_image.forward(add(t, t0), xk, x, rc ? &rc->token_to_image : nullptr);
    t = rd.norm2.forward(add(t, a), rc ? &rc->norm2 : nullptr);

    a = rd.mlp.forward(t, rc ? &rc->mlp : nullptr);
    t = rd.norm3.forward(add(t, a), rc ? &rc->norm3 : nullptr);

    a = rd.image_to_token.forward(xk, add(t, t0), t, rc ? &rc->image_to_token : nullptr);
    x = rd.norm4.forward(add(x, a), rc ? &rc->norm4 : nullptr);
  }
  const Tensor a = final_attn.forward(add(t, t0), add(x, image_pe_), x, cache ? &cache->final_attn : nullptr);
  t = final_norm.forward(add(t, a), cache ? &cache->final_norm : nullptr);

  const Tensor grid = tokens_to_grid(x, g);
  const Tensor up1_pre = add_channel_bias(conv_transpose2d(grid, up1_kernels.value, 2), up1_bias.value);
  const Tensor up1 = relu(up1_pre);
  const Tensor up2_pre = add_channel_bias(conv_transpose2d(up1, up2_kernels.value, 2), up2_bias.value);
  const Tensor up2 = relu(up2_pre);

  const std::size_t c = cfg_.up2_channels, side = 4 * g;
  const Tensor h = hyper.forward(rows(t, 1, 2), cache ? &cache->hyper : nullptr);
  Tensor low = matmul(h, up2.reshaped({c, side * side})).reshaped({side, side});
  const std::size_t f = cfg_.resize_factor();
  Tensor logits = f == 1 ? low : upsample_bilinear(low, static_cast<int>(f));

  const Tensor s = score_head.forward(rows(t, 0, 1), cache ? &cache->score_head : nullptr);
  const double score = sigmoid(s[0]);

  if (cache) {
    cache->grid = grid;
    cache->up1_pre = up1_pre;
    cache->up1 = up1;
    cache->up2_pre = up2_pre;
    cache->up2 = up2;
    cache->hyper_out = h;
    cache->score = score;
  }
  return {std::move(logits), score};
}

MaskDecoder::InputGrads MaskDecoder::backward(const Cache& cache, const Tensor& dmask_logits, double dscore) {
  const std::size_t d = cfg_.width, g = cfg_.grid, n = cache.prompt_count + 2;
  const std::size_t c = cfg_.up2_channels, side = 4 * g;
  const std::size_t f = cfg_.resize_factor();
  const Tensor dlow = (f == 1 ? dmask_logits : upsample_bilinear_backward(dmask_logits, static_cast<int>(f)))
                          .reshaped({1, side * side});
  const Tensor feats = cache.up2.reshaped({c, side * side});

  Tensor dt({n, d});
  Tensor dt0({n, d});
  add_rows(dt, 1, hyper.backward(cache.hyper, matmul_nt(dlow, feats)));
  const double ds = dscore * cache.score * (1.0 - cache.score);
  add_rows(dt, 0, score_head.backward(cache.score_head, Tensor({1, 1}, {ds})));

  const Tensor dup2_pre = relu_backward(cache.up2_pre, matmul_tn(cache.hyper_out, dlow).reshaped(cache.up2.shape()));
  up2_bias.accumulate(channel_bias_backward(dup2_pre));
  Conv2dGrads cg = conv_transpose2d_backward(cache.up1, up2_kernels.value, 2, dup2_pre);
  up2_kernels.accumulate(cg.dkernels);
  const Tensor dup1_pre = relu_backward(cache.up1_pre, cg.dinput);
  up1_bias.accumulate(channel_bias_backward(dup1_pre));
  cg = conv_transpose2d_backward(cache.grid, up1_kernels.value, 2, dup1_pre);
  up1_kernels.accumulate(cg.dkernels);
  Tensor dx = grid_to_tokens(cg.dinput);

  {
    const Tensor dsum = final_norm.backward(cache.final_norm, dt);
    dt = dsum;
    const MhaGrads ga = final_attn.backward(cache.final_attn, dsum);
    add_inplace(dt, ga.dq);
    add_inplace(dt0, ga.dq);
    add_inplace(dx, ga.dk);
    add_inplace(dx, ga.dv);
  }
  for (std::size_t r = rounds.size(); r-- > 0;) {
    Round& rd = rounds[r];
    const RoundCache& rc = cache.rounds[r];

    Tensor dsum = rd.norm4.backward(rc.norm4, dx);
    dx = dsum;
    MhaGrads ga = rd.image_to_token.backward(rc.image_to_token, dsum);
    add_inplace(dx, ga.dq);
    add_inplace(dt, ga.dk);
    add_inplace(dt0, ga.dk);
    add_inplace(dt, ga.dv);

    dsum = rd.norm3.backward(rc.norm3, dt);
    dt = dsum;
    add_inplace(dt, rd.mlp.backward(rc.mlp, dsum));

    dsum = rd.norm2.backward(rc.norm2, dt);
    dt = dsum;
    ga = rd.token_to_image.backward(rc.token_to_image, dsum);
    add_inplace(dt, ga.dq);
    add_inplace(dt0, ga.dq);
    add_inplace(dx, ga.dk);
    add_inplace(dx, ga.dv);

    dsum = rd.norm1.backward(rc.norm1, dt);
    dt = dsum;
    ga = rd.self_attn.backward(rc.self_attn, dsum);
    const Tensor dqk = add(ga.dq, ga.dk);
    add_inplace(dt, dqk);
    add_inplace(dt0, dqk);
    add_inplace(dt, ga.dv);
  }
  add_inplace(dt0, dt);
  output_tokens.accumulate(rows(dt0, 0, 2));
  return {ImageEmbedding{tokens_to_grid(dx, g)}, rows(dt0, 2, n)};
}

void MaskDecoder::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "output_tokens"), &output_tokens);
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    const std::string p = join_name(prefix, "rounds." + std::to_string(r));
    Round& rd = rounds[r];
    rd.self_attn.collect_params(out, join_name(p, "self_attn"));
    rd.norm1.collect_params(out, join_name(p, "norm1"));
    rd.token_to_image.collect_params(out, join_name(p, "token_to_image"));
    rd.norm2.collect_params(out, join_name(p, "norm2"));
    rd.mlp.collect_params(out, join_name(p, "mlp"));
    rd.norm3.collect_params(out, join_name(p, "norm3"));
    rd.image_to_token.collect_params(out, join_name(p, "image_to_token"));
    rd.norm4.collect_params(out, join_name(p, "norm4"));
  }
  final_attn.collect_params(out, join_name(prefix, "final_attn"));
  final_norm.collect_params(out, join_name(prefix, "final_norm"));
  out.emplace_back(join_name(prefix, "up1.kernels"), &up1_kernels);
  out.emplace_back(join_name(prefix, "up1.bias"), &up1_bias);
  out.emplace_back(join_name(prefix, "up2.kernels"), &up2_kernels);
  out.emplace_back(join_name(prefix, "up2.bias"), &up2_bias);
  hyper.collect_params(out, join_name(prefix, "hyper"));
  score_head.collect_params(out, join_name(prefix, "score_head"));
}

DecoderOutput decode(const ImageEmbedding& image, const PromptEmbedding& prompts, const MaskDecoder& decoder) {
  return decoder.decode(image, prompts);
}

Tensor binarize(const Tensor& logits, double threshold) {
  Tensor out = Tensor::zeros_like(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] >= threshold ? 1.0 : 0.0;
  return out;
}

Tensor binarize(const DecoderOutput& out, double threshold) { return binarize(out.mask_logits, threshold); }

}  // namespace cellprompt
