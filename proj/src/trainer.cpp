// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cellprompt/errors.hpp"
#include "cellprompt/rng.hpp"

namespace cellprompt {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kPretrainData = 0x70726574;
constexpr std::uint64_t kPretrainInit = 0x70726569;
constexpr std::uint64_t kPretrainOrder = 0x7072656f;
constexpr std::uint64_t kGeneratorOrder = 0x67656e6f;
constexpr std::uint64_t kSacOrder = 0x7361636f;
constexpr std::uint64_t kTrainPrompts = 0x74727070;
constexpr std::uint64_t kInferPrompts = 0x696e6670;

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

NamedParams trainable_only(const NamedParams& all) {
  NamedParams out;
  for (const auto& np : all) {
    if (np.second->trainable) out.push_back(np);
  }
  return out;
}

void scale_grads(const NamedParams& params, double s) {
  for (const auto& np : params) np.second->grad = scale(np.second->grad, s);
}

void check_finite(double loss, const std::string& phase, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError(phase + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(step));
  }
}

void report(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

}  // namespace

TrainMode parse_train_mode(const std::string& name) {
  if (name == "sac") return TrainMode::sac;
  if (name == "sam-ft") return TrainMode::sam_ft;
  if (name == "frozen") return TrainMode::frozen;
  throw ConfigError("unknown mode '" + name + "' (expected sac, sam-ft or frozen)");
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::sac: return "sac";
    case TrainMode::sam_ft: return "sam-ft";
    case TrainMode::frozen: return "frozen";
  }
  return "?";
}

TrainablePolicy encoder_policy(TrainMode mode) {
  switch (mode) {
    case TrainMode::sac: return TrainablePolicy::lora_only;
    case TrainMode::sam_ft: return TrainablePolicy::full_ft;
    case TrainMode::frozen: return TrainablePolicy::frozen;
  }
  return TrainablePolicy::frozen;
}

ExpertsAt parse_experts_at(const std::string& name) {
  if (name == "train") return ExpertsAt::train;
  if (name == "infer") return ExpertsAt::infer;
  if (name == "both") return ExpertsAt::both;
  throw ConfigError("unknown experts-at value '" + name + "' (expected train, infer or both)");
}

std::string to_string(ExpertsAt where) {
  switch (where) {
    case ExpertsAt::train: return "train";
    case ExpertsAt::infer: return "infer";
    case ExpertsAt::both: return "both";
  }
  return "?";
}

void EarlyStopConfig::validate() const {
  if (min_epochs < 1) throw ConfigError("min_epochs must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
}

std::size_t stopping_epoch(std::size_t best_epoch, const EarlyStopConfig& cfg) {
  return std::max(cfg.min_epochs, best_epoch + cfg.patience);
}

bool EarlyStopper::update(std::size_t epoch, double value) {
  const bool better = best_epoch_ == 0 || (higher_ ? value > best_ : value < best_);
  if (better) {
    best_epoch_ = epoch;
    best_ = value;
  }
  return better;
}

bool EarlyStopper::should_stop(std::size_t epoch) const {
  return epoch >= cfg_.max_epochs || epoch >= stopping_epoch(best_epoch_, cfg_);
}

void TrainConfig::validate() const {
  stop.validate();
  generator.stop.validate();
  loss.validate();
  if (batch_size == 0 || generator.batch_size == 0 || pretrain.batch_size == 0) {
    throw ConfigError("batch sizes must be at least 1");
  }
  if (!(lr > 0.0) || !(generator.lr > 0.0) || !(pretrain.lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(selection.tau_bin > 0.0 && selection.tau_bin < 1.0)) throw ConfigError("tau_bin must lie in (0, 1)");
  if (!(selection.tau > 0.0 && selection.tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["points"] = c.points;
  j["experts"] = c.experts;
  j["experts_at"] = to_string(c.experts_at);
  j["select"] = to_string(c.selection.method);
  j["tau_bin"] = c.selection.tau_bin;
  j["tau"] = c.selection.tau;
  j["connectivity"] = c.selection.connectivity == Connectivity::four ? 4 : 8;
  j["min_epochs"] = c.stop.min_epochs;
  j["patience"] = c.stop.patience;
  j["max_epochs"] = c.stop.max_epochs;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["seed"] = c.seed;
  j["alpha_t"] = c.loss.alpha_t;
  j["gamma"] = c.loss.gamma;
  j["focal_weight"] = c.loss.focal_weight;
  j["dice_weight"] = c.loss.dice_weight;
  j["score_weight"] = c.loss.score_weight;
  j["loss_eps"] = c.loss.eps;
  j["ce_term"] = to_string(c.loss.ce_term);
  j["joint"] = c.joint;
  j["pretrain_samples"] = c.pretrain.samples;
  j["pretrain_steps"] = c.pretrain.steps;
  j["pretrain_batch_size"] = c.pretrain.batch_size;
  j["pretrain_lr"] = c.pretrain.lr;
  j["gen_min_epochs"] = c.generator.stop.min_epochs;
  j["gen_patience"] = c.generator.stop.patience;
  j["gen_max_epochs"] = c.generator.stop.max_epochs;
  j["gen_batch_size"] = c.generator.batch_size;
  j["gen_lr"] = c.generator.lr;
  j["erosion_radius"] = c.generator.erosion_radius;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.points = j.at("points").get<std::size_t>();
    c.experts = j.at("experts").get<std::size_t>();
    c.experts_at = parse_experts_at(j.at("experts_at").get<std::string>());
    c.selection.method = parse_selection_method(j.at("select").get<std::string>());
    c.selection.tau_bin = j.at("tau_bin").get<double>();
    c.selection.tau = j.at("tau").get<double>();
    c.selection.connectivity = j.at("connectivity").get<int>() == 8 ? Connectivity::eight : Connectivity::four;
    c.stop.min_epochs = j.at("min_epochs").get<std::size_t>();
    c.stop.patience = j.at("patience").get<std::size_t>();
    c.stop.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.optimizer = j.at("optimizer").get<std::string>() == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.loss.alpha_t = j.at("alpha_t").get<double>();
    c.loss.gamma = j.at("gamma").get<double>();
    c.loss.focal_weight = j.at("focal_weight").get<double>();
    c.loss.dice_weight = j.at("dice_weight").get<double>();
    c.loss.score_weight = j.at("score_weight").get<double>();
    c.loss.eps = j.at("loss_eps").get<double>();
    c.loss.ce_term = parse_ce_term(j.at("ce_term").get<std::string>());
    c.joint = j.at("joint").get<bool>();
    c.pretrain.samples = j.at("pretrain_samples").get<std::size_t>();
    c.pretrain.steps = j.at("pretrain_steps").get<std::size_t>();
    c.pretrain.batch_size = j.at("pretrain_batch_size").get<std::size_t>();
    c.pretrain.lr = j.at("pretrain_lr").get<double>();
    c.generator.stop.min_epochs = j.at("gen_min_epochs").get<std::size_t>();
    c.generator.stop.patience = j.at("gen_patience").get<std::size_t>();
    c.generator.stop.max_epochs = j.at("gen_max_epochs").get<std::size_t>();
    c.generator.batch_size = j.at("gen_batch_size").get<std::size_t>();
    c.generator.lr = j.at("gen_lr").get<double>();
    c.generator.erosion_radius = j.at("erosion_radius").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid training config: ") + e.what());
  }
}

Dataset load_dataset(const std::string& root) {
  Dataset d;
  d.train = load_split(root, "train");
  d.val = load_split(root, "val");
  d.test = load_split(root, "test");
  if (d.train.empty() || d.val.empty()) throw ConfigError("dataset at " + root + " has an empty train or val split");
  return d;
}

AuditReport audit_params(const std::vector<CheckpointTensor>& before, const NamedParams& after) {
  if (before.size() != after.size()) throw ValidationError("audit: parameter lists differ in length");
  AuditReport r;
  for (std::size_t i = 0; i < after.size(); ++i) {
    const auto& [name, p] = after[i];
    if (before[i].name != name) throw ValidationError("audit: parameter order changed at " + name);
    const bool changed = !(before[i].value == p->value);
    if (changed) r.changed.push_back(name);
    if (p->trainable) r.trainable.push_back(name);
    if (changed && !p->trainable) r.frozen_unchanged = false;
  }
  return r;
}

std::pair<double, double> pretrain_encoder(ImageEncoder& encoder, const PretrainConfig& cfg, std::uint64_t seed) {
  const EncoderConfig& ec = encoder.config();
  DatagenConfig dg;
  dg.image_size = ec.image_size;
  const std::vector<SyntheticSample> data = generate_dataset(std::max<std::size_t>(cfg.samples, 1),
                                                             derive_seed(seed, kPretrainData), dg);
  std::vector<Tensor> targets;
  for (const SyntheticSample& s : data) targets.push_back(patchify(s.image, ec.patch_size));

  Rng init(derive_seed(seed, kPretrainInit));
  Linear head(ec.width, ec.channels * ec.patch_size * ec.patch_size, init);
  NamedParams params;
  encoder.collect_params(params);
  set_trainable(params, true);
  for (AdaptedAttention* layer : encoder.attention_layers()) {
    layer->adapter_q.a.trainable = layer->adapter_q.b.trainable = false;
    layer->adapter_v.a.trainable = layer->adapter_v.b.trainable = false;
  }
  head.collect_params(params, "proxy_head");
  const NamedParams trainable = trainable_only(params);
  OptimizerConfig oc;
  oc.lr = cfg.lr;
  Optimizer opt(oc);

  double first = 0.0, last = 0.0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0, pass = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    zero_grads(params);
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order = shuffled(data.size(), derive_seed(seed, kPretrainOrder, pass++));
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      ImageEncoder::Cache ecache;
      Linear::Cache hcache;
      const Tensor recon = head.forward(encoder.forward_tokens(data[i].image, &ecache), &hcache);
      Tensor diff = add(recon, neg(targets[i]));
      double sq = 0.0;
      for (double v : diff.data()) sq += v * v;
      const double n = static_cast<double>(diff.size());
      total += sq / n;
      encoder.backward_tokens(ecache, head.backward(hcache, scale(diff, 2.0 / (n * cfg.batch_size))));
    }
    total /= static_cast<double>(cfg.batch_size);
    check_finite(total, "encoder pretraining", 1, step + 1);
    if (step == 0) first = total;
    last = total;
    opt.step(trainable);
  }
  zero_grads(params);
  set_trainable_policy(encoder, TrainablePolicy::lora_only);
  return {first, last};
}

std::pair<Tensor, Tensor> generator_targets(const Tensor& gt_mask, std::size_t erosion_radius) {
  return {gt_mask, eroded_background(gt_mask, erosion_radius)};
}

namespace {

double generator_val_loss(const PromptGenerator& gen, const std::vector<LabeledImage>& val, std::size_t erosion) {
  double total = 0.0;
  for (const LabeledImage& s : val) {
    const auto [tp, tn] = generator_targets(s.mask, erosion);
    total += generator_loss(gen.generate(s.image), tp, tn);
  }
  return val.empty() ? 0.0 : total / static_cast<double>(val.size());
}

}  // namespace

std::vector<GeneratorEpoch> train_generator(PromptGenerator& generator, const std::vector<LabeledImage>& train,
                                            const std::vector<LabeledImage>& val, const GeneratorTrainConfig& cfg,
                                            std::uint64_t seed, const ProgressFn& progress) {
  if (train.empty()) throw ValidationError("generator training needs a non-empty training split");
  NamedParams params;
  generator.collect_params(params);
  set_trainable(params, true);
  OptimizerConfig oc;
  oc.lr = cfg.lr;
  Optimizer opt(oc);
  std::vector<std::pair<Tensor, Tensor>> targets;
  for (const LabeledImage& s : train) targets.push_back(generator_targets(s.mask, cfg.erosion_radius));

  EarlyStopper stopper(cfg.stop, false);
  std::vector<CheckpointTensor> best = capture_params(params);
  std::vector<GeneratorEpoch> log;
  std::size_t step = 0;
  for (std::size_t epoch = 1;; ++epoch) {
    const std::vector<std::size_t> order = shuffled(train.size(), derive_seed(seed, kGeneratorOrder, epoch));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        PromptGenerator::Cache cache;
        Tensor dlogits;
        const double loss =
            generator_loss(generator.generate(train[i].image, &cache), targets[i].first, targets[i].second, &dlogits);
        check_finite(loss, "generator training", epoch, step + 1);
        epoch_loss += loss;
        generator.backward(cache, dlogits);
      }
      scale_grads(params, 1.0 / static_cast<double>(end - start));
      opt.step(params);
      ++step;
    }
    GeneratorEpoch e{epoch, epoch_loss / static_cast<double>(train.size()),
                     generator_val_loss(generator, val, cfg.erosion_radius)};
    check_finite(e.val_loss, "generator validation", epoch, step);
    log.push_back(e);
    if (stopper.update(epoch, e.val_loss)) best = capture_params(params);
    report(progress, "generator epoch " + std::to_string(epoch) + " train_loss " + std::to_string(e.train_loss) +
                         " val_loss " + std::to_string(e.val_loss));
    if (stopper.should_stop(epoch)) break;
  }
  restore_params(params, best);
  return log;
}

std::uint64_t prompt_seed(const TrainConfig& cfg, PromptStage stage, std::size_t epoch, std::size_t index) {
  return derive_seed(derive_seed(cfg.seed, stage == PromptStage::train ? kTrainPrompts : kInferPrompts), epoch,
                     index);
}

PromptSet build_prompts(const ProbabilityMap* map, const Tensor& gt_mask, const TrainConfig& cfg, PromptStage stage,
                        std::uint64_t stream_seed) {
  PromptSet prompts(PromptSource::automatic);
  if (cfg.points > 0) {
    if (!map) throw ValidationError("automatic prompts requested without a probability map");
    prompts = select_prompts(*map, cfg.selection, cfg.points, stream_seed);
  }
  const bool experts_here = stage == PromptStage::train ? cfg.experts_at != ExpertsAt::infer
                                                        : cfg.experts_at != ExpertsAt::train;
  if (cfg.experts > 0 && experts_here) prompts = merge_prompts(prompts, expert_prompts(gt_mask, cfg.experts));
  return prompts;
}

namespace {

// Probability maps of a frozen generator, computed once.
std::vector<ProbabilityMap> prompt_maps(const SacModel& model, const std::vector<LabeledImage>& images) {
  std::vector<ProbabilityMap> maps;
  maps.reserve(images.size());
  for (const LabeledImage& s : images) maps.push_back(model.prompt_map(s.image));
  return maps;
}

double validation_dice(const SacModel& model, const std::vector<LabeledImage>& val, const TrainConfig& cfg,
                       const std::vector<ProbabilityMap>& maps, const std::vector<ImageEmbedding>& embeddings) {
  double total = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const ProbabilityMap* map = cfg.points > 0 ? &maps[i] : nullptr;
    const PromptSet prompts = build_prompts(map, val[i].mask, cfg, PromptStage::infer, prompt_seed(cfg, PromptStage::infer, 0, i));
    const ImageEmbedding emb = embeddings.empty() ? model.encoder.encode(val[i].image) : embeddings[i];
    const DecoderOutput out =
        model.decoder.decode(emb, model.prompt_encoder.encode(prompts, model.config().encoder.image_size));
    total += compute_metrics(binarize(out), val[i].mask).dice;
  }
  return total / static_cast<double>(val.size());
}

}  // namespace

TrainResult train_sac(SacModel& model, const Dataset& data, const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw ValidationError("training needs non-empty train and val splits");
  const std::size_t image_size = model.config().encoder.image_size;

  set_trainable_policy(model.encoder, encoder_policy(cfg.mode));
  NamedParams gen_params;
  model.generator.collect_params(gen_params);
  const bool joint = cfg.joint && cfg.points > 0;
  set_trainable(gen_params, joint);
  NamedParams pe_params;
  model.prompt_encoder.collect_params(pe_params);
  set_trainable(pe_params, false);
  NamedParams dec_params;
  model.decoder.collect_params(dec_params);
  set_trainable(dec_params, true);

  NamedParams all = model.params();
  const NamedParams trainable = trainable_only(all);
  zero_grads(all);
  const std::vector<CheckpointTensor> start = capture_params(all);

  const bool encoder_frozen = cfg.mode == TrainMode::frozen;
  const bool use_maps = cfg.points > 0;
  std::vector<ImageEmbedding> train_emb, val_emb;
  if (encoder_frozen) {
    for (const LabeledImage& s : data.train) train_emb.push_back(model.encoder.encode(s.image));
    for (const LabeledImage& s : data.val) val_emb.push_back(model.encoder.encode(s.image));
  }
  std::vector<ProbabilityMap> train_maps, val_maps;
  std::vector<PromptSet> cached_prompts;
  const bool deterministic_selection = cfg.selection.method != SelectionMethod::random;
  if (use_maps && !joint) {
    train_maps = prompt_maps(model, data.train);
    val_maps = prompt_maps(model, data.val);
    if (deterministic_selection) {
      for (std::size_t i = 0; i < data.train.size(); ++i) {
        cached_prompts.push_back(build_prompts(&train_maps[i], data.train[i].mask, cfg, PromptStage::train, 0));
      }
    }
  }

  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.lr = cfg.lr;
  Optimizer opt(oc);
  OptimizerConfig goc = oc;
  goc.lr = cfg.generator.lr;
  Optimizer gen_opt(goc);
  const NamedParams gen_trainable = joint ? gen_params : NamedParams{};
  NamedParams sac_trainable;
  for (const auto& np : trainable) {
    if (np.first.rfind("generator.", 0) != 0) sac_trainable.push_back(np);
  }

  EarlyStopper stopper(cfg.stop, true);
  std::vector<CheckpointTensor> best = capture_params(trainable);
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1;; ++epoch) {
    const std::vector<std::size_t> order = shuffled(data.train.size(), derive_seed(cfg.seed, kSacOrder, epoch));
    double epoch_loss = 0.0;
    for (std::size_t start_i = 0; start_i < order.size(); start_i += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start_i + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start_i);
      for (const auto& np : trainable) np.second->zero_grad();
      ++step;
      for (std::size_t k = start_i; k < end; ++k) {
        const std::size_t i = order[k];
        const LabeledImage& s = data.train[i];

        PromptSet prompts;
        if (joint) {
          PromptGenerator::Cache gcache;
          const GeneratorOutput gout = model.generator.generate(s.image, &gcache);
          const auto [tp, tn] = generator_targets(s.mask, cfg.generator.erosion_radius);
          Tensor dlogits;
          const double gl = generator_loss(gout, tp, tn, &dlogits);
          check_finite(gl, "joint generator training", epoch, step);
          model.generator.backward(gcache, scale(dlogits, inv_batch));
          const ProbabilityMap map = to_probability(gout);
          prompts = build_prompts(&map, s.mask, cfg, PromptStage::train, prompt_seed(cfg, PromptStage::train, epoch, i));
        } else if (!cached_prompts.empty()) {
          prompts = cached_prompts[i];
        } else {
          prompts = build_prompts(use_maps ? &train_maps[i] : nullptr, s.mask, cfg, PromptStage::train,
                                  prompt_seed(cfg, PromptStage::train, epoch, i));
        }

        ImageEncoder::Cache ecache;
        const ImageEmbedding emb = encoder_frozen ? train_emb[i] : model.encoder.encode(s.image, &ecache);
        MaskDecoder::Cache dcache;
        const DecoderOutput out = model.decoder.decode(emb, model.prompt_encoder.encode(prompts, image_size), &dcache);
        const SegmentationLoss loss = segmentation_loss(out, s.mask, cfg.loss);
        check_finite(loss.total, "fine-tuning", epoch, step);
        epoch_loss += loss.total;
        const MaskDecoder::InputGrads ig =
            model.decoder.backward(dcache, scale(loss.dlogits, inv_batch), loss.dscore * inv_batch);
        if (!encoder_frozen) model.encoder.backward(ecache, ig.image);
      }
      opt.step(sac_trainable);
      if (!gen_trainable.empty()) gen_opt.step(gen_trainable);
    }
    if (joint) val_maps = prompt_maps(model, data.val);
    SacEpoch e{epoch, epoch_loss / static_cast<double>(data.train.size()),
               validation_dice(model, data.val, cfg, val_maps, val_emb)};
    result.log.push_back(e);
    if (stopper.update(epoch, e.val_dice)) best = capture_params(trainable);
    report(progress, "epoch " + std::to_string(epoch) + " train_loss " + std::to_string(e.train_loss) + " val_dice " +
                         std::to_string(e.val_dice));
    if (stopper.should_stop(epoch)) break;
  }
  restore_params(trainable, best);
  for (const auto& np : all) np.second->zero_grad();
  result.best_epoch = stopper.best_epoch();
  result.best_val_dice = stopper.best_value();
  result.audit = audit_params(start, all);
  return result;
}

TrainResult train_pipeline(SacModel& model, const Dataset& data, const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  report(progress, "pretraining encoder base");
  const auto [first, last] = pretrain_encoder(model.encoder, cfg.pretrain, cfg.seed);
  report(progress, "pretraining loss " + std::to_string(first) + " -> " + std::to_string(last));
  std::vector<GeneratorEpoch> gen_log;
  if (cfg.points > 0) {
    gen_log = train_generator(model.generator, data.train, data.val, cfg.generator, cfg.seed, progress);
  }
  TrainResult r = train_sac(model, data, cfg, progress);
  r.pretrain_initial_loss = first;
  r.pretrain_final_loss = last;
  r.generator_log = std::move(gen_log);
  return r;
}

Evaluation evaluate(const SacModel& model, const std::vector<LabeledImage>& images, const TrainConfig& cfg) {
  Evaluation ev;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const LabeledImage& s = images[i];
    ProbabilityMap map;
    if (cfg.points > 0) map = model.prompt_map(s.image);
    const PromptSet prompts = build_prompts(cfg.points > 0 ? &map : nullptr, s.mask, cfg, PromptStage::infer,
                                            prompt_seed(cfg, PromptStage::infer, 0, i));
    ev.per_image.push_back(compute_metrics(binarize(model.predict(s.image, prompts)), s.mask));
  }
  ev.mean = mean_metrics(ev.per_image);
  return ev;
}

}  // namespace cellprompt
