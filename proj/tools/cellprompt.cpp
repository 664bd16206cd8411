// SPDX-License-Identifier: Apache-2.0
//
// cellprompt: command-line front end.
//
// Exit codes: 0 success, 2 usage/configuration/input error, 3 numerical
// failure during training, 1 anything else.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "cellprompt/checkpoint.hpp"
#include "cellprompt/datagen.hpp"
#include "cellprompt/errors.hpp"
#include "cellprompt/manifest.hpp"
#include "cellprompt/pnm.hpp"
#include "cellprompt/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cellprompt;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string jsonl(const std::vector<ojson>& rows) {
  std::string s;
  for (const ojson& r : rows) s += r.dump() + "\n";
  return s;
}

std::pair<double, double> parse_range(const std::string& text, const char* what) {
  std::string t = text;
  std::size_t sep = t.find_first_of(",:");
  if (sep == std::string::npos) sep = t.find('-', 1);
  try {
    std::size_t used = 0;
    if (sep == std::string::npos) {
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return {v, v};
    }
    const std::string a = t.substr(0, sep), b = t.substr(sep + 1);
    const double lo = std::stod(a, &used);
    if (used != a.size()) throw std::invalid_argument(a);
    const double hi = std::stod(b, &used);
    if (used != b.size()) throw std::invalid_argument(b);
    return {lo, hi};
  } catch (const std::exception&) {
    throw ConfigError(std::string("invalid ") + what + " range '" + text + "' (expected MIN-MAX)");
  }
}

// key = value lines; '#' starts a comment. Keys name long options of the
// active subcommand without the leading dashes. Keys already present on the
// command line are skipped, so flags take precedence over the file.
std::vector<std::string> config_file_args(CLI::App* cmd, const std::string& path,
                                          const std::vector<std::string>& argv) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  const auto trim = [](const std::string& t) {
    const std::size_t a = t.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return t.substr(a, t.find_last_not_of(" \t\r") - a + 1);
  };
  const auto given = [&](const std::string& flag) {
    for (const std::string& arg : argv) {
      if (arg == flag || arg.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> extra;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "config") throw ConfigError(where + "nested config files are not supported");
    if (!cmd->get_option_no_throw("--" + key)) throw ConfigError(where + "unknown key '" + key + "'");
    if (!given("--" + key)) extra.push_back("--" + key + "=" + value);
  }
  return extra;
}

struct Progress {
  bool quiet = false;
  ProgressFn fn() const {
    if (quiet) return {};
    return [](const std::string& msg) { std::cerr << msg << std::endl; };
  }
};

std::size_t dataset_image_size(const std::string& root) {
  const fs::path manifest = fs::path(root) / "dataset.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    try {
      const nlohmann::json j = nlohmann::json::parse(in);
      return j.at("config").at("image_size").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid dataset.json: " + std::string(e.what()));
    }
  }
  const std::vector<LabeledImage> train = load_split(root, "train");
  if (train.empty()) throw ConfigError("dataset at " + root + " has no training images");
  return train.front().mask.dim(0);
}

struct LoadedModel {
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  std::unique_ptr<SacModel> model;
  Checkpoint ckpt;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel lm;
  lm.ckpt = load_checkpoint(path);
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(lm.ckpt.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint config is not valid JSON: " + std::string(e.what()));
  }
  if (!cfg.contains("model") || !cfg.contains("train")) throw FormatError("checkpoint config lacks model/train sections");
  lm.model_cfg = model_config_from_json(cfg["model"]);
  lm.train_cfg = train_config_from_json(cfg["train"]);
  lm.model = std::make_unique<SacModel>(lm.model_cfg);
  restore_params(lm.model->params(), lm.ckpt.tensors);
  return lm;
}

Tensor load_image(const std::string& path, std::size_t expected) {
  const Tensor img = gray_to_tensor(read_pgm(path));
  if (img.dim(0) != expected || img.dim(1) != expected) {
    throw ValidationError("image " + path + " is " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(0)) +
                          ", the model expects " + std::to_string(expected) + "x" + std::to_string(expected));
  }
  return img.reshaped({1, expected, expected});
}

std::string group_digits(std::size_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out;
  long long n = 200;
  std::uint64_t seed = 0;
  std::string blobs = "3-8";
  std::string radius = "5-10";
  double noise = 0.05;
  double texture = 0.12;
  double cluster = 0.3;
  std::string distractors = "0-3";
  std::size_t image_size = 64;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.n <= 0) throw ConfigError("--n must be at least 1 (got " + std::to_string(a.n) + ")");
  DatagenConfig cfg;
  cfg.image_size = a.image_size;
  const auto [bmin, bmax] = parse_range(a.blobs, "--blobs");
  if (bmin < 0 || bmin != std::floor(bmin) || bmax != std::floor(bmax)) throw ConfigError("--blobs must be integers");
  cfg.min_blobs = static_cast<std::size_t>(bmin);
  cfg.max_blobs = static_cast<std::size_t>(bmax);
  std::tie(cfg.min_radius, cfg.max_radius) = parse_range(a.radius, "--radius");
  cfg.noise = a.noise;
  cfg.texture = a.texture;
  cfg.cluster_prob = a.cluster;
  const auto [dmin, dmax] = parse_range(a.distractors, "--distractors");
  if (dmin < 0 || dmin != std::floor(dmin) || dmax != std::floor(dmax)) throw ConfigError("--distractors must be integers");
  cfg.min_distractors = static_cast<std::size_t>(dmin);
  cfg.max_distractors = static_cast<std::size_t>(dmax);
  cfg.validate();
  const std::size_t n = static_cast<std::size_t>(a.n);
  const Split split = split_indices(n, a.seed);
  const std::vector<SyntheticSample> samples = generate_dataset(n, a.seed, cfg);
  write_dataset(a.out, samples, split, a.seed, cfg);

  RunManifest m;
  m.command = "gen-data";
  m.config = {{"n", n}, {"blobs", a.blobs}, {"radius", a.radius}, {"noise", a.noise},
              {"texture", a.texture}, {"cluster", a.cluster}, {"distractors", a.distractors},
              {"image_size", a.image_size}};
  m.seed = a.seed;
  m.outputs = {{"root", a.out},
               {"train", split.train.size()},
               {"val", split.val.size()},
               {"test", split.test.size()}};
  write_manifest(a.out, m);
  std::cout << "wrote " << split.train.size() << "/" << split.val.size() << "/" << split.test.size()
            << " train/val/test images to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, out, mode = "sac", select = "centroid", experts_at = "both", optimizer = "adam",
                         ce_term = "full";
  std::size_t points = 3, experts = 0;
  std::uint64_t seed = 0;
  TrainConfig cfg;
  int connectivity = 4;
  std::size_t patch_size = 8, width = 64, depth = 4, heads = 4, rank = 4;
  bool quiet = false;
};

int cmd_train(TrainArgs a) {
  TrainConfig cfg = a.cfg;
  cfg.mode = parse_train_mode(a.mode);
  cfg.points = a.points;
  cfg.experts = a.experts;
  cfg.experts_at = parse_experts_at(a.experts_at);
  cfg.selection.method = parse_selection_method(a.select);
  if (a.connectivity != 4 && a.connectivity != 8) throw ConfigError("--connectivity must be 4 or 8");
  cfg.selection.connectivity = a.connectivity == 4 ? Connectivity::four : Connectivity::eight;
  if (a.optimizer != "adam" && a.optimizer != "sgd") throw ConfigError("--optimizer must be adam or sgd");
  cfg.optimizer = a.optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  cfg.loss.ce_term = parse_ce_term(a.ce_term);
  cfg.seed = a.seed;
  cfg.validate();

  if (!fs::is_directory(a.data)) throw ConfigError("dataset directory not found: " + a.data);
  const Dataset data = load_dataset(a.data);
  ModelConfig mc;
  mc.encoder.image_size = dataset_image_size(a.data);
  mc.encoder.patch_size = a.patch_size;
  mc.encoder.width = a.width;
  mc.encoder.depth = a.depth;
  mc.encoder.heads = a.heads;
  mc.encoder.lora_rank = a.rank;
  mc.seed = a.seed;
  mc.validate();

  SacModel model(mc);
  const TrainResult r = train_pipeline(model, data, cfg, Progress{a.quiet}.fn());

  fs::create_directories(a.out);
  Checkpoint ck;
  ck.tensors = capture_params(model.params());
  ojson config;
  config["model"] = to_json(mc);
  config["train"] = to_json(cfg);
  ck.config_json = config.dump();
  ck.epoch = r.best_epoch;
  ck.best_val_dice = r.best_val_dice;
  ck.seed = a.seed;
  const fs::path ckpt_path = fs::path(a.out) / "checkpoint.sack";
  save_checkpoint(ck, ckpt_path.string());

  std::vector<ojson> rows;
  for (const SacEpoch& e : r.log) rows.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice}});
  write_text(fs::path(a.out) / "train_log.jsonl", jsonl(rows));
  rows.clear();
  for (const GeneratorEpoch& e : r.generator_log) {
    rows.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  }
  write_text(fs::path(a.out) / "generator_log.jsonl", jsonl(rows));
  ojson audit;
  audit["passed"] = r.audit.passed();
  audit["frozen_unchanged"] = r.audit.frozen_unchanged;
  audit["changed"] = r.audit.changed;
  audit["trainable"] = r.audit.trainable;
  write_text(fs::path(a.out) / "audit.json", audit.dump(2) + "\n");
  ojson summary;
  summary["best_epoch"] = r.best_epoch;
  summary["best_val_dice"] = r.best_val_dice;
  summary["epochs_run"] = r.log.size();
  summary["generator_epochs_run"] = r.generator_log.size();
  summary["pretrain_initial_loss"] = r.pretrain_initial_loss;
  summary["pretrain_final_loss"] = r.pretrain_final_loss;
  write_text(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");

  RunManifest m;
  m.command = "train";
  m.config = config;
  m.seed = a.seed;
  m.inputs = {{"data", a.data}};
  m.outputs = {{"checkpoint", ckpt_path.string()},
               {"log", (fs::path(a.out) / "train_log.jsonl").string()},
               {"generator_log", (fs::path(a.out) / "generator_log.jsonl").string()},
               {"audit", (fs::path(a.out) / "audit.json").string()},
               {"summary", (fs::path(a.out) / "summary.json").string()}};
  m.checkpoint_path = ckpt_path.string();
  write_manifest(a.out, m);
  std::cout << "best epoch " << r.best_epoch << " val_dice " << r.best_val_dice << "; checkpoint " << ckpt_path.string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string ckpt, image, prompts = "auto", out;
  double threshold = 0.0;
};

int cmd_predict(const PredictArgs& a) {
  LoadedModel lm = load_model(a.ckpt);
  const std::size_t s = lm.model_cfg.encoder.image_size;
  const Tensor image = load_image(a.image, s);
  PromptSet prompts;
  const bool automatic = a.prompts == "auto";
  if (automatic) {
    TrainConfig cfg = lm.train_cfg;
    if (cfg.points > 0) {
      const ProbabilityMap map = lm.model->prompt_map(image);
      prompts = select_prompts(map, cfg.selection, cfg.points, prompt_seed(cfg, PromptStage::infer, 0, 0));
    }
  } else {
    prompts = read_prompts_csv(a.prompts);
  }
  const DecoderOutput out = lm.model->predict(image, prompts);
  fs::create_directories(a.out);
  const fs::path mask_path = fs::path(a.out) / "mask.pgm";
  write_mask_pgm(mask_path.string(), binarize(out, a.threshold).reshaped({s, s}));
  ojson pred;
  pred["score"] = out.score;
  pred["prompt_count"] = prompts.size();
  write_text(fs::path(a.out) / "prediction.json", pred.dump(2) + "\n");
  RunManifest m;
  m.command = "predict";
  m.config = {{"prompts", automatic ? "auto" : "csv"}, {"threshold", a.threshold}};
  m.seed = lm.ckpt.seed;
  m.inputs = {{"checkpoint", a.ckpt}, {"image", a.image}};
  if (!automatic) m.inputs["prompts"] = a.prompts;
  m.outputs = {{"mask", mask_path.string()}, {"prediction", (fs::path(a.out) / "prediction.json").string()}};
  if (automatic) {
    const fs::path csv = fs::path(a.out) / "prompts.csv";
    write_prompts_csv(csv.string(), prompts);
    m.outputs["prompts"] = csv.string();
  }
  m.checkpoint_path = a.ckpt;
  write_manifest(a.out, m);
  std::printf("score %.6f, %zu prompts, mask %s\n", out.score, prompts.size(), mask_path.string().c_str());
  return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string ckpt, data, out, split = "test";
};

int cmd_evaluate(const EvaluateArgs& a) {
  LoadedModel lm = load_model(a.ckpt);
  if (!fs::is_directory(a.data)) throw ConfigError("dataset directory not found: " + a.data);
  const std::vector<LabeledImage> images = load_split(a.data, a.split);
  if (images.empty()) throw ConfigError("split '" + a.split + "' is empty");
  const Evaluation ev = evaluate(*lm.model, images, lm.train_cfg);
  fs::create_directories(a.out);
  const fs::path metrics = fs::path(a.out) / "metrics.json";
  write_text(metrics, to_json(ev.mean) + "\n");
  RunManifest m;
  m.command = "evaluate";
  m.config = {{"split", a.split}, {"images", images.size()}};
  m.seed = lm.ckpt.seed;
  m.inputs = {{"checkpoint", a.ckpt}, {"data", a.data}};
  m.outputs = {{"metrics", metrics.string()}};
  m.checkpoint_path = a.ckpt;
  write_manifest(a.out, m);
  std::cout << to_json(ev.mean) << "\n";
  return 0;
}

// ---------------------------------------------------------------- ablate-selection

struct AblateArgs {
  std::string ckpt, data, out, split = "test";
  std::vector<std::size_t> points{1, 3, 256};
  std::size_t timing_repeats = 20;
};

int cmd_ablate(const AblateArgs& a) {
  LoadedModel lm = load_model(a.ckpt);
  if (!fs::is_directory(a.data)) throw ConfigError("dataset directory not found: " + a.data);
  const std::vector<LabeledImage> images = load_split(a.data, a.split);
  if (images.empty()) throw ConfigError("split '" + a.split + "' is empty");
  if (a.points.empty()) throw ConfigError("--points needs at least one value");
  const SacModel& model = *lm.model;
  const std::size_t s = lm.model_cfg.encoder.image_size;

  // Encoder outputs and probability maps do not depend on the selection method.
  std::vector<ImageEmbedding> embeddings;
  std::vector<ProbabilityMap> maps;
  for (const LabeledImage& li : images) {
    embeddings.push_back(model.encoder.encode(li.image));
    maps.push_back(model.prompt_map(li.image));
  }

  using clock = std::chrono::steady_clock;
  ojson rows = ojson::array();
  for (SelectionMethod method : {SelectionMethod::centroid, SelectionMethod::random}) {
    for (std::size_t pts : a.points) {
      TrainConfig cfg = lm.train_cfg;
      cfg.points = pts;
      cfg.selection.method = method;
      std::vector<PromptSet> prompts(images.size());
      const auto t0 = clock::now();
      for (std::size_t rep = 0; rep < std::max<std::size_t>(a.timing_repeats, 1); ++rep) {
        for (std::size_t i = 0; i < images.size(); ++i) {
          prompts[i] = build_prompts(&maps[i], images[i].mask, cfg, PromptStage::infer,
                                     prompt_seed(cfg, PromptStage::infer, 0, i));
        }
      }
      const double select_s = std::chrono::duration<double>(clock::now() - t0).count() /
                              static_cast<double>(std::max<std::size_t>(a.timing_repeats, 1) * images.size());
      std::vector<MetricReport> reports;
      double prompt_total = 0.0;
      const auto t1 = clock::now();
      for (std::size_t i = 0; i < images.size(); ++i) {
        const DecoderOutput out = model.decoder.decode(embeddings[i], model.prompt_encoder.encode(prompts[i], s));
        reports.push_back(compute_metrics(binarize(out), images[i].mask));
        prompt_total += static_cast<double>(prompts[i].size());
      }
      const double decode_s = std::chrono::duration<double>(clock::now() - t1).count() / static_cast<double>(images.size());
      const MetricReport mean = mean_metrics(reports);
      ojson row;
      const std::string tag = method == SelectionMethod::centroid ? "O" : "R";
      row["name"] = tag + "-" + std::to_string(pts) + "-point";
      row["method"] = to_string(method);
      row["points"] = pts;
      row["dice"] = mean.dice;
      row["iou"] = mean.iou;
      row["f1"] = mean.f1;
      row["mean_prompts"] = prompt_total / static_cast<double>(images.size());
      row["select_seconds_per_image"] = select_s;
      row["total_seconds_per_image"] = select_s + decode_s;
      rows.push_back(row);
      std::printf("%-14s dice %.4f iou %.4f f1 %.4f prompts %7.2f select %.3e s total %.3e s\n",
                  row["name"].get<std::string>().c_str(), mean.dice, mean.iou, mean.f1,
                  prompt_total / static_cast<double>(images.size()), select_s, select_s + decode_s);
    }
  }
  fs::create_directories(a.out);
  const fs::path table = fs::path(a.out) / "ablation.json";
  ojson doc;
  doc["split"] = a.split;
  doc["images"] = images.size();
  doc["rows"] = rows;
  write_text(table, doc.dump(2) + "\n");
  RunManifest m;
  m.command = "ablate-selection";
  m.config = {{"split", a.split}, {"points", a.points}, {"timing_repeats", a.timing_repeats}};
  m.seed = lm.ckpt.seed;
  m.inputs = {{"checkpoint", a.ckpt}, {"data", a.data}};
  m.outputs = {{"table", table.string()}};
  m.checkpoint_path = a.ckpt;
  write_manifest(a.out, m);
  return 0;
}

// ---------------------------------------------------------------- count-params

struct CountArgs {
  std::string ckpt, out;
};

int cmd_count_params(const CountArgs& a) {
  LoadedModel lm = load_model(a.ckpt);
  const std::vector<std::pair<std::string, std::string>> groups = {
      {"encoder", "encoder."}, {"generator", "generator."}, {"prompt_encoder", "prompt_encoder."}, {"decoder", "decoder."}};
  ojson doc;
  ojson comps = ojson::object();
  std::printf("%-16s %14s %14s %14s\n", "component", "trainable", "frozen", "total");
  const NamedParams params = lm.model->params();
  for (const auto& [label, prefix] : groups) {
    NamedParams sub;
    for (const auto& np : params) {
      if (np.first.rfind(prefix, 0) == 0) sub.push_back(np);
    }
    const ParamCount c = count_params(sub);
    comps[label] = {{"trainable", c.trainable}, {"frozen", c.frozen}, {"total", c.total}};
    std::printf("%-16s %14s %14s %14s\n", label.c_str(), group_digits(c.trainable).c_str(),
                group_digits(c.frozen).c_str(), group_digits(c.total).c_str());
  }
  const ParamCount all = count_params(params);
  std::vector<AdaptedAttention> layers;
  for (AdaptedAttention* l : lm.model->encoder.attention_layers()) layers.push_back(*l);
  const ParamCount adapters = count_adapter_params(layers);
  std::printf("\nTrainable: %s\nFreeze: %s\nTotal: %s\n", group_digits(all.trainable).c_str(),
              group_digits(all.frozen).c_str(), group_digits(all.total).c_str());
  std::printf("(encoder attention layers: %s adapter-trainable, %s base)\n", group_digits(adapters.trainable).c_str(),
              group_digits(adapters.frozen).c_str());
  doc["components"] = comps;
  doc["trainable"] = all.trainable;
  doc["frozen"] = all.frozen;
  doc["total"] = all.total;
  doc["encoder_attention"] = {{"trainable", adapters.trainable}, {"frozen", adapters.frozen}, {"total", adapters.total}};
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "params.json", doc.dump(2) + "\n");
    RunManifest m;
    m.command = "count-params";
    m.seed = lm.ckpt.seed;
    m.inputs = {{"checkpoint", a.ckpt}};
    m.outputs = {{"params", (fs::path(a.out) / "params.json").string()}};
    m.checkpoint_path = a.ckpt;
    write_manifest(a.out, m);
  }
  return 0;
}

// ---------------------------------------------------------------- overlay

struct OverlayArgs {
  std::string image, mask, prompts, out;
};

int cmd_overlay(const OverlayArgs& a) {
  const GrayImage img = read_pgm(a.image);
  const Tensor gray = gray_to_tensor(img);
  const Tensor mask = read_mask_pgm(a.mask);
  if (mask.shape() != gray.shape()) throw ValidationError("mask and image sizes differ");
  PromptSet prompts;
  if (!a.prompts.empty()) prompts = read_prompts_csv(a.prompts);
  const std::size_t w = img.width, h = img.height;
  RgbImage rgb{w, h, std::vector<std::uint8_t>(3 * w * h)};
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(gray[i], 0.0, 1.0) * 255.0));
    rgb.rgb[3 * i] = rgb.rgb[3 * i + 1] = rgb.rgb[3 * i + 2] = v;
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x] == 0.0) continue;
      const bool edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h || mask[y * w + x - 1] == 0.0 ||
                        mask[y * w + x + 1] == 0.0 || mask[(y - 1) * w + x] == 0.0 || mask[(y + 1) * w + x] == 0.0;
      if (edge) rgb.set(x, y, 255, 215, 0);
    }
  }
  for (const Prompt& p : prompts.prompts()) {
    if (p.x < 0 || p.y < 0 || static_cast<std::size_t>(p.x) >= w || static_cast<std::size_t>(p.y) >= h) {
      throw ValidationError("prompt (" + std::to_string(p.x) + "," + std::to_string(p.y) + ") lies outside the image");
    }
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const long x = p.x + dx, y = p.y + dy;
        if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) continue;
        if (p.label == PromptLabel::positive) rgb.set(x, y, 0, 0, 255);
        else rgb.set(x, y, 255, 105, 180);
      }
    }
  }
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_ppm(a.out, rgb);
  RunManifest m;
  m.command = "overlay";
  m.inputs = {{"image", a.image}, {"mask", a.mask}};
  if (!a.prompts.empty()) m.inputs["prompts"] = a.prompts;
  m.outputs = {{"overlay", a.out}};
  write_manifest(out.has_parent_path() ? out.parent_path().string() : ".", m);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Promptable cell segmentation with low-rank adapted attention and automatic point prompts"};
  app.require_subcommand(1);
  std::string config_path;

  GenDataArgs gd;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a seeded synthetic nuclei dataset");
  gen->add_option("--out", gd.out, "Dataset root")->required();
  gen->add_option("--n", gd.n, "Number of images")->capture_default_str();
  gen->add_option("--seed", gd.seed, "Random seed")->capture_default_str();
  gen->add_option("--blobs", gd.blobs, "Blob count range MIN-MAX")->capture_default_str();
  gen->add_option("--radius", gd.radius, "Semi-axis range MIN-MAX in pixels")->capture_default_str();
  gen->add_option("--noise", gd.noise, "Gaussian noise standard deviation")->capture_default_str();
  gen->add_option("--texture", gd.texture, "Speckle standard deviation inside nuclei")->capture_default_str();
  gen->add_option("--cluster", gd.cluster, "Probability that a nucleus touches the previous one")->capture_default_str();
  gen->add_option("--distractors", gd.distractors, "Debris blob count range MIN-MAX")->capture_default_str();
  gen->add_option("--image-size", gd.image_size, "Square image side")->capture_default_str();

  TrainArgs ta;
  TrainConfig& tc = ta.cfg;
  CLI::App* train = app.add_subcommand("train", "Train a model on a dataset");
  train->add_option("--data", ta.data, "Dataset root")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--mode", ta.mode, "sac | sam-ft | frozen")->capture_default_str();
  train->add_option("--points", ta.points, "Automatic point budget")->capture_default_str();
  train->add_option("--experts", ta.experts, "Expert (ground-truth centroid) prompts")->capture_default_str();
  train->add_option("--experts-at", ta.experts_at, "train | infer | both")->capture_default_str();
  train->add_option("--select", ta.select, "centroid | random | topk")->capture_default_str();
  train->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
  train->add_option("--tau-bin", tc.selection.tau_bin, "Centroid binarization threshold")->capture_default_str();
  train->add_option("--tau", tc.selection.tau, "Random-selection pool threshold")->capture_default_str();
  train->add_option("--connectivity", ta.connectivity, "Region connectivity, 4 or 8")->capture_default_str();
  train->add_option("--min-epochs", tc.stop.min_epochs, "Minimum epochs")->capture_default_str();
  train->add_option("--patience", tc.stop.patience, "Early-stop patience")->capture_default_str();
  train->add_option("--max-epochs", tc.stop.max_epochs, "Hard epoch cap")->capture_default_str();
  train->add_option("--lr", tc.lr, "Learning rate")->capture_default_str();
  train->add_option("--batch-size", tc.batch_size, "Batch size")->capture_default_str();
  train->add_option("--optimizer", ta.optimizer, "adam | sgd")->capture_default_str();
  train->add_option("--alpha", tc.loss.alpha_t, "Focal alpha_t")->capture_default_str();
  train->add_option("--gamma", tc.loss.gamma, "Focal gamma")->capture_default_str();
  train->add_option("--focal-weight", tc.loss.focal_weight, "Focal loss weight")->capture_default_str();
  train->add_option("--dice-weight", tc.loss.dice_weight, "Dice loss weight")->capture_default_str();
  train->add_option("--score-weight", tc.loss.score_weight, "Score regression weight")->capture_default_str();
  train->add_option("--ce-term", ta.ce_term, "full | onesided (DiceCE cross-entropy term)")->capture_default_str();
  train->add_flag("--joint", tc.joint, "Train the prompt generator jointly with the decoder");
  train->add_option("--gen-min-epochs", tc.generator.stop.min_epochs, "Generator minimum epochs")->capture_default_str();
  train->add_option("--gen-patience", tc.generator.stop.patience, "Generator patience")->capture_default_str();
  train->add_option("--gen-max-epochs", tc.generator.stop.max_epochs, "Generator epoch cap")->capture_default_str();
  train->add_option("--gen-lr", tc.generator.lr, "Generator learning rate")->capture_default_str();
  train->add_option("--gen-batch-size", tc.generator.batch_size, "Generator batch size")->capture_default_str();
  train->add_option("--erosion", tc.generator.erosion_radius, "Negative-target erosion radius")->capture_default_str();
  train->add_option("--pretrain-steps", tc.pretrain.steps, "Encoder proxy pretraining steps")->capture_default_str();
  train->add_option("--pretrain-samples", tc.pretrain.samples, "Encoder proxy pretraining images")->capture_default_str();
  train->add_option("--pretrain-lr", tc.pretrain.lr, "Encoder proxy pretraining learning rate")->capture_default_str();
  train->add_option("--patch-size", ta.patch_size, "Encoder patch size")->capture_default_str();
  train->add_option("--width", ta.width, "Model width")->capture_default_str();
  train->add_option("--depth", ta.depth, "Encoder depth")->capture_default_str();
  train->add_option("--heads", ta.heads, "Attention heads")->capture_default_str();
  train->add_option("--rank", ta.rank, "Adapter rank")->capture_default_str();
  train->add_flag("--quiet", ta.quiet, "Suppress progress output");

  PredictArgs pa;
  CLI::App* predict = app.add_subcommand("predict", "Segment one image");
  predict->add_option("--ckpt", pa.ckpt, "Checkpoint")->required();
  predict->add_option("--image", pa.image, "Input PGM")->required();
  predict->add_option("--prompts", pa.prompts, "'auto' or a prompt CSV (x,y,label)")->capture_default_str();
  predict->add_option("--out", pa.out, "Output directory")->required();
  predict->add_option("--threshold", pa.threshold, "Logit threshold")->capture_default_str();

  EvaluateArgs ea;
  CLI::App* eval = app.add_subcommand("evaluate", "Compute F1/IoU/Dice on a dataset split");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
  eval->add_option("--data", ea.data, "Dataset root")->required();
  eval->add_option("--out", ea.out, "Output directory")->required();
  eval->add_option("--split", ea.split, "train | val | test")->capture_default_str();

  AblateArgs aa;
  CLI::App* ablate = app.add_subcommand("ablate-selection", "Compare centroid and random prompt selection");
  ablate->add_option("--ckpt", aa.ckpt, "Checkpoint")->required();
  ablate->add_option("--data", aa.data, "Dataset root")->required();
  ablate->add_option("--out", aa.out, "Output directory")->required();
  ablate->add_option("--points", aa.points, "Point budgets")->delimiter(',')->capture_default_str();
  ablate->add_option("--split", aa.split, "Dataset split")->capture_default_str();
  ablate->add_option("--timing-repeats", aa.timing_repeats, "Selection repetitions for timing")->capture_default_str();

  CountArgs ca;
  CLI::App* count = app.add_subcommand("count-params", "Report trainable/frozen parameter counts");
  count->add_option("--ckpt", ca.ckpt, "Checkpoint")->required();
  count->add_option("--out", ca.out, "Optional output directory for params.json");

  OverlayArgs oa;
  CLI::App* overlay = app.add_subcommand("overlay", "Draw mask boundary and prompt dots over an image");
  overlay->add_option("--image", oa.image, "Input PGM")->required();
  overlay->add_option("--mask", oa.mask, "Mask PGM")->required();
  overlay->add_option("--prompts", oa.prompts, "Prompt CSV");
  overlay->add_option("--out", oa.out, "Output PPM")->required();

  for (CLI::App* sub : {gen, train, predict, eval, ablate, count, overlay}) {
    sub->add_option("--config", config_path, "key = value file; command-line flags take precedence");
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // A --config file expands into extra flags before parsing so that it can
    // also supply required options.
    CLI::App* sub = args.empty() ? nullptr : app.get_subcommand_no_throw(args.front());
    for (std::size_t i = 1; sub && i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
      if (path.empty()) continue;
      const std::vector<std::string> extra = config_file_args(sub, path, args);
      args.insert(args.end(), extra.begin(), extra.end());
      break;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    CLI::App* active = app.get_subcommands().front();
    if (active == gen) return cmd_gen_data(gd);
    if (active == train) return cmd_train(ta);
    if (active == predict) return cmd_predict(pa);
    if (active == eval) return cmd_evaluate(ea);
    if (active == ablate) return cmd_ablate(aa);
    if (active == count) return cmd_count_params(ca);
    if (active == overlay) return cmd_overlay(oa);
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
