// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "cellprompt/errors.hpp"
#include "cellprompt/pnm.hpp"
#include "cellprompt/prompt_selection.hpp"
#include "cellprompt/rng.hpp"

namespace fs = std::filesystem;

namespace cellprompt {

void DatagenConfig::validate() const {
  if (image_size < 8) throw ConfigError("image size must be at least 8");
  if (min_blobs > max_blobs) throw ConfigError("min_blobs must not exceed max_blobs");
  if (!(min_radius > 0.0 && min_radius <= max_radius)) throw ConfigError("radius range must satisfy 0 < min <= max");
  if (!(noise >= 0.0) || !(texture >= 0.0)) throw ConfigError("noise and texture must be non-negative");
  if (min_distractors > max_distractors) throw ConfigError("min_distractors must not exceed max_distractors");
  if (!(cluster_prob >= 0.0 && cluster_prob <= 1.0)) throw ConfigError("cluster_prob must lie in [0, 1]");
}

bool Ellipse::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = (dx * c + dy * s) / a;
  const double v = (-dx * s + dy * c) / b;
  return u * u + v * v <= 1.0;
}

Tensor rasterize(const std::vector<Ellipse>& blobs, std::size_t size) {
  Tensor m({size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      for (const Ellipse& e : blobs) {
        if (e.contains(static_cast<double>(x), static_cast<double>(y))) {
          m[y * size + x] = 1.0;
          break;
        }
      }
    }
  }
  return m;
}

Tensor eroded_background(const Tensor& mask, std::size_t radius) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const long r = static_cast<long>(radius);
  Tensor out({h, w});
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      bool clear = true;
      for (long yy = std::max(0L, y - r); clear && yy <= std::min<long>(h - 1, y + r); ++yy) {
        for (long xx = std::max(0L, x - r); xx <= std::min<long>(w - 1, x + r); ++xx) {
          if (mask[yy * w + xx] != 0.0) {
            clear = false;
            break;
          }
        }
      }
      out[y * w + x] = clear ? 1.0 : 0.0;
    }
  }
  return out;
}

namespace {

bool components_large_enough(const Tensor& mask, std::size_t min_area) {
  for (const Region& r : label_components(mask, PromptLabel::positive)) {
    if (r.pixels.size() < min_area) return false;
  }
  return true;
}

}  // namespace

SyntheticSample generate_sample(const DatagenConfig& cfg, std::uint64_t seed, std::size_t index) {
  cfg.validate();
  const std::size_t s = cfg.image_size;
  const double side = static_cast<double>(s);
  Rng rng(seed ^ static_cast<std::uint64_t>(index));
  auto draw_ellipse = [&](Ellipse& e) {
    e.cx = rng.uniform(0.0, side);
    e.cy = rng.uniform(0.0, side);
    e.a = rng.uniform(cfg.min_radius, cfg.max_radius);
    e.b = rng.uniform(cfg.min_radius, cfg.max_radius);
    e.theta = rng.uniform(0.0, std::numbers::pi);
  };
  SyntheticSample out;
  // Layouts that produce slivers smaller than min_component_area are redrawn.
  for (;;) {
    const std::size_t k = cfg.min_blobs + rng.below(cfg.max_blobs - cfg.min_blobs + 1);
    out.blobs.clear();
    for (std::size_t i = 0; i < k; ++i) {
      Ellipse e;
      draw_ellipse(e);
      if (i > 0 && rng.uniform() < cfg.cluster_prob) {
        const Ellipse& prev = out.blobs.back();
        const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double dist = 0.8 * (std::min(prev.a, prev.b) + std::min(e.a, e.b));
        e.cx = prev.cx + dist * std::cos(dir);
        e.cy = prev.cy + dist * std::sin(dir);
      }
      out.blobs.push_back(e);
    }
    out.gt_mask = rasterize(out.blobs, s);
    if (components_large_enough(out.gt_mask, cfg.min_component_area)) break;
  }
  // Debris keeps a gap of erosion_radius pixels from every nucleus so each
  // blob is wholly one class. A debris blob that finds no room is dropped.
  constexpr int kDebrisAttempts = 20;
  const Tensor clear = eroded_background(out.gt_mask, cfg.erosion_radius);
  const std::size_t m = cfg.min_distractors + rng.below(cfg.max_distractors - cfg.min_distractors + 1);
  for (std::size_t i = 0; i < m; ++i) {
    for (int attempt = 0; attempt < kDebrisAttempts; ++attempt) {
      Ellipse e;
      draw_ellipse(e);
      const Tensor footprint = rasterize({e}, s);
      bool fits = true;
      for (std::size_t k = 0; k < footprint.size() && fits; ++k) fits = footprint[k] == 0.0 || clear[k] != 0.0;
      if (fits) {
        out.distractors.push_back(e);
        break;
      }
    }
  }

  const double background = rng.uniform(0.05, 0.25);
  const std::size_t nb = out.blobs.size() + out.distractors.size();
  std::vector<double> level(nb), gx(nb), gy(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    level[i] = rng.uniform(0.6, 0.9);
    const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double slope = rng.uniform(0.0, 0.02);
    gx[i] = slope * std::cos(dir);
    gy[i] = slope * std::sin(dir);
  }
  out.image = Tensor({1, s, s});
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double v = background;
      bool nucleus = false;
      for (std::size_t i = 0; i < nb; ++i) {
        const Ellipse& e = i < out.blobs.size() ? out.blobs[i] : out.distractors[i - out.blobs.size()];
        if (e.contains(fx, fy)) {
          v = level[i] + gx[i] * (fx - e.cx) + gy[i] * (fy - e.cy);
          nucleus = i < out.blobs.size();
          break;
        }
      }
      if (nucleus && cfg.texture > 0.0) v += rng.normal(0.0, cfg.texture);
      if (cfg.noise > 0.0) v += rng.normal(0.0, cfg.noise);
      out.image[y * s + x] = std::clamp(v, 0.0, 1.0);
    }
  }
  out.pos_target = out.gt_mask;
  out.neg_target = eroded_background(out.gt_mask, cfg.erosion_radius);
  return out;
}

std::vector<SyntheticSample> generate_dataset(std::size_t n, std::uint64_t seed, const DatagenConfig& cfg) {
  if (n == 0) throw ConfigError("dataset size must be at least 1");
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, seed, i));
  return out;
}

Split split_indices(std::size_t n, std::uint64_t seed, const SplitFractions& f) {
  if (!(f.train >= 0 && f.val >= 0 && f.test >= 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  const auto part = [n](double frac) {
    return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_train = part(f.train), n_val = part(f.val);
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ValidationError("dataset of " + std::to_string(n) + " samples is too small for non-empty splits");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5051u));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

namespace {

std::string stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

}  // namespace

void write_dataset(const std::string& root, const std::vector<SyntheticSample>& samples, const Split& split,
                   std::uint64_t seed, const DatagenConfig& cfg) {
  nlohmann::ordered_json counts, sources;
  for (const auto& [name, ids] : {std::pair<const char*, const std::vector<std::size_t>*>{"train", &split.train},
                                  {"val", &split.val},
                                  {"test", &split.test}}) {
    const fs::path images = fs::path(root) / name / "images";
    const fs::path masks = fs::path(root) / name / "masks";
    fs::create_directories(images);
    fs::create_directories(masks);
    for (std::size_t i = 0; i < ids->size(); ++i) {
      const SyntheticSample& s = samples.at((*ids)[i]);
      const Tensor img = s.image.reshaped({cfg.image_size, cfg.image_size});
      write_pgm8((images / (stem(i) + ".pgm")).string(), img);
      write_mask_pgm((masks / (stem(i) + ".pgm")).string(), s.gt_mask);
    }
    counts[name] = ids->size();
    sources[name] = *ids;
  }
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["n"] = samples.size();
  j["config"] = {{"image_size", cfg.image_size}, {"min_blobs", cfg.min_blobs}, {"max_blobs", cfg.max_blobs},
                 {"min_radius", cfg.min_radius}, {"max_radius", cfg.max_radius}, {"noise", cfg.noise},
                 {"texture", cfg.texture}, {"cluster_prob", cfg.cluster_prob},
                 {"min_distractors", cfg.min_distractors}, {"max_distractors", cfg.max_distractors},
                 {"min_component_area", cfg.min_component_area}, {"erosion_radius", cfg.erosion_radius}};
  j["counts"] = counts;
  j["sample_indices"] = sources;
  std::ofstream out(fs::path(root) / "dataset.json", std::ios::binary);
  out << j.dump(2) << "\n";
}

std::vector<LabeledImage> load_split(const std::string& root, const std::string& split) {
  const fs::path images = fs::path(root) / split / "images";
  const fs::path masks = fs::path(root) / split / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw ConfigError("dataset split not found: " + images.string());
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".pgm") names.push_back(entry.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  std::vector<LabeledImage> out;
  for (const std::string& n : names) {
    LabeledImage li;
    li.name = n;
    const Tensor img = gray_to_tensor(read_pgm((images / (n + ".pgm")).string()));
    li.image = img.reshaped({1, img.dim(0), img.dim(1)});
    li.mask = read_mask_pgm((masks / (n + ".pgm")).string());
    if (li.mask.shape() != img.shape()) throw FormatError("mask and image sizes differ for " + n);
    out.push_back(std::move(li));
  }
  return out;
}

}  // namespace cellprompt
