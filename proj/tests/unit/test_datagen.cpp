// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <set>

#include "cellprompt/datagen.hpp"
#include "cellprompt/errors.hpp"
#include "cellprompt/prompt_selection.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace cellprompt;

namespace {

// Pixel (x, y) inside the rotated ellipse, written out independently.
bool inside(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = dx * std::cos(e.theta) + dy * std::sin(e.theta);
  const double v = -dx * std::sin(e.theta) + dy * std::cos(e.theta);
  return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

}  // namespace

TEST_CASE("samples are deterministic per seed and index") {
  const DatagenConfig cfg;
  const auto a = generate_dataset(6, 11, cfg), b = generate_dataset(6, 11, cfg);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].gt_mask == b[i].gt_mask);
  }
  const SyntheticSample s4 = generate_sample(cfg, 11, 4);
  CHECK(s4.image == a[4].image);
  CHECK_FALSE(generate_dataset(1, 12, cfg)[0].image == a[0].image);
}

TEST_CASE("rasterization matches the ellipse inequality") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Ellipse e{rng.uniform(10, 22), rng.uniform(10, 22), rng.uniform(2, 9), rng.uniform(2, 9),
                    rng.uniform(0, 3.14)};
    const Tensor m = rasterize({e}, 32);
    std::size_t area = 0, oracle = 0;
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 32; ++x) {
        area += m.at(y, x) > 0.5;
        oracle += inside(e, static_cast<double>(x), static_cast<double>(y));
      }
    }
    CHECK(area == oracle);
  }
}

TEST_CASE("a single noiseless blob covers exactly its discrete area") {
  DatagenConfig cfg;
  cfg.min_blobs = cfg.max_blobs = 1;
  cfg.noise = 0.0;
  cfg.texture = 0.0;
  cfg.max_distractors = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const SyntheticSample s = generate_sample(cfg, 5, i);
    REQUIRE(s.blobs.size() == 1);
    std::size_t area = 0, oracle = 0;
    for (std::size_t y = 0; y < cfg.image_size; ++y) {
      for (std::size_t x = 0; x < cfg.image_size; ++x) {
        area += s.gt_mask.at(y, x) > 0.5;
        oracle += inside(s.blobs[0], static_cast<double>(x), static_cast<double>(y));
      }
    }
    CHECK(area == oracle);
  }
}

TEST_CASE("blank tiles are allowed") {
  DatagenConfig cfg;
  cfg.min_blobs = cfg.max_blobs = 0;
  cfg.validate();
  const SyntheticSample s = generate_sample(cfg, 3, 0);
  CHECK(s.gt_mask.sum() == 0.0);
  CHECK(s.blobs.empty());
}

TEST_CASE("config validation") {
  DatagenConfig cfg;
  cfg.min_blobs = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = DatagenConfig{};
  cfg.min_radius = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = DatagenConfig{};
  cfg.cluster_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = DatagenConfig{};
  cfg.min_distractors = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = DatagenConfig{};
  cfg.texture = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("generated samples satisfy the target invariants") {
  const DatagenConfig cfg;
  const auto samples = generate_dataset(40, 21, cfg);
  for (const SyntheticSample& s : samples) {
    CHECK(s.image.shape() == Shape{1, 64, 64});
    CHECK(s.pos_target == s.gt_mask);
    CHECK(s.neg_target == eroded_background(s.gt_mask, cfg.erosion_radius));
    CHECK(s.blobs.size() >= cfg.min_blobs);
    CHECK(s.blobs.size() <= cfg.max_blobs);
    CHECK(s.distractors.size() <= cfg.max_distractors);
    for (double v : s.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (std::size_t i = 0; i < s.gt_mask.size(); ++i) {
      CHECK((s.gt_mask[i] == 0.0 || s.gt_mask[i] == 1.0));
      CHECK(s.gt_mask[i] * s.neg_target[i] == 0.0);
    }
    for (const Region& r : label_components(s.gt_mask, PromptLabel::positive))
      CHECK(r.pixels.size() >= cfg.min_component_area);
  }
}

TEST_CASE("debris stays clear of the nuclei") {
  const DatagenConfig cfg;
  const auto samples = generate_dataset(40, 33, cfg);
  std::size_t debris = 0;
  for (const SyntheticSample& s : samples) {
    const Tensor clear = eroded_background(s.gt_mask, cfg.erosion_radius);
    for (const Ellipse& e : s.distractors) {
      ++debris;
      const Tensor footprint = rasterize({e}, cfg.image_size);
      for (std::size_t i = 0; i < footprint.size(); ++i)
        if (footprint[i] > 0.5) CHECK(clear[i] == 1.0);
    }
  }
  CHECK(debris > 0);
}

TEST_CASE("eroded background") {
  Tensor m({7, 7});
  m.at(3, 3) = 1.0;
  const Tensor e = eroded_background(m, 1);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 7; ++x) {
      const bool near = std::abs(static_cast<int>(y) - 3) <= 1 && std::abs(static_cast<int>(x) - 3) <= 1;
      CHECK(e.at(y, x) == (near ? 0.0 : 1.0));
    }
  CHECK(eroded_background(Tensor({3, 3}), 2) == Tensor({3, 3}, 1.0));
}

TEST_CASE("split sizes and membership") {
  const Split s = split_indices(670, 1);
  CHECK(s.train.size() == 536);
  CHECK(s.val.size() == 67);
  CHECK(s.test.size() == 67);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 670);
  CHECK(*all.rbegin() == 669);
  const Split t = split_indices(10, 1);
  CHECK(t.train.size() == 8);
  CHECK(t.val.size() == 1);
  CHECK(t.test.size() == 1);
  CHECK(split_indices(670, 1).val == s.val);
  CHECK_FALSE(split_indices(670, 2).val == s.val);
  CHECK_THROWS_AS(split_indices(5, 1), ValidationError);
}

TEST_CASE("datasets round trip through disk") {
  const auto dir = testing::scratch_dir("dataset");
  const DatagenConfig cfg;
  const auto samples = generate_dataset(10, 4, cfg);
  const Split split = split_indices(10, 4);
  write_dataset(dir.string(), samples, split, 4, cfg);
  const auto train = load_split(dir.string(), "train");
  REQUIRE(train.size() == 8);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const SyntheticSample& src = samples[split.train[i]];
    CHECK(train[i].mask == src.gt_mask);
    CHECK(train[i].image.shape() == Shape{1, 64, 64});
    double worst = 0.0;
    for (std::size_t k = 0; k < src.image.size(); ++k) worst = std::max(worst, std::abs(train[i].image[k] - src.image[k]));
    CHECK(worst <= 0.5 / 255.0 + 1e-12);
  }
  std::ifstream in(dir / "dataset.json");
  const nlohmann::json j = nlohmann::json::parse(in);
  CHECK(j["seed"] == 4);
  CHECK(load_split(dir.string(), "test").size() == 1);
  CHECK_THROWS(load_split(dir.string(), "holdout"));
}
