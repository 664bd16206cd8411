// SPDX-License-Identifier: Apache-2.0
//
// Turning prompt probability maps into labeled point prompts.
//
// Two selection strategies are provided:
//  - centroid: threshold each channel, find connected regions, emit one prompt
//    per region at its centroid (snapped into the region when the rounded
//    centroid falls outside it);
//  - random:   threshold each channel and draw pixels uniformly without
//    replacement from the super-threshold pools.
// A deterministic top-k strategy is kept as an ablation baseline.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellprompt/prompt_generator.hpp"

namespace cellprompt {

enum class PromptLabel : int { negative = 0, positive = 1 };

struct Pixel {
  int x = 0;
  int y = 0;
  bool operator==(const Pixel&) const = default;
};

struct Prompt {
  int x = 0;  // column
  int y = 0;  // row
  PromptLabel label = PromptLabel::positive;
  bool operator==(const Prompt&) const = default;
};

enum class PromptSource { automatic, expert, mixed };

/// Ordered prompts without duplicate (x, y, label) triples.
class PromptSet {
 public:
  PromptSet() = default;
  explicit PromptSet(PromptSource source) : source_(source) {}

  /// Appends unless an identical prompt is already present; returns whether it was added.
  bool add(const Prompt& p);

  const std::vector<Prompt>& prompts() const { return prompts_; }
  std::size_t size() const { return prompts_.size(); }
  bool empty() const { return prompts_.empty(); }
  PromptSource source() const { return source_; }
  std::size_t count(PromptLabel label) const;

 private:
  std::vector<Prompt> prompts_;
  PromptSource source_ = PromptSource::automatic;
};

/// Concatenates b after a, dropping duplicates.
PromptSet merge_prompts(const PromptSet& a, const PromptSet& b);

struct Region {
  std::vector<Pixel> pixels;  // row-major order
  PromptLabel label = PromptLabel::positive;
};

enum class Connectivity { four, eight };

/// Connected components of a binary H×W mask.
std::vector<Region> label_components(const Tensor& mask, PromptLabel label,
                                     Connectivity conn = Connectivity::four);

/// Regions of P_pos >= tau_bin and P_neg >= tau_bin. Positive regions come
/// first; within a label regions are ordered by their first pixel in
/// row-major order.
std::vector<Region> connected_regions(const ProbabilityMap& p, double tau_bin,
                                      Connectivity conn = Connectivity::four);

/// Mean pixel position rounded half-up; if that pixel is not in the region,
/// the region pixel nearest to the unrounded mean (ties: smaller y, then x).
Prompt region_centroid(const Region& region);

PromptSet centroid_select(const std::vector<Region>& regions);

PromptSet random_select(const ProbabilityMap& p, double tau, std::size_t k_pos, std::size_t k_neg,
                        std::uint64_t seed);

/// k highest-probability pixels per channel; ties by (y, x) ascending.
PromptSet top_k_select(const ProbabilityMap& p, std::size_t k_pos, std::size_t k_neg);

enum class SelectionMethod { centroid, random, topk };

SelectionMethod parse_selection_method(const std::string& name);
std::string to_string(SelectionMethod m);

struct SelectionConfig {
  SelectionMethod method = SelectionMethod::centroid;
  double tau_bin = 0.5;  // centroid binarization threshold
  double tau = 0.5;      // random-selection pool threshold
  Connectivity connectivity = Connectivity::four;
};

struct PromptBudget {
  std::size_t positive = 0;
  std::size_t negative = 0;
};

/// Splits an "N-point" budget: ceil(N/2) positive, floor(N/2) negative.
PromptBudget split_point_budget(std::size_t points);

/// Selection with a per-label budget. For the centroid method the largest
/// regions of each label are kept (ties by region order) and emitted in
/// region order.
PromptSet select_prompts(const ProbabilityMap& p, const SelectionConfig& cfg, std::size_t points,
                         std::uint64_t seed);

/// Positive prompts at the centroids of the ground-truth components, largest
/// components first, at most `count`.
PromptSet expert_prompts(const Tensor& gt_mask, std::size_t count);

/// CSV with header "x,y,label", label 1 = positive, 0 = negative, LF endings.
/// Errors name the offending line.
PromptSet read_prompts_csv(const std::string& path, PromptSource source = PromptSource::expert);
PromptSet parse_prompts_csv(const std::string& text, const std::string& origin,
                            PromptSource source = PromptSource::expert);
std::string format_prompts_csv(const PromptSet& prompts);
void write_prompts_csv(const std::string& path, const PromptSet& prompts);

}  // namespace cellprompt
