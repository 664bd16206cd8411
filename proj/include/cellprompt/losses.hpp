// SPDX-License-Identifier: Apache-2.0
//
// Segmentation objectives and evaluation metrics. Losses take probabilities
// and binary targets of equal shape and optionally write d(loss)/d(p).
#pragma once

#include <string>

#include "cellprompt/mask_decoder.hpp"

namespace cellprompt {

/// Cross-entropy variant used by dice_ce_loss: full binary CE, or the
/// foreground-only term −g·log p.
enum class CeTerm { full, onesided };

CeTerm parse_ce_term(const std::string& name);
std::string to_string(CeTerm term);

struct LossConfig {
  double alpha_t = 0.25;
  double gamma = 2.0;
  double focal_weight = 20.0;
  double dice_weight = 1.0;
  double score_weight = 1.0;
  double eps = 1e-6;
  CeTerm ce_term = CeTerm::full;

  void validate() const;
};

/// Mean of −α_t (1−p_t)^γ log p_t with p clamped to [eps, 1−eps].
double focal_loss(const Tensor& p, const Tensor& g, const LossConfig& cfg, Tensor* dp = nullptr);

/// 1 − (2Σpg + eps) / (Σp² + Σg² + eps).
double dice_loss(const Tensor& p, const Tensor& g, double eps, Tensor* dp = nullptr);

/// Mean binary cross-entropy (or its foreground-only term), p clamped to [eps, 1−eps].
double cross_entropy(const Tensor& p, const Tensor& g, double eps, CeTerm term, Tensor* dp = nullptr);

double dice_ce_loss(const Tensor& p, const Tensor& g, double eps, CeTerm term = CeTerm::full,
                    Tensor* dp = nullptr);

struct SegmentationLoss {
  double total = 0.0;
  double focal = 0.0;
  double dice = 0.0;
  double score = 0.0;       // squared score error, unweighted
  double score_target = 0.0;  // IoU of the binarized mask
  Tensor dlogits;
  double dscore = 0.0;
};

/// focal_weight·focal + dice_weight·dice on sigmoid(mask_logits), plus
/// score_weight·(score − IoU)² where IoU is measured on the binarized mask and
/// treated as a constant.
SegmentationLoss segmentation_loss(const DecoderOutput& out, const Tensor& g, const LossConfig& cfg);

struct MetricReport {
  double f1 = 0.0;
  double iou = 0.0;
  double dice = 0.0;
};

/// Pixel-level metrics of binary masks; an empty prediction against an empty
/// ground truth scores 1 on every metric.
MetricReport compute_metrics(const Tensor& pred, const Tensor& gt);

/// Mean of per-image reports.
MetricReport mean_metrics(const std::vector<MetricReport>& reports);

/// {"f1":…,"iou":…,"dice":…} with six decimals, no trailing newline.
std::string to_json(const MetricReport& m);

}  // namespace cellprompt
