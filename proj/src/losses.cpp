// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cellprompt/errors.hpp"

namespace cellprompt {

namespace {

void check_pair(const Tensor& p, const Tensor& g, const char* what) {
  if (p.shape() != g.shape()) {
    throw DimensionError(std::string(what) + ": prediction " + shape_str(p.shape()) + " vs target " +
                         shape_str(g.shape()));
  }
  for (double v : g.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError(std::string(what) + ": target must be binary");
  }
}

}  // namespace

CeTerm parse_ce_term(const std::string& name) {
  if (name == "full") return CeTerm::full;
  if (name == "onesided") return CeTerm::onesided;
  throw ConfigError("unknown ce_term '" + name + "' (expected full or onesided)");
}

std::string to_string(CeTerm term) { return term == CeTerm::full ? "full" : "onesided"; }

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be non-negative");
  if (!(alpha_t >= 0.0 && alpha_t <= 1.0)) throw ConfigError("focal alpha_t must lie in [0, 1]");
  if (!(focal_weight >= 0.0 && dice_weight >= 0.0 && score_weight >= 0.0)) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("loss eps must lie in (0, 0.5)");
}

double focal_loss(const Tensor& p, const Tensor& g, const LossConfig& cfg, Tensor* dp) {
  check_pair(p, g, "focal_loss");
  const double n = static_cast<double>(p.size());
  if (dp) *dp = Tensor::zeros_like(p);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool fg = g[i] == 1.0;
    const double pc = std::clamp(p[i], cfg.eps, 1.0 - cfg.eps);
    const double pt = fg ? pc : 1.0 - pc;
    const double at = fg ? cfg.alpha_t : 1.0 - cfg.alpha_t;
    const double q = 1.0 - pt;
    const double lp = std::log(pt);
    total += -at * std::pow(q, cfg.gamma) * lp;
    if (dp && p[i] > cfg.eps && p[i] < 1.0 - cfg.eps) {
      double dpt = -at * std::pow(q, cfg.gamma) / pt;
      if (cfg.gamma != 0.0) dpt += at * cfg.gamma * std::pow(q, cfg.gamma - 1.0) * lp;
      (*dp)[i] = (fg ? dpt : -dpt) / n;
    }
  }
  return total / n;
}

double dice_loss(const Tensor& p, const Tensor& g, double eps, Tensor* dp) {
  check_pair(p, g, "dice_loss");
  double pg = 0.0, pp = 0.0, gg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pg += p[i] * g[i];
    pp += p[i] * p[i];
    gg += g[i] * g[i];
  }
  const double num = 2.0 * pg + eps;
  const double den = pp + gg + eps;
  if (dp) {
    *dp = Tensor::zeros_like(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      (*dp)[i] = -(2.0 * g[i] * den - 2.0 * p[i] * num) / (den * den);
    }
  }
  return 1.0 - num / den;
}

double cross_entropy(const Tensor& p, const Tensor& g, double eps, CeTerm term, Tensor* dp) {
  check_pair(p, g, "cross_entropy");
  const double n = static_cast<double>(p.size());
  if (dp) *dp = Tensor::zeros_like(p);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(p[i], eps, 1.0 - eps);
    const bool inside = p[i] > eps && p[i] < 1.0 - eps;
    if (g[i] == 1.0) {
      total -= std::log(pc);
      if (dp && inside) (*dp)[i] = -1.0 / (pc * n);
    } else if (term == CeTerm::full) {
      total -= std::log(1.0 - pc);
      if (dp && inside) (*dp)[i] = 1.0 / ((1.0 - pc) * n);
    }
  }
  return total / n;
}

double dice_ce_loss(const Tensor& p, const Tensor& g, double eps, CeTerm term, Tensor* dp) {
  Tensor dd, dc;
  const double v = dice_loss(p, g, eps, dp ? &dd : nullptr) + cross_entropy(p, g, eps, term, dp ? &dc : nullptr);
  if (dp) *dp = add(dd, dc);
  return v;
}

SegmentationLoss segmentation_loss(const DecoderOutput& out, const Tensor& g, const LossConfig& cfg) {
  const Tensor p = sigmoid(out.mask_logits);
  SegmentationLoss r;
  Tensor dfocal, ddice;
  r.focal = focal_loss(p, g, cfg, &dfocal);
  r.dice = dice_loss(p, g, cfg.eps, &ddice);
  r.score_target = compute_metrics(binarize(out), g).iou;
  const double err = out.score - r.score_target;
  r.score = err * err;
  r.total = cfg.focal_weight * r.focal + cfg.dice_weight * r.dice + cfg.score_weight * r.score;
  Tensor dp = scale(dfocal, cfg.focal_weight);
  axpy_inplace(dp, cfg.dice_weight, ddice);
  r.dlogits = sigmoid_backward(p, dp);
  r.dscore = 2.0 * cfg.score_weight * err;
  return r;
}

MetricReport compute_metrics(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "compute_metrics");
  for (double v : pred.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("compute_metrics: prediction must be binary");
  }
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == 1.0, b = gt[i] == 1.0;
    tp += a && b;
    fp += a && !b;
    fn += !a && b;
  }
  if (tp + fp + fn == 0) return {1.0, 1.0, 1.0};
  MetricReport m;
  m.dice = 2 * tp / (2 * tp + fp + fn);
  m.iou = tp / (tp + fp + fn);
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  m.f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  return m;
}

MetricReport mean_metrics(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const MetricReport& r : reports) {
    m.f1 += r.f1;
    m.iou += r.iou;
    m.dice += r.dice;
  }
  const double n = static_cast<double>(reports.size());
  return {m.f1 / n, m.iou / n, m.dice / n};
}

std::string to_json(const MetricReport& m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "{\"f1\":%.6f,\"iou\":%.6f,\"dice\":%.6f}", m.f1, m.iou, m.dice);
  return buf;
}

}  // namespace cellprompt
