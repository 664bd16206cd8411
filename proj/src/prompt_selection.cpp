// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/prompt_selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cellprompt/errors.hpp"
#include "cellprompt/rng.hpp"

namespace cellprompt {

bool PromptSet::add(const Prompt& p) {
  if (std::find(prompts_.begin(), prompts_.end(), p) != prompts_.end()) return false;
  prompts_.push_back(p);
  return true;
}

std::size_t PromptSet::count(PromptLabel label) const {
  return static_cast<std::size_t>(
      std::count_if(prompts_.begin(), prompts_.end(), [&](const Prompt& p) { return p.label == label; }));
}

PromptSet merge_prompts(const PromptSet& a, const PromptSet& b) {
  PromptSource src = a.source();
  if (a.empty()) src = b.source();
  else if (!b.empty() && b.source() != a.source()) src = PromptSource::mixed;
  PromptSet out(src);
  for (const Prompt& p : a.prompts()) out.add(p);
  for (const Prompt& p : b.prompts()) out.add(p);
  return out;
}

std::vector<Region> label_components(const Tensor& mask, PromptLabel label, Connectivity conn) {
  if (mask.ndim() != 2) throw DimensionError("label_components: expected H×W, got " + shape_str(mask.shape()));
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  std::vector<char> seen(mask.size(), 0);
  std::vector<Region> regions;
  // The first four offsets are the 4-neighbourhood.
  static constexpr int offs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  const int nn = conn == Connectivity::four ? 4 : 8;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int start = y * w + x;
      if (mask[start] == 0.0 || seen[start]) continue;
      Region r;
      r.label = label;
      seen[start] = 1;
      stack.assign(1, start);
      std::vector<int> members;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        members.push_back(cur);
        const int cy = cur / w, cx = cur % w;
        for (int k = 0; k < nn; ++k) {
          const int ny = cy + offs[k][1], nx = cx + offs[k][0];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const int ni = ny * w + nx;
          if (mask[ni] != 0.0 && !seen[ni]) {
            seen[ni] = 1;
            stack.push_back(ni);
          }
        }
      }
      std::sort(members.begin(), members.end());
      r.pixels.reserve(members.size());
      for (int m : members) r.pixels.push_back({m % w, m / w});
      regions.push_back(std::move(r));
    }
  }
  return regions;
}

namespace {

Tensor threshold(const Tensor& p, double tau) {
  Tensor b = Tensor::zeros_like(p);
  for (std::size_t i = 0; i < p.size(); ++i) b[i] = p[i] >= tau ? 1.0 : 0.0;
  return b;
}

void check_map(const ProbabilityMap& p) {
  if (p.pos.ndim() != 2 || p.pos.shape() != p.neg.shape()) {
    throw DimensionError("probability map channels must be equal H×W, got " + shape_str(p.pos.shape()) +
                         " and " + shape_str(p.neg.shape()));
  }
}

}  // namespace

std::vector<Region> connected_regions(const ProbabilityMap& p, double tau_bin, Connectivity conn) {
  check_map(p);
  if (!(tau_bin > 0.0 && tau_bin < 1.0)) throw ConfigError("tau_bin must lie in (0, 1)");
  std::vector<Region> regions = label_components(threshold(p.pos, tau_bin), PromptLabel::positive, conn);
  std::vector<Region> neg = label_components(threshold(p.neg, tau_bin), PromptLabel::negative, conn);
  regions.insert(regions.end(), std::make_move_iterator(neg.begin()), std::make_move_iterator(neg.end()));
  return regions;
}

Prompt region_centroid(const Region& region) {
  if (region.pixels.empty()) throw ValidationError("region_centroid: empty region");
  double sx = 0.0, sy = 0.0;
  for (const Pixel& px : region.pixels) {
    sx += px.x;
    sy += px.y;
  }
  const double n = static_cast<double>(region.pixels.size());
  const double cx = sx / n, cy = sy / n;
  const Pixel rounded{static_cast<int>(std::floor(cx + 0.5)), static_cast<int>(std::floor(cy + 0.5))};
  if (std::find(region.pixels.begin(), region.pixels.end(), rounded) != region.pixels.end()) {
    return {rounded.x, rounded.y, region.label};
  }
  const Pixel* best = nullptr;
  double best_d = 0.0;
  for (const Pixel& px : region.pixels) {
    const double d = (px.x - cx) * (px.x - cx) + (px.y - cy) * (px.y - cy);
    const bool better = !best || d < best_d ||
                        (d == best_d && (px.y < best->y || (px.y == best->y && px.x < best->x)));
    if (better) {
      best = &px;
      best_d = d;
    }
  }
  return {best->x, best->y, region.label};
}

PromptSet centroid_select(const std::vector<Region>& regions) {
  PromptSet out(PromptSource::automatic);
  for (const Region& r : regions) out.add(region_centroid(r));
  return out;
}

namespace {

std::vector<Pixel> pool_of(const Tensor& p, double tau) {
  std::vector<Pixel> pool;
  const int w = static_cast<int>(p.dim(1));
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] >= tau) pool.push_back({static_cast<int>(i) % w, static_cast<int>(i) / w});
  }
  return pool;
}

// Partial Fisher-Yates: position i swaps with i + below(n - i).
void draw(std::vector<Pixel> pool, std::size_t k, PromptLabel label, Rng& rng, PromptSet& out) {
  const std::size_t m = std::min(k, pool.size());
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    out.add({pool[i].x, pool[i].y, label});
  }
}

}  // namespace

PromptSet random_select(const ProbabilityMap& p, double tau, std::size_t k_pos, std::size_t k_neg,
                        std::uint64_t seed) {
  check_map(p);
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  Rng rng(seed);
  PromptSet out(PromptSource::automatic);
  draw(pool_of(p.pos, tau), k_pos, PromptLabel::positive, rng, out);
  draw(pool_of(p.neg, tau), k_neg, PromptLabel::negative, rng, out);
  return out;
}

PromptSet top_k_select(const ProbabilityMap& p, std::size_t k_pos, std::size_t k_neg) {
  check_map(p);
  PromptSet out(PromptSource::automatic);
  const int w = static_cast<int>(p.pos.dim(1));
  auto take = [&](const Tensor& ch, std::size_t k, PromptLabel label) {
    std::vector<std::size_t> idx(ch.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t m = std::min(k, idx.size());
    // Row-major index order is exactly the (y, x) tie-break.
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                      [&](std::size_t a, std::size_t b) { return ch[a] > ch[b] || (ch[a] == ch[b] && a < b); });
    for (std::size_t i = 0; i < m; ++i) {
      out.add({static_cast<int>(idx[i]) % w, static_cast<int>(idx[i]) / w, label});
    }
  };
  take(p.pos, k_pos, PromptLabel::positive);
  take(p.neg, k_neg, PromptLabel::negative);
  return out;
}

SelectionMethod parse_selection_method(const std::string& name) {
  if (name == "centroid") return SelectionMethod::centroid;
  if (name == "random") return SelectionMethod::random;
  if (name == "topk") return SelectionMethod::topk;
  throw ConfigError("unknown selection method '" + name + "' (expected centroid, random or topk)");
}

std::string to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::centroid: return "centroid";
    case SelectionMethod::random: return "random";
    case SelectionMethod::topk: return "topk";
  }
  return "?";
}

PromptBudget split_point_budget(std::size_t points) { return {(points + 1) / 2, points / 2}; }

namespace {

std::vector<Region> keep_largest(std::vector<Region> regions, PromptBudget budget) {
  std::vector<std::size_t> order(regions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return regions[a].pixels.size() > regions[b].pixels.size();
  });
  std::vector<char> keep(regions.size(), 0);
  std::size_t pos = 0, neg = 0;
  for (std::size_t i : order) {
    std::size_t& used = regions[i].label == PromptLabel::positive ? pos : neg;
    const std::size_t cap = regions[i].label == PromptLabel::positive ? budget.positive : budget.negative;
    if (used < cap) {
      keep[i] = 1;
      ++used;
    }
  }
  std::vector<Region> kept;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (keep[i]) kept.push_back(std::move(regions[i]));
  }
  return kept;
}

}  // namespace

PromptSet select_prompts(const ProbabilityMap& p, const SelectionConfig& cfg, std::size_t points,
                         std::uint64_t seed) {
  const PromptBudget budget = split_point_budget(points);
  if (points == 0) return PromptSet(PromptSource::automatic);
  switch (cfg.method) {
    case SelectionMethod::centroid:
      return centroid_select(keep_largest(connected_regions(p, cfg.tau_bin, cfg.connectivity), budget));
    case SelectionMethod::random:
      return random_select(p, cfg.tau, budget.positive, budget.negative, seed);
    case SelectionMethod::topk:
      return top_k_select(p, budget.positive, budget.negative);
  }
  return PromptSet();
}

PromptSet expert_prompts(const Tensor& gt_mask, std::size_t count) {
  PromptSet out(PromptSource::expert);
  if (count == 0) return out;
  std::vector<Region> comps = label_components(gt_mask, PromptLabel::positive);
  comps = keep_largest(std::move(comps), {count, 0});
  std::stable_sort(comps.begin(), comps.end(),
                   [](const Region& a, const Region& b) { return a.pixels.size() > b.pixels.size(); });
  for (const Region& r : comps) out.add(region_centroid(r));
  return out;
}

PromptSet parse_prompts_csv(const std::string& text, const std::string& origin, PromptSource source) {
  PromptSet out(source);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ValidationError(origin + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') fail("CRLF line endings are not accepted");
    if (lineno == 1) {
      if (line != "x,y,label") fail("expected header 'x,y,label'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 3) fail("expected 3 fields, got " + std::to_string(fields.size()));
    auto to_int = [&](const std::string& s, const char* what) {
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 9) {
        fail(std::string("invalid ") + what + " '" + s + "'");
      }
      return std::stoi(s);
    };
    const int x = to_int(fields[0], "x");
    const int y = to_int(fields[1], "y");
    if (fields[2] != "0" && fields[2] != "1") fail("label must be 0 or 1, got '" + fields[2] + "'");
    const Prompt p{x, y, fields[2] == "1" ? PromptLabel::positive : PromptLabel::negative};
    if (!out.add(p)) fail("duplicate prompt");
  }
  if (lineno == 0) throw ValidationError(origin + ":1: missing header 'x,y,label'");
  return out;
}

PromptSet read_prompts_csv(const std::string& path, PromptSource source) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open prompt file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_prompts_csv(buf.str(), path, source);
}

std::string format_prompts_csv(const PromptSet& prompts) {
  std::string s = "x,y,label\n";
  for (const Prompt& p : prompts.prompts()) {
    s += std::to_string(p.x) + "," + std::to_string(p.y) + "," +
         (p.label == PromptLabel::positive ? "1" : "0") + "\n";
  }
  return s;
}

void write_prompts_csv(const std::string& path, const PromptSet& prompts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write prompt file " + path);
  out << format_prompts_csv(prompts);
}

}  // namespace cellprompt
