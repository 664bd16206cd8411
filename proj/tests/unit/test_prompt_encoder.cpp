// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>
#include <set>

#include "cellprompt/errors.hpp"
#include "cellprompt/ops.hpp"
#include "cellprompt/prompt_encoder.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cellprompt;

namespace {

std::vector<double> row(const Tensor& t, std::size_t i) {
  return std::vector<double>(t.ptr() + i * t.dim(1), t.ptr() + (i + 1) * t.dim(1));
}

}  // namespace

TEST_CASE("positional encoding layout") {
  const std::size_t d = 8;
  const Tensor pe = positional_encoding(0.25, 0.5, d);
  REQUIRE(pe.size() == d);
  // two frequencies per axis: pi and 128 pi
  const double f[] = {std::numbers::pi, 128.0 * std::numbers::pi};
  for (int i = 0; i < 2; ++i) {
    CHECK(pe[2 * i] == doctest::Approx(std::sin(f[i] * 0.25)).epsilon(1e-12));
    CHECK(pe[2 * i + 1] == doctest::Approx(std::cos(f[i] * 0.25)).epsilon(1e-12));
    CHECK(pe[4 + 2 * i] == doctest::Approx(std::sin(f[i] * 0.5)).epsilon(1e-12));
    CHECK(pe[4 + 2 * i + 1] == doctest::Approx(std::cos(f[i] * 0.5)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(positional_encoding(0.1, 0.1, 6), ConfigError);
}

TEST_CASE("labels differ by the embedding difference") {
  Rng rng(1);
  const PromptEncoder enc(16, rng);
  PromptSet s;
  s.add({5, 9, PromptLabel::positive});
  s.add({5, 9, PromptLabel::negative});
  const Tensor t = encode_prompts(s, 32, enc).tokens;
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(t.at(0, j) - t.at(1, j) ==
          doctest::Approx(enc.positive.value[j] - enc.negative.value[j]).epsilon(1e-12));
  }
}

TEST_CASE("token counts and permutation") {
  Rng rng(2);
  const PromptEncoder enc(16, rng);
  CHECK(encode_prompts(PromptSet{}, 32, enc).tokens.shape() == Shape{1, 16});
  PromptSet s, reversed;
  std::vector<Prompt> ps;
  for (int i = 0; i < 5; ++i) ps.push_back({i * 3, 31 - i, i % 2 ? PromptLabel::negative : PromptLabel::positive});
  for (const Prompt& p : ps) s.add(p);
  for (auto it = ps.rbegin(); it != ps.rend(); ++it) reversed.add(*it);
  const Tensor a = encode_prompts(s, 32, enc).tokens, b = encode_prompts(reversed, 32, enc).tokens;
  CHECK(a.shape() == Shape{5, 16});
  for (std::size_t i = 0; i < 5; ++i) CHECK(row(a, i) == row(b, 4 - i));
}

TEST_CASE("out-of-bounds prompts are rejected with the prompt named") {
  Rng rng(3);
  const PromptEncoder enc(16, rng);
  PromptSet s;
  s.add({0, 0, PromptLabel::positive});
  s.add({32, 1, PromptLabel::positive});
  try {
    (void)encode_prompts(s, 32, enc);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("(32,1)") != std::string::npos);
  }
  PromptSet neg;
  neg.add({-1, 0, PromptLabel::negative});
  CHECK_THROWS_AS(encode_prompts(neg, 32, enc), ValidationError);
}

TEST_CASE("parameters are frozen") {
  Rng rng(4);
  PromptEncoder enc(16, rng);
  NamedParams params;
  enc.collect_params(params);
  CHECK(params.size() == 3);
  for (const auto& [name, p] : params) CHECK_FALSE(p->trainable);
  CHECK_THROWS_AS(PromptEncoder(10, rng), ConfigError);
}

TEST_CASE("no two pixels share a token up to 256x256") {
  Rng rng(5);
  const PromptEncoder enc(64, rng);
  for (std::size_t size : {8u, 64u, 256u}) {
    PromptSet s;
    for (int y = 0; y < static_cast<int>(size); ++y)
      for (int x = 0; x < static_cast<int>(size); ++x) s.add({x, y, PromptLabel::positive});
    const Tensor t = encode_prompts(s, size, enc).tokens;
    std::set<std::vector<double>> unique;
    for (std::size_t i = 0; i < t.dim(0); ++i) unique.insert(row(t, i));
    CHECK(unique.size() == size * size);
    // neighbours are separated by more than rounding noise
    double closest = INFINITY;
    for (std::size_t i = 0; i + 1 < t.dim(0); ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < 64; ++j) d2 += (t.at(i, j) - t.at(i + 1, j)) * (t.at(i, j) - t.at(i + 1, j));
      closest = std::min(closest, d2);
    }
    CHECK(closest > 1e-6);
  }
}

TEST_CASE("dense encoding matches prompts at patch centres") {
  const Tensor dense = dense_positional_encoding(4, 32, 16);
  CHECK(dense.shape() == Shape{16, 16});
  const Tensor centre = positional_encoding((8.0 * 1 + 4.0) / 32.0, (8.0 * 2 + 4.0) / 32.0, 16);
  CHECK(max_abs_diff(Tensor({16}, row(dense, 2 * 4 + 1)), centre) < 1e-12);
  CHECK_THROWS_AS(dense_positional_encoding(5, 32, 16), ConfigError);
}
