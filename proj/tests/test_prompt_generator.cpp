#include <algorithm>
#include <stdexcept>

#include "doctest.h"
#include "maskseg/grad_check.hpp"
#include "maskseg/ops.hpp"
#include "maskseg/prompt_generator.hpp"
#include "test_util.hpp"

using namespace maskseg;
using maskseg::testing::bit_equal;
using maskseg::testing::random_tensor;
using maskseg::testing::randomize;
using maskseg::testing::weighted_sum;

namespace {

PromptGeneratorConfig toy(PromptVariant v, std::size_t n = 8) {
  PromptGeneratorConfig c;
  c.prompts = n;
  c.variant = v;
  c.embed_dim = 32;
  c.taps = 3;
  c.patch = 4;
  c.depth = 4;
  c.height = 16;
  c.width = 16;
  return c;
}

std::vector<Tensor> random_taps(const PromptGeneratorConfig& c, Rng& rng) {
  std::vector<Tensor> taps;
  for (std::size_t i = 0; i < c.taps; ++i)
    taps.push_back(random_tensor({1, c.embed_dim, c.depth, c.height / c.patch, c.width / c.patch}, rng));
  return taps;
}

void check_boxes_valid(const Tensor& boxes) {
  for (std::size_t i = 0; i < boxes.size(0); ++i) {
    const double x0 = boxes[i * 4], y0 = boxes[i * 4 + 1], x1 = boxes[i * 4 + 2], y1 = boxes[i * 4 + 3];
    CHECK(0.0 <= x0);
    CHECK(x0 <= x1);
    CHECK(x1 <= 1.0);
    CHECK(0.0 <= y0);
    CHECK(y0 <= y1);
    CHECK(y1 <= 1.0);
  }
}

/// Logits +4 inside the voxel set, -4 outside.
Tensor logits_from(std::size_t n, std::size_t d, std::size_t h, std::size_t w,
                   const std::vector<std::array<std::size_t, 4>>& on) {
  Tensor t = Tensor::full({n, d, h, w}, -4.0);
  for (auto [i, z, y, x] : on) t.data()[((i * d + z) * h + y) * w + x] = 4.0;
  return t;
}

}  // namespace

TEST_CASE("prompt generator output shapes for the toy configuration") {
  Rng rng(1);
  PromptGenerator pg(toy(PromptVariant::mask_avg_box), rng);
  PromptBundle b = pg.forward(random_taps(pg.config(), rng));
  CHECK(b.aux_mask_logits.shape() == Shape{8, 4, 16, 16});
  CHECK(b.aux_boxes.shape() == Shape{8, 4});
  CHECK(b.aux_cls_tokens.shape() == Shape{8, 32});
  CHECK(b.empty_mask.size() == 8);
}

TEST_CASE("every variant yields valid boxes and the expected heads") {
  for (PromptVariant v : {PromptVariant::mask_only, PromptVariant::box_only, PromptVariant::mask_and_box,
                          PromptVariant::mask_avg_box}) {
    CAPTURE(to_string(v));
    Rng rng(2);
    PromptGenerator pg(toy(v), rng);
    randomize(pg, rng, 0.3);
    PromptBundle b = pg.forward(random_taps(pg.config(), rng));
    ResolvedPrompts r = resolve_prompts(b);
    check_boxes_valid(b.aux_boxes);
    check_boxes_valid(r.boxes);
    CHECK(r.masks.has_value() == has_mask_head(v));
    CHECK(b.aux_mask_logits.defined() == has_mask_head(v));
    CHECK((pg.box_mlp != nullptr) == has_box_head(v));
    CHECK((pg.mask_out != nullptr) == has_mask_head(v));
  }
}

TEST_CASE("prompt generator gradients reach the taps") {
  PromptGeneratorConfig c = toy(PromptVariant::mask_and_box, 3);
  c.embed_dim = 8;
  c.depth = 2;
  c.height = 8;
  c.width = 8;
  c.min_channels = 4;
  Rng rng(3);
  PromptGenerator pg(c, rng);
  randomize(pg, rng, 0.4);
  std::vector<Tensor> taps = random_taps(c, rng);
  auto rep = grad_check(
      [&] {
        PromptBundle b = pg.forward(taps);
        return add(add(weighted_sum(b.aux_mask_logits, 1), weighted_sum(b.aux_boxes, 2)),
                   weighted_sum(b.aux_cls_tokens, 3));
      },
      taps);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("prompt generator is deterministic") {
  Rng rng(4);
  PromptGenerator pg(toy(PromptVariant::mask_avg_box), rng);
  randomize(pg, rng, 0.3);
  auto taps = random_taps(pg.config(), rng);
  PromptBundle a = pg.forward(taps), b = pg.forward(taps);
  CHECK(bit_equal(a.aux_mask_logits, b.aux_mask_logits));
  CHECK(bit_equal(a.aux_boxes, b.aux_boxes));
  CHECK(bit_equal(a.aux_cls_tokens, b.aux_cls_tokens));
  CHECK(a.empty_mask == b.empty_mask);
}

TEST_CASE("doubling the input intensity changes every output") {
  Rng rng(5);
  PromptGenerator pg(toy(PromptVariant::mask_and_box), rng);
  randomize(pg, rng, 0.3);
  auto taps = random_taps(pg.config(), rng);
  auto doubled = taps;
  for (auto& t : doubled) t = scale(t, 2.0);
  PromptBundle a = pg.forward(taps), b = pg.forward(doubled);
  CHECK_FALSE(bit_equal(a.aux_mask_logits, b.aux_mask_logits));
  CHECK_FALSE(bit_equal(a.aux_boxes, b.aux_boxes));
  CHECK_FALSE(bit_equal(a.aux_cls_tokens, b.aux_cls_tokens));
}

TEST_CASE("averaged variant takes the mean of the mask-derived and learned boxes") {
  // rows 1..2, cols 1..2 of a 5x5 plane -> (0.2, 0.2, 0.6, 0.6)
  PromptBundle b;
  b.variant = PromptVariant::mask_avg_box;
  b.aux_mask_logits = logits_from(1, 1, 5, 5, {{0, 0, 1, 1}, {0, 0, 1, 2}, {0, 0, 2, 1}, {0, 0, 2, 2}});
  b.aux_boxes = Tensor::from({1, 4}, {0.4, 0.4, 0.8, 0.8});
  ResolvedPrompts r = resolve_prompts(b);
  const double want[4] = {0.3, 0.3, 0.7, 0.7};
  for (int k = 0; k < 4; ++k) CHECK(r.boxes[k] == doctest::Approx(want[k]).epsilon(1e-15));
  REQUIRE(r.masks.has_value());
  CHECK(bit_equal(*r.masks, b.aux_mask_logits));
}

TEST_CASE("averaged boxes stay between their two sources") {
  Rng rng(6);
  PromptGenerator pg(toy(PromptVariant::mask_avg_box), rng);
  randomize(pg, rng, 0.5);
  PromptBundle b = pg.forward(random_taps(pg.config(), rng));
  Tensor derived = mask_derived_boxes(b.aux_mask_logits);
  ResolvedPrompts r = resolve_prompts(b);
  for (std::size_t i = 0; i < r.boxes.numel(); ++i) {
    CHECK(r.boxes[i] >= std::min(derived[i], b.aux_boxes[i]) - 1e-15);
    CHECK(r.boxes[i] <= std::max(derived[i], b.aux_boxes[i]) + 1e-15);
  }
}

TEST_CASE("mask-only variant boxes come from the thresholded mask") {
  Tensor logits = logits_from(1, 1, 4, 4, {{0, 0, 1, 2}});
  Volume m(1, 1, 4, 4);
  m.at(0, 0, 1, 2) = 1.0;
  const Box want = box_from_mask(m);
  PromptBundle b;
  b.variant = PromptVariant::mask_only;
  b.aux_mask_logits = logits;
  b.aux_boxes = mask_derived_boxes(logits, &b.empty_mask);
  ResolvedPrompts r = resolve_prompts(b);
  CHECK(r.boxes[0] == want.x_min);
  CHECK(r.boxes[1] == want.y_min);
  CHECK(r.boxes[2] == want.x_max);
  CHECK(r.boxes[3] == want.y_max);
  CHECK(r.boxes[0] == 0.5);
  CHECK(r.boxes[1] == 0.25);
  CHECK_FALSE(r.empty_mask[0]);
}

TEST_CASE("an empty thresholded mask becomes the full box and is flagged") {
  std::vector<bool> empty;
  Tensor boxes = mask_derived_boxes(logits_from(2, 1, 3, 3, {{1, 0, 0, 0}}), &empty);
  CHECK(empty == std::vector<bool>{true, false});
  CHECK(boxes[0] == 0.0);
  CHECK(boxes[1] == 0.0);
  CHECK(boxes[2] == 1.0);
  CHECK(boxes[3] == 1.0);
}

TEST_CASE("box-only variant has no mask prompts") {
  Rng rng(7);
  PromptGenerator pg(toy(PromptVariant::box_only), rng);
  PromptBundle b = pg.forward(random_taps(pg.config(), rng));
  ResolvedPrompts r = resolve_prompts(b);
  CHECK_FALSE(r.masks.has_value());
  CHECK(r.boxes.shape() == Shape{8, 4});
}

TEST_CASE("mask-derived boxes carry no gradient") {
  Rng rng(8);
  PromptGenerator pg(toy(PromptVariant::mask_only, 2), rng);
  randomize(pg, rng, 0.3);
  PromptBundle b = pg.forward(random_taps(pg.config(), rng));
  CHECK_FALSE(b.aux_boxes.requires_grad());
}

TEST_CASE("variant spellings") {
  CHECK(parse_prompt_variant("mask") == PromptVariant::mask_only);
  CHECK(parse_prompt_variant("box") == PromptVariant::box_only);
  CHECK(parse_prompt_variant("mask_box") == PromptVariant::mask_and_box);
  CHECK(parse_prompt_variant("mask_avg_box") == PromptVariant::mask_avg_box);
  CHECK_THROWS_AS(parse_prompt_variant("points"), std::invalid_argument);
}
