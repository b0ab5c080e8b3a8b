#include <algorithm>
#include <stdexcept>
#include <string>

#include "doctest.h"
#include "maskseg/encoder.hpp"
#include "maskseg/grad_check.hpp"
#include "maskseg/ops.hpp"
#include "test_util.hpp"

using namespace maskseg;
using maskseg::testing::bit_equal;
using maskseg::testing::random_tensor;
using maskseg::testing::randomize;
using maskseg::testing::weighted_sum;

namespace {

struct Variant {
  DepthBranch kind;
  BranchPosition position;
};

const Variant kVariants[] = {
    {DepthBranch::none, BranchPosition::middle},
    {DepthBranch::depth_mlp, BranchPosition::middle},
    {DepthBranch::depth_mlp, BranchPosition::after_up},
    {DepthBranch::depth_mlp, BranchPosition::before_down},
    {DepthBranch::depth_conv, BranchPosition::middle},
    {DepthBranch::depth_conv, BranchPosition::after_up},
    {DepthBranch::depth_conv, BranchPosition::before_down},
};

AdapterConfig adapter_cfg(Variant v, std::size_t dim, std::size_t depth) {
  AdapterConfig c;
  c.dim = dim;
  c.depth = depth;
  c.kind = v.kind;
  c.position = v.position;
  return c;
}

EncoderConfig tiny_encoder(bool adapters, DepthBranch kind = DepthBranch::depth_conv) {
  EncoderConfig e;
  e.patch = 4;
  e.embed_dim = 16;
  e.blocks = 2;
  e.heads = 2;
  e.tap_period = 1;
  e.depth = 3;
  e.height = 8;
  e.width = 8;
  e.adapters = adapters;
  e.adapter.kind = kind;
  return e;
}

}  // namespace

TEST_CASE("adapter with zeroed up projection is the identity for every kind and position") {
  for (const auto& v : kVariants) {
    CAPTURE(to_string(v.kind));
    CAPTURE(to_string(v.position));
    Rng rng(3);
    Adapter a(adapter_cfg(v, 16, 4), rng);
    randomize(a, rng);
    a.up.zero();
    Tensor x = random_tensor({1, 4, 6, 16}, rng);
    CHECK(bit_equal(a.forward(x, GridHW{2, 3}), x));
  }
}

TEST_CASE("adapter preserves shape on a 32-channel 4x8x8 grid") {
  for (const auto& v : kVariants) {
    Rng rng(5);
    Adapter a(adapter_cfg(v, 32, 4), rng);
    randomize(a, rng);
    Tensor x = random_tensor({1, 4, 64, 32}, rng);
    CHECK(a.forward(x, GridHW{8, 8}).shape() == x.shape());
  }
}

TEST_CASE("adapter at initialization is the identity") {
  Rng rng(8);
  Adapter a(adapter_cfg({DepthBranch::depth_mlp, BranchPosition::middle}, 8, 3), rng);
  Tensor x = random_tensor({1, 3, 4, 8}, rng);
  CHECK(bit_equal(a.forward(x), x));
}

TEST_CASE("depth-conv adapter gradients match finite differences") {
  Rng rng(11);
  Adapter a(adapter_cfg({DepthBranch::depth_conv, BranchPosition::middle}, 8, 3), rng);
  randomize(a, rng);
  Tensor x = random_tensor({1, 3, 4, 8}, rng);
  auto rep = grad_check([&](const Tensor& t) { return weighted_sum(a.forward(t, GridHW{2, 2})); }, x);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);

  NamedTensors params = a.named_parameters();
  std::vector<Tensor> probes;
  for (auto& [n, t] : params) probes.push_back(t);
  auto rep2 = grad_check([&] { return weighted_sum(a.forward(x, GridHW{2, 2})); }, probes);
  CHECK(rep2.passed);
}

TEST_CASE("depth-mlp adapter gradients match finite differences") {
  Rng rng(12);
  Adapter a(adapter_cfg({DepthBranch::depth_mlp, BranchPosition::after_up}, 8, 3), rng);
  randomize(a, rng);
  Tensor x = random_tensor({1, 3, 4, 8}, rng);
  auto rep = grad_check([&](const Tensor& t) { return weighted_sum(a.forward(t)); }, x);
  CHECK(rep.passed);
}

TEST_CASE("depth-conv adapter refuses token mode") {
  Rng rng(1);
  Adapter a(adapter_cfg({DepthBranch::depth_conv, BranchPosition::middle}, 8, 3), rng);
  CHECK_THROWS_AS(a.forward(Tensor::zeros({1, 3, 4, 8})), std::invalid_argument);
}

TEST_CASE("adapter parameter names follow the branch placement") {
  Rng rng(1);
  Adapter a(adapter_cfg({DepthBranch::depth_mlp, BranchPosition::before_down}, 8, 4), rng);
  std::vector<std::string> names;
  for (auto& [n, t] : a.named_parameters()) names.push_back(n);
  std::sort(names.begin(), names.end());
  CHECK(names == std::vector<std::string>{"dmlp_pre_down/fc1/weight", "dmlp_pre_down/fc2/weight", "down/bias",
                                          "down/weight", "up/bias", "up/weight"});
  Adapter c(adapter_cfg({DepthBranch::depth_conv, BranchPosition::after_up}, 8, 4), rng);
  bool found = false;
  for (auto& [n, t] : c.named_parameters())
    if (n == "dconv_post_up/weight") {
      found = true;
      CHECK(t.shape() == Shape{8, 1, 3, 1, 1});
    }
  CHECK(found);
}

TEST_CASE("a depth branch without a depth kind is rejected") {
  AdapterConfig c;
  c.kind = DepthBranch::none;
  c.position = BranchPosition::after_up;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("conv stem maps M modalities to three channels") {
  for (std::size_t m : {1u, 4u}) {
    Rng rng(2);
    ConvStem stem(m, rng);
    Tensor y = stem.forward(random_tensor({1, m, 4, 16, 16}, rng));
    CHECK(y.shape() == Shape{1, 3, 4, 16, 16});
  }
}

TEST_CASE("encoder output shapes for the toy configuration") {
  EncoderConfig e;
  e.patch = 4;
  e.embed_dim = 32;
  e.blocks = 4;
  e.tap_period = 2;
  e.depth = 4;
  e.height = 16;
  e.width = 16;
  Rng rng(4);
  ImageEncoder enc(e, rng);
  EncoderOutput out = enc.forward(random_tensor({1, 1, 4, 16, 16}, rng));
  CHECK(out.embedding.shape() == Shape{1, 32, 4, 4, 4});
  REQUIRE(out.taps.size() == 3);
  CHECK(e.tap_count() == 3);
  for (const auto& t : out.taps) CHECK(t.shape() == Shape{1, 32, 4, 4, 4});
  CHECK(bit_equal(out.taps.back(), out.embedding));
  CHECK(enc.adapters().size() == 8);
}

TEST_CASE("encoder rejects extents that are not multiples of the patch, suggesting padding") {
  EncoderConfig e = tiny_encoder(false);
  e.height = 10;
  try {
    e.validate();
    FAIL("expected a rejection");
  } catch (const std::invalid_argument& err) {
    CHECK(std::string(err.what()).find("pad") != std::string::npos);
  }
}

TEST_CASE("zeroed adapters reproduce the adapter-free encoder bit for bit") {
  for (DepthBranch kind : {DepthBranch::none, DepthBranch::depth_mlp, DepthBranch::depth_conv}) {
    Rng rng(21);
    ImageEncoder with(tiny_encoder(true, kind), rng);
    randomize(with, rng, 0.3);
    for (Adapter* a : with.adapters()) a->up.zero();
    Rng rng2(22);
    ImageEncoder without(tiny_encoder(false), rng2);
    without.load_state(with.named_parameters());

    Tensor img = random_tensor({1, 1, 3, 8, 8}, rng);
    EncoderOutput a = with.forward(img), b = without.forward(img);
    CHECK(bit_equal(a.embedding, b.embedding));
    for (std::size_t i = 0; i < a.taps.size(); ++i) CHECK(bit_equal(a.taps[i], b.taps[i]));
  }
}

TEST_CASE("depth information flows between slices only through depth-aware parts") {
  auto run = [](bool adapters, bool depth_embed, DepthBranch kind) {
    EncoderConfig e = tiny_encoder(adapters, kind);
    e.depth_pos_embed = depth_embed;
    Rng rng(31);
    ImageEncoder enc(e, rng);
    randomize(enc, rng, 0.3);
    Tensor img = random_tensor({1, 1, 3, 8, 8}, rng);
    Tensor img2 = img.clone();
    for (std::size_t i = 0; i < 64; ++i) img2.data()[i] += 1.0;  // perturb slice 0
    Tensor a = enc.forward(img).embedding, b = enc.forward(img2).embedding;
    REQUIRE(a.shape() == Shape{1, 16, 3, 2, 2});
    // slice 2 is not adjacent to slice 0
    double diff = 0;
    for (std::size_t c = 0; c < 16; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = (c * 3 + 2) * 4 + i;
        diff = std::max(diff, std::fabs(a[k] - b[k]));
      }
    return diff;
  };
  CHECK(run(false, true, DepthBranch::none) == 0.0);
  CHECK(run(true, false, DepthBranch::none) == 0.0);
  CHECK(run(true, false, DepthBranch::depth_conv) > 1e-6);
  CHECK(run(true, false, DepthBranch::depth_mlp) > 1e-6);
}

TEST_CASE("encoder gradients match finite differences") {
  EncoderConfig e = tiny_encoder(true, DepthBranch::depth_conv);
  e.blocks = 1;
  e.embed_dim = 8;
  e.depth = 2;
  Rng rng(41);
  ImageEncoder enc(e, rng);
  randomize(enc, rng, 0.4);
  Tensor img = random_tensor({1, 1, 2, 8, 8}, rng);
  std::vector<Tensor> probes{img};
  for (auto& [n, t] : enc.named_parameters()) probes.push_back(t);
  std::vector<ProbeSite> sites;
  for (std::size_t t = 0; t < probes.size(); ++t)
    for (std::size_t k = 0; k < std::min<std::size_t>(3, probes[t].numel()); ++k)
      sites.push_back({t, (k * 7919) % probes[t].numel()});
  auto rep = grad_check(
      [&] {
        EncoderOutput o = enc.forward(img);
        Tensor s = weighted_sum(o.embedding);
        for (std::size_t i = 0; i + 1 < o.taps.size(); ++i) s = add(s, weighted_sum(o.taps[i], 7 + i));
        return s;
      },
      probes, 1e-5, 1e-4, sites);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("tokens and grids convert losslessly") {
  Rng rng(6);
  Tensor t = random_tensor({1, 3, 6, 4}, rng);
  Tensor g = tokens_to_grid(t, GridHW{2, 3});
  CHECK(g.shape() == Shape{1, 4, 3, 2, 3});
  CHECK(bit_equal(grid_to_tokens(g), t));
}
