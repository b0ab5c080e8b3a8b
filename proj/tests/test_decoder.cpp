#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "maskseg/decoder.hpp"
#include "maskseg/grad_check.hpp"
#include "maskseg/ops.hpp"
#include "test_util.hpp"

using namespace maskseg;
using maskseg::testing::bit_equal;
using maskseg::testing::max_abs_diff;
using maskseg::testing::random_tensor;
using maskseg::testing::randomize;
using maskseg::testing::weighted_sum;

namespace {

DecoderConfig toy(bool adapters = true, bool masks = true) {
  DecoderConfig c;
  c.embed_dim = 32;
  c.heads = 4;
  c.rounds = 2;
  c.mlp_dim = 64;
  c.classes = 3;
  c.patch = 4;
  c.depth = 4;
  c.height = 16;
  c.width = 16;
  c.mask_prompts = masks;
  c.adapters = adapters;
  c.token_adapter.kind = DepthBranch::depth_mlp;
  c.image_adapter.kind = DepthBranch::depth_conv;
  return c;
}

DecoderConfig small(bool adapters = true) {
  DecoderConfig c = toy(adapters);
  c.embed_dim = 8;
  c.heads = 2;
  c.rounds = 1;
  c.mlp_dim = 8;
  c.classes = 2;
  c.depth = 2;
  c.height = 8;
  c.width = 8;
  return c;
}

struct Inputs {
  Tensor image, boxes, masks, cls;
};

Inputs random_inputs(const DecoderConfig& c, std::size_t n, Rng& rng) {
  Inputs in;
  in.image = random_tensor({1, c.embed_dim, c.depth, c.grid_h(), c.grid_w()}, rng);
  in.boxes = random_tensor({n, 4}, rng, 0.0, 1.0);
  in.masks = random_tensor({n, c.depth, c.height, c.width}, rng, -3.0, 3.0);
  in.cls = random_tensor({n, c.embed_dim}, rng);
  return in;
}

struct Net {
  PromptEncoder pe;
  MaskDecoder dec;
  Net(const DecoderConfig& c, Rng& rng) : pe(c, rng), dec(c, rng) {}
  DecoderOutput run(const Inputs& in) const {
    SparseDense sd = pe.forward(in.boxes, dec.config().mask_prompts ? std::optional<Tensor>(in.masks) : std::nullopt);
    return dec.forward(in.image, sd, in.cls, pe.pe());
  }
};

/// Zeroes the last layer of every depth branch so adapters act per slice.
void zero_depth_branches(const Module& m) {
  for (auto& [n, t] : m.named_parameters())
    if ((n.find("fc2/weight") != std::string::npos && n.find("dmlp_") != std::string::npos) ||
        n.find("dconv_") != std::string::npos || n.find("depth_embed") != std::string::npos)
      for (auto& v : Tensor(t).data()) v = 0.0;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t row = t.numel() / t.size(0);
  std::vector<double> out;
  for (std::size_t p : perm) out.insert(out.end(), t.data().begin() + p * row, t.data().begin() + (p + 1) * row);
  return Tensor::from(t.shape(), std::move(out));
}

}  // namespace

TEST_CASE("prompt encoder shapes") {
  Rng rng(1);
  DecoderConfig c = toy();
  PromptEncoder pe(c, rng);
  Inputs in = random_inputs(c, 8, rng);
  SparseDense sd = pe.forward(in.boxes, in.masks);
  CHECK(sd.sparse.shape() == Shape{8, 2, 32});
  CHECK(sd.dense.shape() == Shape{8, 32, 4, 4, 4});
}

TEST_CASE("distinct boxes give distinct sparse tokens") {
  Rng rng(2);
  PromptEncoder pe(toy(), rng);
  SparseDense sd = pe.forward(Tensor::from({2, 4}, {0, 0, 1, 1, 0.5, 0.5, 1, 1}), Tensor::zeros({2, 4, 16, 16}));
  double diff = 0;
  for (std::size_t i = 0; i < 64; ++i) diff = std::max(diff, std::fabs(sd.sparse[i] - sd.sparse[64 + i]));
  CHECK(diff > 1e-3);
}

TEST_CASE("without mask prompts every slot shares the learned dense embedding") {
  Rng rng(3);
  DecoderConfig c = toy(true, false);
  PromptEncoder pe(c, rng);
  SparseDense sd = pe.forward(random_tensor({3, 4}, rng, 0, 1), std::nullopt);
  CHECK(sd.dense.shape() == Shape{3, 32, 4, 4, 4});
  const std::size_t per = sd.dense.numel() / 3;
  for (std::size_t i = 0; i < per; ++i) {
    CHECK(sd.dense[i] == sd.dense[per + i]);
    CHECK(sd.dense[i] == sd.dense[2 * per + i]);
  }
  CHECK(pe.mask_proj == nullptr);
}

TEST_CASE("decoder output shapes and class distributions") {
  Rng rng(4);
  DecoderConfig c = toy();
  Net net(c, rng);
  randomize(net.dec, rng, 0.3);
  DecoderOutput out = net.run(random_inputs(c, 8, rng));
  CHECK(out.mask_logits.shape() == Shape{8, 4, 16, 16});
  CHECK(out.class_logits.shape() == Shape{8, 4});
  Tensor p = softmax(out.class_logits, 1);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += p[i * 4 + k];
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("permuting prompt slots permutes the outputs exactly") {
  Rng rng(5);
  DecoderConfig c = toy();
  Net net(c, rng);
  randomize(net.dec, rng, 0.3);
  randomize(net.pe, rng, 0.3);
  Inputs in = random_inputs(c, 5, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Inputs pin = in;
  pin.boxes = gather_rows(in.boxes, perm);
  pin.masks = gather_rows(in.masks, perm);
  pin.cls = gather_rows(in.cls, perm);
  DecoderOutput a = net.run(in), b = net.run(pin);
  CHECK(bit_equal(gather_rows(a.mask_logits, perm), b.mask_logits));
  CHECK(bit_equal(gather_rows(a.class_logits, perm), b.class_logits));
}

TEST_CASE("zeroed decoder adapters reproduce the adapter-free decoder bit for bit") {
  Rng rng(6);
  DecoderConfig c = toy();
  Net with(c, rng);
  randomize(with.dec, rng, 0.3);
  randomize(with.pe, rng, 0.3);
  for (Adapter* a : with.dec.adapters()) a->up.zero();
  Rng rng2(7);
  Net without(toy(false), rng2);
  without.dec.load_state(with.dec.named_parameters());
  without.pe.load_state(with.pe.named_parameters());
  Inputs in = random_inputs(c, 4, rng);
  DecoderOutput a = with.run(in), b = without.run(in);
  CHECK(bit_equal(a.mask_logits, b.mask_logits));
  CHECK(bit_equal(a.class_logits, b.class_logits));
  CHECK(with.dec.adapters().size() == 8);
  CHECK(without.dec.adapters().empty());
}

TEST_CASE("with depth branches and depth embeddings zeroed each slice decodes like a 2-D model") {
  auto slice_change = [](bool zero) {
    Rng rng(8);
    DecoderConfig c = toy();
    c.depth = 3;
    Net net(c, rng);
    randomize(net.dec, rng, 0.3);
    randomize(net.pe, rng, 0.3);
    if (zero) zero_depth_branches(net.dec);
    Inputs in = random_inputs(c, 2, rng);
    Inputs in2 = in;
    in2.image = in.image.clone();
    // perturb depth slice 0 of the image embedding
    for (std::size_t e = 0; e < c.embed_dim; ++e)
      for (std::size_t i = 0; i < 16; ++i) in2.image.data()[e * 3 * 16 + i] += 0.5;
    Tensor a = net.run(in).mask_logits, b = net.run(in2).mask_logits;
    double diff = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 256; ++i) {
        const std::size_t k = (n * 3 + 2) * 256 + i;
        diff = std::max(diff, std::fabs(a[k] - b[k]));
      }
    return diff;
  };
  CHECK(slice_change(true) == 0.0);
  CHECK(slice_change(false) > 1e-9);
}

TEST_CASE("depth positional embedding changes the decoder output") {
  Rng rng(9);
  DecoderConfig c = toy(false);
  Net net(c, rng);
  randomize(net.dec, rng, 0.3);
  Inputs in = random_inputs(c, 2, rng);
  for (auto& v : net.dec.depth_embed.data()) v = 0.0;
  DecoderOutput a = net.run(in);
  Rng r2(10);
  for (auto& v : net.dec.depth_embed.data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(r2);
  DecoderOutput b = net.run(in);
  CHECK(max_abs_diff(a.mask_logits, b.mask_logits) > 1e-9);
}

TEST_CASE("end-to-end decoder gradients match finite differences") {
  Rng rng(11);
  DecoderConfig c = small();
  Net net(c, rng);
  randomize(net.dec, rng, 0.4);
  randomize(net.pe, rng, 0.4);
  Inputs in = random_inputs(c, 2, rng);
  std::vector<Tensor> probes{in.image, in.boxes, in.masks, in.cls};
  for (auto& [n, t] : net.dec.named_parameters()) probes.push_back(t);
  for (auto& [n, t] : net.pe.named_parameters()) probes.push_back(t);
  std::vector<ProbeSite> sites;
  for (std::size_t t = 0; t < probes.size(); ++t)
    for (std::size_t k = 0; k < std::min<std::size_t>(3, probes[t].numel()); ++k)
      sites.push_back({t, (k * 104729 + 13) % probes[t].numel()});
  auto rep = grad_check(
      [&] {
        DecoderOutput o = net.run(in);
        return add(weighted_sum(o.mask_logits, 1), weighted_sum(o.class_logits, 2));
      },
      probes, 1e-5, 1e-4, sites);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("position encoding is fixed across instances") {
  PositionEncoding a(16), b(16);
  Tensor c = Tensor::from({1, 2}, {0.25, 0.75});
  CHECK(bit_equal(a.encode(c), b.encode(c)));
  CHECK(a.grid(2, 3).shape() == Shape{6, 16});
}

TEST_CASE("token adapters reject a depth conv") {
  DecoderConfig c = toy();
  c.token_adapter.kind = DepthBranch::depth_conv;
  Rng rng(1);
  CHECK_THROWS_AS(MaskDecoder(c, rng), std::invalid_argument);
}
