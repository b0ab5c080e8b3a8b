#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "doctest.h"
#include "maskseg/cli.hpp"
#include "maskseg/config.hpp"
#include "maskseg/grad_check.hpp"
#include "maskseg/losses.hpp"
#include "test_util.hpp"

using namespace maskseg;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(Ablation a) {
  ModelConfig c;
  c.embed_dim = 8;
  c.encoder_heads = 2;
  c.decoder_heads = 2;
  c.encoder_blocks = 2;
  c.tap_period = 1;
  c.decoder_mlp_dim = 8;
  c.decoder_rounds = 1;
  c.prompts = 4;
  c.classes = 2;
  c.depth = 2;
  c.height = c.width = 8;
  apply_ablation(c, a);
  return c;
}

/// Parameter names with block indices collapsed, so sets compare by role.
std::set<std::string> roles(const Module& m) {
  static const std::regex idx("/[0-9]+/");
  std::set<std::string> s;
  for (auto& [n, t] : m.named_parameters()) s.insert(std::regex_replace(n, idx, "/#/"));
  return s;
}

bool any_with(const std::set<std::string>& s, const std::string& part) {
  return std::any_of(s.begin(), s.end(), [&](const std::string& n) { return n.find(part) != std::string::npos; });
}

std::set<std::string> minus(const std::set<std::string>& a, const std::set<std::string>& b) {
  std::set<std::string> out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
  return out;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "maskseg");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("maskseg_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("ablation presets differ in parameter names as their rows describe") {
  std::vector<std::set<std::string>> n;
  for (int i = 0; i < 9; ++i) n.push_back(roles(MaskSegModel(small_model(static_cast<Ablation>(i)))));
  const auto& B1 = n[0];
  const auto& B2 = n[1];
  const auto& B3 = n[2];
  const auto& B4 = n[3];
  const auto& B5 = n[4];

  // B1: mask prompts only
  CHECK_FALSE(any_with(B1, "prompt_generator/box_head"));
  CHECK(any_with(B1, "prompt_generator/mask_out"));
  CHECK(any_with(B1, "prompt_encoder/mask_proj"));
  // B2: boxes only, no mask-prompt path
  CHECK(any_with(B2, "prompt_generator/box_head"));
  CHECK_FALSE(any_with(B2, "prompt_generator/mask_out"));
  CHECK_FALSE(any_with(B2, "prompt_encoder/mask_proj"));
  CHECK_FALSE(any_with(B2, "prompt_encoder/mask_downscale"));
  CHECK(any_with(B2, "prompt_encoder/no_mask_embed"));
  // B3 and B4 differ only in how boxes are fused, not in parameters
  CHECK(B3 == B4);
  CHECK(any_with(B3, "box_head"));
  CHECK(any_with(B3, "mask_out"));
  // B5 adds depth position embeddings and nothing else
  CHECK(minus(B5, B4) == std::set<std::string>{"decoder/depth_embed", "encoder/depth_embed"});
  CHECK(minus(B4, B5).empty());
  for (int i = 0; i < 5; ++i) {
    CHECK_FALSE(any_with(n[i], "dmlp_"));
    CHECK_FALSE(any_with(n[i], "dconv_"));
  }
  // B6, B7, B8: depth MLP after up, before down, in the middle
  const char* where[3] = {"dmlp_post_up", "dmlp_pre_down", "dmlp_mid"};
  for (int k = 0; k < 3; ++k) {
    const auto& s = n[5 + k];
    CAPTURE(k);
    CHECK(any_with(s, "encoder/blocks/#/attn_adapter/" + std::string(where[k])));
    CHECK(any_with(s, "decoder/blocks/#/self_adapter/" + std::string(where[k])));
    CHECK(any_with(s, "decoder/blocks/#/image_adapter/" + std::string(where[k])));
    for (int j = 0; j < 3; ++j)
      if (j != k) CHECK_FALSE(any_with(s, where[j]));
    CHECK_FALSE(any_with(s, "dconv_"));
    for (const auto& name : minus(s, B5)) CHECK(name.find(where[k]) != std::string::npos);
  }
  // B9: depth conv on image-grid adapters, depth MLP on token adapters
  const auto& B9 = n[8];
  CHECK(any_with(B9, "encoder/blocks/#/attn_adapter/dconv_mid"));
  CHECK(any_with(B9, "encoder/blocks/#/mlp_adapter/dconv_mid"));
  CHECK(any_with(B9, "decoder/blocks/#/image_adapter/dconv_mid"));
  CHECK(any_with(B9, "decoder/blocks/#/self_adapter/dmlp_mid"));
  CHECK(any_with(B9, "decoder/blocks/#/cross_adapter/dmlp_mid"));
  CHECK_FALSE(any_with(B9, "encoder/blocks/#/attn_adapter/dmlp"));
  CHECK_FALSE(any_with(B9, "decoder/blocks/#/image_adapter/dmlp"));
  for (int i = 0; i < 9; ++i)
    for (int j = i + 1; j < 9; ++j)
      if (!(i == 2 && j == 3)) CHECK(n[i] != n[j]);
}

TEST_CASE("ablation names") {
  CHECK(parse_ablation("B9") == Ablation::B9);
  CHECK(parse_ablation("B3") == Ablation::B3);
  CHECK(to_string(Ablation::B6) == "B6");
  CHECK_THROWS_AS(parse_ablation("B10"), std::invalid_argument);
}

TEST_CASE("end-to-end model and loss gradients match finite differences") {
  ModelConfig c = small_model(Ablation::B9);
  c.encoder_blocks = 1;
  MaskSegModel m(c);
  Rng rng(5);
  testing::randomize(m, rng, 0.3);
  for (Adapter* a : m.adapters()) {
    // keep adapters active so their gradients are exercised
    for (auto& [n, t] : a->up.named_parameters())
      for (auto& v : Tensor(t).data()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  }
  Volume lab(1, 2, 8, 8);
  for (std::size_t y = 1; y < 5; ++y)
    for (std::size_t x = 2; x < 6; ++x) lab.at(0, 1, y, x) = 1;
  for (std::size_t y = 5; y < 8; ++y) lab.at(0, 0, y, 0) = 2;
  SegmentSet gt = dataset_map(lab, 2);
  Tensor img = testing::random_tensor({1, 1, 2, 8, 8}, rng);
  MatchingResult match;
  {
    NoGradGuard ng;
    ModelOutput o = m.forward(img);
    match = hungarian(match_cost(gt, o.decoded, o.bundle, LossWeights{}));
  }
  std::vector<Tensor> probes{img};
  for (auto& [n, t] : m.named_parameters()) probes.push_back(t);
  std::vector<ProbeSite> sites;
  for (std::size_t t = 0; t < probes.size(); ++t)
    for (std::size_t k = 0; k < std::min<std::size_t>(4, probes[t].numel()); ++k)
      sites.push_back({t, (k * 7919 + 5) % probes[t].numel()});
  auto rep = grad_check(
      [&] {
        ModelOutput o = m.forward(img);
        return total_loss(gt, o.decoded, o.bundle, match, LossWeights{}).total;
      },
      // loss is O(10) while many gradients are O(1e-6); smaller steps drown in roundoff
      probes, 1e-4, 1e-4, sites);
  CHECK(rep.finite);
  MESSAGE("max rel error ", rep.max_rel_error, " over ", sites.size(), " sites");
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("config layering: defaults, preset, file, flags") {
  RunConfig c;
  CHECK(c.get("train.lr") == "0.01");
  c.resolve({{"ablation", "B2"}, {"train.epochs", "3"}}, {{"train.epochs", "5"}});
  CHECK(c.get("prompt_variant") == "box");
  CHECK(c.get_size("train.epochs") == 5);
  // file overrides the preset
  c.resolve({{"ablation", "B2"}, {"prompt_variant", "mask"}}, {});
  CHECK(c.get("prompt_variant") == "mask");
  // ablation given as a flag still sits below the file
  c.resolve({{"model.depth_pos_embed", "false"}}, {{"ablation", "B9"}});
  CHECK_FALSE(c.get_bool("model.depth_pos_embed"));
  CHECK(c.get("adapter.encoder_kind") == "depth_conv");
  CHECK_THROWS_AS(c.resolve({{"train.learning_rate", "1"}}, {}), std::invalid_argument);
  CHECK_THROWS_AS(c.set("nope", "1"), std::invalid_argument);
}

TEST_CASE("config values are validated when used") {
  RunConfig c;
  c.set("train.lr", "fast");
  CHECK_THROWS_AS(c.train(), std::invalid_argument);
  RunConfig d;
  CHECK_THROWS_AS(d.model(), std::invalid_argument);  // classes still unset
  d.set("data.classes", "2");
  d.set("data.modalities", "1");
  d.set("model.prompts", "4");
  d.set("patch", "2x8x8");
  ModelConfig m = d.model();
  CHECK(m.depth == 2);
  CHECK(m.height == 8);
  CHECK(m.prompts == 4);
}

TEST_CASE("config files round trip") {
  TempDir tmp("cfg");
  RunConfig c;
  c.resolve({}, {{"ablation", "B6"}, {"train.iters", "7"}});
  c.write(tmp.path / "config.txt");
  RunConfig d;
  d.resolve(read_config_file(tmp.path / "config.txt"), {});
  CHECK(c.values() == d.values());
  CHECK(parse_assignment("a.b = 3") == std::make_pair(std::string("a.b"), std::string("3")));
  CHECK_THROWS_AS(parse_assignment("novalue"), std::invalid_argument);
}

TEST_CASE("extents and axes parsing") {
  CHECK(parse_extents("4x16x32") == std::array<std::size_t, 3>{4, 16, 32});
  CHECK_THROWS_AS(parse_extents("4x16"), std::invalid_argument);
  CHECK_THROWS_AS(parse_extents("4x16x32x"), std::invalid_argument);
  CHECK(parse_axes("dw") == std::vector<Axis>{Axis::depth, Axis::width});
  CHECK(parse_axes("none").empty());
  CHECK_THROWS_AS(parse_axes("q"), std::invalid_argument);
}

TEST_CASE("cli help lists the configuration keys") {
  CliResult r = cli({"train", "--help"});
  CHECK(r.code == kExitOk);
  for (const auto& k : RunConfig::keys()) CHECK(r.out.find(k.name) != std::string::npos);
}

TEST_CASE("cli usage errors") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train"}).code == kExitUsage);
  TempDir tmp("usage");
  CHECK(cli({"synth", "--out", tmp.path.string(), "--classes", "0"}).code == kExitUsage);
  CHECK(cli({"synth", "--out", tmp.path.string(), "--extents", "4x4"}).code == kExitUsage);
  CHECK(cli({"train", "--data", tmp.path.string(), "--out", (tmp.path / "o").string(), "--set", "bogus=1"}).code ==
        kExitUsage);
}

TEST_CASE("cli data errors") {
  TempDir tmp("data");
  CHECK(cli({"train", "--data", (tmp.path / "missing").string(), "--out", (tmp.path / "o").string()}).code ==
        kExitData);
  CHECK(cli({"eval", "--pred", (tmp.path / "missing").string(), "--gt", tmp.path.string()}).code == kExitData);
}

TEST_CASE("synth is deterministic and eval of ground truth against itself is perfect") {
  TempDir a("synth_a"), b("synth_b");
  const std::vector<std::string> common{"--volumes", "3", "--extents", "4x12x12", "--classes", "2", "--seed", "11"};
  auto args = [&](const fs::path& p) {
    std::vector<std::string> v{"synth", "--out", p.string()};
    v.insert(v.end(), common.begin(), common.end());
    return v;
  };
  CliResult ra = cli(args(a.path)), rb = cli(args(b.path));
  REQUIRE(ra.code == kExitOk);
  REQUIRE(rb.code == kExitOk);
  CHECK(ra.out.find("recommended prompts") != std::string::npos);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    ++files;
    CHECK(slurp(e.path()) == slurp(b.path / fs::relative(e.path(), a.path)));
  }
  CHECK(files >= 7);

  CliResult ev = cli({"eval", "--pred", (a.path / "labels").string(), "--gt", a.path.string()});
  REQUIRE(ev.code == kExitOk);
  CHECK(ev.out.find("class 1 dice 1.000000") != std::string::npos);
  CHECK(ev.out.find("class 2 dice 1.000000") != std::string::npos);
  CHECK(ev.out.find("mean dice 1.000000") != std::string::npos);

  TempDir c("synth_c");
  const std::vector<std::string> other{"synth", "--out", c.path.string(), "--volumes", "3", "--extents", "4x8x8",
                                       "--classes", "2"};
  REQUIRE(cli(other).code == kExitOk);
  CHECK(cli({"eval", "--pred", (c.path / "labels").string(), "--gt", a.path.string()}).code == kExitData);
}

TEST_CASE("train and infer reject mismatched inputs") {
  TempDir d("mismatch");
  REQUIRE(cli({"synth", "--out", (d.path / "data").string(), "--volumes", "1", "--extents", "2x8x8", "--classes", "2"})
              .code == kExitOk);
  // a model with too few prompt slots for the data
  CliResult r = cli({"train", "--data", (d.path / "data").string(), "--out", (d.path / "run").string(), "--set",
                     "model.prompts=1", "--set", "train.epochs=1", "--set", "train.iters=1"});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("model.prompts") != std::string::npos);

  REQUIRE(cli({"train", "--data", (d.path / "data").string(), "--out", (d.path / "run").string(), "--set",
               "train.epochs=1", "--set", "train.iters=1", "--set", "model.embed_dim=8", "--set",
               "model.encoder_blocks=2", "--set", "model.decoder_rounds=1"})
              .code == kExitOk);
  REQUIRE(cli({"synth", "--out", (d.path / "three").string(), "--volumes", "1", "--extents", "2x8x8", "--classes",
               "3"})
              .code == kExitOk);
  CHECK(cli({"infer", "--data", (d.path / "three").string(), "--ckpt", (d.path / "run" / "model.ckpt").string(),
             "--out", (d.path / "pred").string()})
            .code == kExitData);
  CHECK(cli({"infer", "--data", (d.path / "data").string(), "--ckpt", (d.path / "run" / "model.ckpt").string(),
             "--out", (d.path / "pred").string(), "--set", "train.lr=1"})
            .code == kExitUsage);
  CHECK(cli({"infer", "--data", (d.path / "data").string(), "--ckpt", (d.path / "run" / "model.ckpt").string(),
             "--out", (d.path / "pred").string()})
            .code == kExitOk);
}
