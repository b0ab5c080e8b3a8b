#include "maskseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "maskseg/volume.hpp"

namespace maskseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& RunConfig::keys() {
  static const std::vector<ConfigKey> k = {
      {"seed", "1", "seed for initialization, sampling and augmentation"},
      {"ablation", "", "preset row B1..B9 (expands into prompt/adapter keys)"},
      {"prompt_variant", "mask_avg_box", "mask | box | mask_box | mask_avg_box"},
      {"data.classes", "0", "foreground classes K (0: from the dataset)"},
      {"data.modalities", "0", "input modalities M (0: from the dataset)"},
      {"patch", "auto", "patch extents DxHxW (auto: first training volume, H/W rounded up)"},
      {"model.embed_dim", "32", "token width E"},
      {"model.patch", "4", "patch size on H and W"},
      {"model.encoder_blocks", "4", "encoder attention blocks"},
      {"model.encoder_heads", "4", "encoder attention heads"},
      {"model.tap_period", "2", "blocks between feature taps"},
      {"model.decoder_rounds", "2", "two-way decoder rounds"},
      {"model.decoder_heads", "4", "decoder attention heads"},
      {"model.decoder_mlp_dim", "64", "decoder token MLP width"},
      {"model.prompts", "0", "prompt slots N (0: max(10, 2 x max segments))"},
      {"model.adapters", "true", "insert adapters"},
      {"model.depth_pos_embed", "true", "learnable depth positional embeddings"},
      {"adapter.encoder_kind", "depth_conv", "none | depth_mlp | depth_conv"},
      {"adapter.encoder_position", "middle", "middle | after_up | before_down"},
      {"adapter.token_kind", "depth_mlp", "decoder token-side adapters: none | depth_mlp"},
      {"adapter.token_position", "middle", "middle | after_up | before_down"},
      {"adapter.image_kind", "depth_conv", "decoder image-side adapters: none | depth_mlp | depth_conv"},
      {"adapter.image_position", "middle", "middle | after_up | before_down"},
      {"adapter.bottleneck", "0.25", "bottleneck ratio"},
      {"adapter.depth_expansion", "2", "depth-MLP expansion ratio"},
      {"adapter.scale", "0.5", "residual scale s"},
      {"train.lr", "0.01", "initial learning rate"},
      {"train.epochs", "20", "epochs (poly decay horizon)"},
      {"train.iters", "50", "iterations per epoch"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.weight_decay", "3e-5", "weight decay"},
      {"train.batch", "1", "patches per step"},
      {"train.clip_norm", "5", "global gradient-norm cap (0 disables)"},
      {"train.mirror", "dhw", "mirroring axes (subset of dhw, or none)"},
      {"train.freeze", "", "comma-separated name prefixes to freeze; 'sam' freezes original SAM parts"},
      {"loss.cls", "1", "class term weight"},
      {"loss.bce_aux", "5", "auxiliary mask BCE weight"},
      {"loss.dice_aux", "5", "auxiliary mask Dice weight"},
      {"loss.l1", "5", "box L1 weight"},
      {"loss.giou", "2", "box GIoU weight"},
      {"loss.bce_final", "5", "final mask BCE weight"},
      {"loss.dice_final", "5", "final mask Dice weight"},
      {"loss.noobj", "0.1", "no-object class weight"},
      {"loss.cost_stride", "4", "H/W subsampling of masks in the matching cost"},
      {"infer.flips", "dhw", "flip-ensemble axes (subset of dhw, or none)"},
      {"infer.assembly", "product", "product | threshold"},
      {"infer.threshold", "0.5", "mask threshold for threshold assembly"},
      {"infer.threads", "1", "tile workers (capped by MASKSEG_THREADS)"},
  };
  return k;
}

std::string RunConfig::describe() {
  std::ostringstream os;
  os << "Config keys (key = default):\n";
  for (const auto& k : keys()) os << "  " << k.name << " = " << k.default_value << "    # " << k.help << "\n";
  return os.str();
}

RunConfig::RunConfig() {
  for (const auto& k : keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return it->second;
}

void RunConfig::resolve(const ConfigPairs& file, const ConfigPairs& flags) {
  RunConfig probe;
  for (const auto& [k, v] : file) probe.set(k, v);
  for (const auto& [k, v] : flags) probe.set(k, v);
  *this = RunConfig();
  const std::string& abl = probe.get("ablation");
  if (!abl.empty())
    for (const auto& [k, v] : ablation_preset(parse_ablation(abl))) set(k, v);
  for (const auto& [k, v] : file) set(k, v);
  for (const auto& [k, v] : flags) set(k, v);
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config " + key + ": expected a number, got '" + s + "'");
  }
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config " + key + ": expected a non-negative integer, got '" + s + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("config " + key + ": expected true/false, got '" + s + "'");
}

std::array<std::size_t, 3> parse_extents(const std::string& s) {
  std::array<std::size_t, 3> e{};
  std::istringstream is(s);
  char x1 = 0, x2 = 0;
  long long d = 0, h = 0, w = 0;
  std::string rest;
  if (!(is >> d >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x' || d < 1 || h < 1 || w < 1 || (is >> rest))
    throw std::invalid_argument("expected extents DxHxW, got '" + s + "'");
  e = {static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  return e;
}

std::vector<Axis> parse_axes(const std::string& s) {
  std::vector<Axis> out;
  if (s == "none" || s.empty()) return out;
  for (char c : s) {
    Axis a;
    if (c == 'd') a = Axis::depth;
    else if (c == 'h') a = Axis::height;
    else if (c == 'w') a = Axis::width;
    else throw std::invalid_argument("axes must be a subset of 'dhw', got '" + s + "'");
    if (std::find(out.begin(), out.end(), a) != out.end()) throw std::invalid_argument("repeated axis in '" + s + "'");
    out.push_back(a);
  }
  return out;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.seed = get_size("seed");
  m.modalities = get_size("data.modalities");
  m.classes = get_size("data.classes");
  if (m.modalities == 0 || m.classes == 0) throw std::invalid_argument("data.classes and data.modalities must be resolved");
  const auto ext = parse_extents(get("patch"));
  m.depth = ext[0];
  m.height = ext[1];
  m.width = ext[2];
  m.patch = get_size("model.patch");
  m.embed_dim = get_size("model.embed_dim");
  m.encoder_blocks = get_size("model.encoder_blocks");
  m.encoder_heads = get_size("model.encoder_heads");
  m.tap_period = get_size("model.tap_period");
  m.decoder_rounds = get_size("model.decoder_rounds");
  m.decoder_heads = get_size("model.decoder_heads");
  m.decoder_mlp_dim = get_size("model.decoder_mlp_dim");
  m.prompts = get_size("model.prompts");
  if (m.prompts == 0) throw std::invalid_argument("model.prompts must be resolved");
  m.variant = parse_prompt_variant(get("prompt_variant"));
  m.adapters = get_bool("model.adapters");
  m.depth_pos_embed = get_bool("model.depth_pos_embed");
  auto adapter = [&](const std::string& side) {
    AdapterConfig a;
    a.kind = parse_depth_branch(get("adapter." + side + "_kind"));
    a.position = parse_branch_position(get("adapter." + side + "_position"));
    a.bottleneck_ratio = get_double("adapter.bottleneck");
    a.depth_expansion = get_double("adapter.depth_expansion");
    a.scale = get_double("adapter.scale");
    if (a.kind == DepthBranch::none) a.position = BranchPosition::middle;
    return a;
  };
  m.encoder_adapter = adapter("encoder");
  m.token_adapter = adapter("token");
  m.image_adapter = adapter("image");
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.init_lr = get_double("train.lr");
  t.max_epoch = get_size("train.epochs");
  t.iters_per_epoch = get_size("train.iters");
  t.momentum = get_double("train.momentum");
  t.weight_decay = get_double("train.weight_decay");
  t.batch_size = get_size("train.batch");
  t.clip_norm = get_double("train.clip_norm");
  t.seed = get_size("seed");
  t.mirror_axes = parse_axes(get("train.mirror"));
  t.freeze.clear();
  std::istringstream is(get("train.freeze"));
  for (std::string p; std::getline(is, p, ',');)
    if (!trim(p).empty()) t.freeze.push_back(trim(p));
  t.loss.cls = get_double("loss.cls");
  t.loss.bce_aux = get_double("loss.bce_aux");
  t.loss.dice_aux = get_double("loss.dice_aux");
  t.loss.l1 = get_double("loss.l1");
  t.loss.giou = get_double("loss.giou");
  t.loss.bce_final = get_double("loss.bce_final");
  t.loss.dice_final = get_double("loss.dice_final");
  t.loss.noobj = get_double("loss.noobj");
  t.cost_stride = get_size("loss.cost_stride");
  t.validate();
  return t;
}

InferConfig RunConfig::infer() const {
  InferConfig c;
  const auto ext = parse_extents(get("patch"));
  c.depth = ext[0];
  c.height = ext[1];
  c.width = ext[2];
  c.flip_axes = parse_axes(get("infer.flips"));
  c.mode = parse_assembly_mode(get("infer.assembly"));
  c.threshold = get_double("infer.threshold");
  c.threads = get_size("infer.threads");
  return c;
}

void RunConfig::write(const std::filesystem::path& file) const {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file.string());
  for (const auto& k : keys()) os << k.name << " = " << get(k.name) << "\n";
}

std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + s + "'");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

ConfigPairs read_config_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open config " + file.string());
  ConfigPairs out;
  for (std::string line; std::getline(is, line);) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    out.push_back(parse_assignment(line));
  }
  return out;
}

ConfigPairs ablation_preset(Ablation a) {
  ModelConfig m;
  apply_ablation(m, a);
  return {
      {"prompt_variant", to_string(m.variant)},
      {"model.adapters", m.adapters ? "true" : "false"},
      {"model.depth_pos_embed", m.depth_pos_embed ? "true" : "false"},
      {"adapter.encoder_kind", to_string(m.encoder_adapter.kind)},
      {"adapter.encoder_position", to_string(m.encoder_adapter.position)},
      {"adapter.token_kind", to_string(m.token_adapter.kind)},
      {"adapter.token_position", to_string(m.token_adapter.position)},
      {"adapter.image_kind", to_string(m.image_adapter.kind)},
      {"adapter.image_position", to_string(m.image_adapter.position)},
  };
}

}  // namespace maskseg
