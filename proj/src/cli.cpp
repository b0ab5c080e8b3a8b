#include "maskseg/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>

#include "maskseg/checkpoint.hpp"
#include "maskseg/config.hpp"
#include "maskseg/dataset.hpp"
#include "maskseg/inference.hpp"
#include "maskseg/losses.hpp"
#include "maskseg/train.hpp"

namespace fs = std::filesystem;

namespace maskseg {

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::size_t recommended_prompts(std::size_t max_segments) { return std::max<std::size_t>(10, 2 * max_segments); }

int cmd_synth(const fs::path& out_dir, std::size_t volumes, const std::string& extents, int classes,
              std::size_t modalities, std::uint64_t seed, std::ostream& out) {
  if (classes < 1) throw UsageError("--classes must be >= 1");
  if (volumes < 1) throw UsageError("--volumes must be >= 1");
  if (modalities < 1) throw UsageError("--modalities must be >= 1");
  const auto ext = parse_extents(extents);
  SynthConfig sc;
  sc.volumes = volumes;
  sc.depth = ext[0];
  sc.height = ext[1];
  sc.width = ext[2];
  sc.classes = classes;
  sc.modalities = modalities;
  sc.seed = seed;
  const auto samples = synth_dataset(sc);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  const DatasetMeta meta = write_dataset(out_dir, samples, classes);
  out << "volumes " << meta.ids.size() << " (train " << meta.train.size() << ", val " << meta.val.size() << ")\n"
      << "classes " << meta.classes << "\n"
      << "max segments per volume " << meta.max_segments << "\n"
      << "recommended prompts (model.prompts) " << recommended_prompts(meta.max_segments) << "\n";
  return kExitOk;
}

/// Fills data-dependent keys left at their "auto" values.
void resolve_data_keys(RunConfig& cfg, const Dataset& ds, const std::vector<Sample>& samples) {
  auto check = [&](const std::string& key, std::size_t actual) {
    const std::size_t v = cfg.get_size(key);
    if (v == 0) cfg.set(key, std::to_string(actual));
    else if (v != actual)
      throw DataError(key + " = " + std::to_string(v) + " but the dataset has " + std::to_string(actual));
  };
  check("data.classes", static_cast<std::size_t>(ds.meta.classes));
  check("data.modalities", ds.meta.modalities);
  if (cfg.get_size("model.prompts") == 0) cfg.set("model.prompts", std::to_string(recommended_prompts(ds.meta.max_segments)));
  if (cfg.get("patch") == "auto") {
    const Volume& v = samples.front().image;
    const std::size_t p = cfg.get_size("model.patch");
    if (p == 0) throw UsageError("model.patch must be >= 1");
    auto up = [p](std::size_t n) { return (n + p - 1) / p * p; };
    cfg.set("patch", std::to_string(v.depth) + "x" + std::to_string(up(v.height)) + "x" + std::to_string(up(v.width)));
  }
}

std::vector<Sample> load_split(const Dataset& ds, const std::string& split) {
  std::vector<Sample> out;
  for (const auto& id : ds.split(split)) out.push_back({ds.image(id), ds.labels(id)});
  return out;
}

int cmd_train(const fs::path& data, const std::string& config_file, const fs::path& out_dir, const std::string& ablation,
              const std::vector<std::string>& sets, const std::string& seed, std::ostream& out, std::ostream& err) {
  ConfigPairs file, flags;
  if (!config_file.empty()) file = read_config_file(config_file);
  if (!ablation.empty()) flags.emplace_back("ablation", ablation);
  if (!seed.empty()) flags.emplace_back("seed", seed);
  for (const auto& s : sets) flags.push_back(parse_assignment(s));
  RunConfig cfg;
  cfg.resolve(file, flags);

  const Dataset ds = open_dataset(data);
  std::vector<Sample> samples = load_split(ds, ds.meta.train.empty() ? "all" : "train");
  if (samples.empty()) throw DataError("dataset has no volumes");
  resolve_data_keys(cfg, ds, samples);

  const ModelConfig mc = cfg.model();
  const TrainConfig tc = cfg.train();
  if (ds.meta.max_segments > mc.prompts)
    throw DataError("model.prompts = " + std::to_string(mc.prompts) + " is smaller than the " +
                    std::to_string(ds.meta.max_segments) + " segments of the largest volume; set model.prompts >= " +
                    std::to_string(ds.meta.max_segments) + " (recommended " +
                    std::to_string(recommended_prompts(ds.meta.max_segments)) + ")");
  MaskSegModel model(mc);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  cfg.write(out_dir / "config.txt");
  std::ofstream log(out_dir / "metrics.log");
  if (!log) throw DataError("cannot write " + (out_dir / "metrics.log").string());
  out << "parameters " << model.parameter_count() << "\n";

  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    Tee(std::streambuf* x, std::streambuf* y) : a(x), b(y) {}
    int overflow(int c) override {
      if (c == EOF) return 0;
      a->sputc(static_cast<char>(c));
      b->sputc(static_cast<char>(c));
      return c;
    }
    int sync() override { return (a->pubsync() | b->pubsync()) == 0 ? 0 : -1; }
  } tee(log.rdbuf(), out.rdbuf());
  std::ostream both(&tee);
  train(model, samples, tc, &both, &err);
  save_checkpoint(out_dir / "model.ckpt", model.named_parameters());
  out << "wrote " << (out_dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_infer(const fs::path& data, const fs::path& ckpt, const fs::path& out_dir, const std::string& split,
              const std::vector<std::string>& sets, std::ostream& out) {
  const fs::path cfg_file = ckpt.parent_path() / "config.txt";
  ConfigPairs flags;
  for (const auto& s : sets) {
    flags.push_back(parse_assignment(s));
    if (flags.back().first.rfind("infer.", 0) != 0) throw UsageError("infer accepts only infer.* overrides");
  }
  RunConfig cfg;
  cfg.resolve(read_config_file(cfg_file), flags);
  const ModelConfig mc = cfg.model();
  const Dataset ds = open_dataset(data);
  if (static_cast<std::size_t>(ds.meta.classes) != mc.classes || ds.meta.modalities != mc.modalities)
    throw DataError("checkpoint expects " + std::to_string(mc.classes) + " classes and " +
                    std::to_string(mc.modalities) + " modalities; dataset has " + std::to_string(ds.meta.classes) +
                    " and " + std::to_string(ds.meta.modalities));
  MaskSegModel model(mc);
  try {
    model.load_state(load_checkpoint(ckpt));
  } catch (const std::runtime_error& e) {
    throw DataError(std::string("checkpoint incompatible with config: ") + e.what());
  }
  const InferConfig ic = cfg.infer();
  const PatchPredictor predict = model_predictor(model, ic.mode, ic.threshold);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  std::size_t n = 0;
  for (const auto& id : ds.split(split)) {
    const Volume img = ds.image(id);
    if (img.channels != mc.modalities) throw DataError(id + ": modality count differs from the checkpoint");
    const Volume labels = argmax_labels(sliding_window_infer(predict, img, ic));
    write_rvf(out_dir / (id + ".rvf"), labels, SampleType::uint8);
    ++n;
  }
  out << "wrote " << n << " label volumes to " << out_dir.string() << "\n";
  return kExitOk;
}

/// A directory of label RVFs, or a dataset root (uses its labels/).
fs::path label_dir(const fs::path& p) {
  if (fs::is_directory(p / "labels") && fs::exists(p / "meta.txt")) return p / "labels";
  if (!fs::is_directory(p)) throw DataError(p.string() + " is not a directory");
  return p;
}

int cmd_eval(const fs::path& pred, const fs::path& gt, int classes, std::ostream& out) {
  const fs::path pd = label_dir(pred), gd = label_dir(gt);
  if (classes == 0 && fs::exists(gt / "meta.txt")) classes = read_meta(gt / "meta.txt").classes;
  std::set<std::string> ids;
  for (const auto& e : fs::directory_iterator(pd))
    if (e.path().extension() == ".rvf") ids.insert(e.path().stem().string());
  if (ids.empty()) throw DataError("no .rvf files in " + pd.string());

  std::vector<std::pair<Volume, Volume>> pairs;
  double max_label = 0;
  for (const auto& id : ids) {
    const fs::path g = gd / (id + ".rvf");
    if (!fs::exists(g)) throw DataError("no ground truth for " + id);
    Volume p = read_rvf(pd / (id + ".rvf")), t = read_rvf(g);
    if (!p.same_spatial(t) || p.channels != 1 || t.channels != 1)
      throw DataError(id + ": prediction and ground truth differ in extent");
    for (double v : p.data) max_label = std::max(max_label, v);
    for (double v : t.data) max_label = std::max(max_label, v);
    pairs.emplace_back(std::move(p), std::move(t));
  }
  if (classes == 0) classes = std::max(1, static_cast<int>(max_label));

  // per-class mean over volumes where the class occurs in either volume
  std::vector<double> sum(classes, 0.0);
  std::vector<std::size_t> cnt(classes, 0);
  for (const auto& [p, t] : pairs) {
    const DiceReport r = dice_score(p, t, classes);
    for (int c = 0; c < classes; ++c)
      if (!std::isnan(r.per_class[c])) {
        sum[c] += r.per_class[c];
        ++cnt[c];
      }
  }
  double msum = 0;
  std::size_t mcnt = 0;
  out << std::fixed << std::setprecision(6);
  for (int c = 0; c < classes; ++c) {
    out << "class " << c + 1 << " dice ";
    if (cnt[c]) {
      const double d = sum[c] / static_cast<double>(cnt[c]);
      out << d << "\n";
      msum += d;
      ++mcnt;
    } else {
      out << "nan\n";
    }
  }
  out << "mean dice ";
  if (mcnt) out << msum / static_cast<double>(mcnt) << "\n";
  else out << "nan\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Volumetric semantic segmentation with an adapted promptable segmenter", "maskseg"};
  app.require_subcommand(1);
  app.footer(RunConfig::describe());

  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
  fs::path s_out;
  std::size_t s_volumes = 8, s_modalities = 1;
  std::string s_extents = "8x32x32";
  int s_classes = 3;
  std::uint64_t s_seed = 7;
  synth->add_option("--out", s_out, "output directory")->required();
  synth->add_option("--volumes", s_volumes, "number of volumes")->capture_default_str();
  synth->add_option("--extents", s_extents, "volume extents DxHxW")->capture_default_str();
  synth->add_option("--classes", s_classes, "foreground classes")->capture_default_str();
  synth->add_option("--modalities", s_modalities, "image channels")->capture_default_str();
  synth->add_option("--seed", s_seed, "generator seed")->capture_default_str();
  synth->footer(RunConfig::describe());

  auto* tr = app.add_subcommand("train", "Train a model and write model.ckpt, config.txt and metrics.log");
  fs::path t_data, t_out;
  std::string t_config, t_ablation, t_seed;
  std::vector<std::string> t_sets;
  tr->add_option("--data", t_data, "dataset directory")->required();
  tr->add_option("--out", t_out, "run directory")->required();
  tr->add_option("--config", t_config, "config file (key = value lines)");
  tr->add_option("--ablation", t_ablation, "preset B1..B9");
  tr->add_option("--seed", t_seed, "overrides the seed key");
  tr->add_option("--set", t_sets, "key=value override (repeatable)");
  tr->footer(RunConfig::describe());

  auto* inf = app.add_subcommand("infer", "Predict label volumes with a trained checkpoint");
  fs::path i_data, i_ckpt, i_out;
  std::string i_split = "all";
  std::vector<std::string> i_sets;
  inf->add_option("--data", i_data, "dataset directory")->required();
  inf->add_option("--ckpt", i_ckpt, "checkpoint (config.txt is read from its directory)")->required();
  inf->add_option("--out", i_out, "output directory for label RVFs")->required();
  inf->add_option("--split", i_split, "train | val | all")->capture_default_str();
  inf->add_option("--set", i_sets, "infer.* key=value override (repeatable)");
  inf->footer(RunConfig::describe());

  auto* ev = app.add_subcommand("eval", "Per-class and mean Dice between two label directories");
  fs::path e_pred, e_gt;
  int e_classes = 0;
  ev->add_option("--pred", e_pred, "predicted labels (directory of RVFs)")->required();
  ev->add_option("--gt", e_gt, "ground truth (dataset root or directory of RVFs)")->required();
  ev->add_option("--classes", e_classes, "classes to report (default: dataset meta or largest label)");
  ev->footer(RunConfig::describe());

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(s_out, s_volumes, s_extents, s_classes, s_modalities, s_seed, out);
    if (tr->parsed()) return cmd_train(t_data, t_config, t_out, t_ablation, t_sets, t_seed, out, err);
    if (inf->parsed()) {
      if (i_split != "train" && i_split != "val" && i_split != "all") throw UsageError("--split must be train, val or all");
      return cmd_infer(i_data, i_ckpt, i_out, i_split, i_sets, out);
    }
    if (ev->parsed()) {
      if (e_classes < 0) throw UsageError("--classes must be >= 0");
      return cmd_eval(e_pred, e_gt, e_classes, out);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const EmptyMaskError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace maskseg
