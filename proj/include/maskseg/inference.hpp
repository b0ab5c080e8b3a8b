#pragma once

#include <array>
#include <functional>
#include <vector>

#include "maskseg/model.hpp"
#include "maskseg/volume.hpp"

namespace maskseg {

enum class AssemblyMode { product, threshold };
AssemblyMode parse_assembly_mode(const std::string& s);

struct InferConfig {
  std::size_t depth = 4, height = 16, width = 16;  // patch extents
  std::vector<Axis> flip_axes{Axis::depth, Axis::height, Axis::width};
  AssemblyMode mode = AssemblyMode::product;
  double threshold = 0.5;
  std::size_t threads = 1;
};

/// Maps an image patch to per-class probabilities (K + 1 channels, channel 0 background).
using PatchPredictor = std::function<Volume(const Volume& patch)>;

/// class_logits (N, K+1) with the no-object column last; mask_logits (N, D, H, W).
Volume semantic_assembly(const Tensor& class_logits, const Tensor& mask_logits,
                         AssemblyMode mode = AssemblyMode::product, double threshold = 0.5);

/// Start offsets of half-overlapping tiles along one axis; the last tile touches the border.
std::vector<std::size_t> tile_starts(std::size_t extent, std::size_t patch);

/// Centre-weighted accumulation map, sigma = extent / 8 per axis.
std::vector<double> gaussian_weights(std::size_t d, std::size_t h, std::size_t w);

Volume sliding_window_infer(const PatchPredictor& predict, const Volume& image, const InferConfig& cfg);

PatchPredictor model_predictor(const MaskSegModel& model, AssemblyMode mode, double threshold);

/// Per-voxel argmax over channels (lowest channel wins ties).
Volume argmax_labels(const Volume& probs);

struct DiceReport {
  std::vector<double> per_class;  // index c-1 for class c; NaN when absent from both
  double mean = 0.0;              // over classes present in either volume
};

DiceReport dice_score(const Volume& pred, const Volume& gt, int classes);

/// Caps worker threads by MASKSEG_THREADS when set.
std::size_t worker_threads(std::size_t requested);

}  // namespace maskseg
