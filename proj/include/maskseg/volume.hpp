#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace maskseg {

/// Dense (channels, depth, height, width) array of samples.
struct Volume {
  std::size_t channels = 1, depth = 1, height = 1, width = 1;
  std::vector<double> data;

  Volume() : data(1, 0.0) {}
  Volume(std::size_t c, std::size_t d, std::size_t h, std::size_t w, double fill = 0.0);

  std::size_t spatial_size() const { return depth * height * width; }
  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return ((c * depth + z) * height + y) * width + x;
  }
  double& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) { return data[index(c, z, y, x)]; }
  double at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const { return data[index(c, z, y, x)]; }
  bool same_spatial(const Volume& o) const { return depth == o.depth && height == o.height && width == o.width; }
  /// One channel as its own single-channel volume.
  Volume channel(std::size_t c) const;

  bool operator==(const Volume&) const = default;
};

/// Rejected input data (bad labels, unreadable files, inconsistent extents).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyMaskError : public std::domain_error {
 public:
  EmptyMaskError() : std::domain_error("empty mask") {}
};

// Raw Volume Format: "MSKV0001", u32 C, D, H, W (little-endian), dtype byte,
// then C*D*H*W samples in row-major order.
enum class SampleType : std::uint8_t { float32 = 0, uint8 = 1 };

void write_rvf(const std::filesystem::path& path, const Volume& v, SampleType type);
Volume read_rvf(const std::filesystem::path& path, SampleType* type = nullptr);

/// Normalized (x_min, y_min, x_max, y_max) over the H x W plane, half-open on the max side.
struct Box {
  double x_min = 0, y_min = 0, x_max = 1, y_max = 1;
  bool operator==(const Box&) const = default;
};

struct GroundTruthSegment {
  int class_id = 0;
  Volume mask;  // single-channel {0, 1}
  Box box;
};

struct SegmentSet {
  std::vector<GroundTruthSegment> segments;
  std::size_t depth = 1, height = 1, width = 1;
};

/// Tight box of voxels with value > threshold after projecting over depth.
std::optional<Box> box_of(std::span<const double> values, std::size_t depth, std::size_t height, std::size_t width,
                          double threshold = 0.5);
/// Throws EmptyMaskError when the mask has no foreground.
Box box_from_mask(const Volume& mask);

/// Splits a label volume into one binary segment per present class.
SegmentSet dataset_map(const Volume& labels, int num_classes);
/// Paints segment class ids back into a label volume.
Volume assemble_from_segments(const SegmentSet& set);

enum class Axis { depth, height, width };

Volume flip(const Volume& v, Axis axis);

/// Flips every listed axis with probability 0.5, identically for image and labels.
std::pair<Volume, Volume> mirror_augment(const Volume& image, const Volume& labels, std::span<const Axis> axes,
                                         std::mt19937_64& rng);
/// Deterministic form: flips exactly the axes given.
std::pair<Volume, Volume> mirror(const Volume& image, const Volume& labels, std::span<const Axis> axes);

struct SynthConfig {
  std::size_t volumes = 8;
  std::size_t depth = 8, height = 32, width = 32;
  int classes = 3;
  std::size_t modalities = 1;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double noise = 0.05;
  std::uint64_t seed = 7;
};

struct Sample {
  Volume image;
  Volume labels;
};

/// Non-overlapping boxes and ellipsoids with per-class intensity means.
std::vector<Sample> synth_dataset(const SynthConfig& cfg);

}  // namespace maskseg
