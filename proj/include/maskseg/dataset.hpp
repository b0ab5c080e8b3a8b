#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "maskseg/volume.hpp"

namespace maskseg {

// meta.txt: "key: value" lines
struct DatasetMeta {
  int classes = 1;
  std::size_t modalities = 1;
  std::size_t max_segments = 1;
  std::vector<std::string> ids;
  std::vector<std::string> train, val;
};

struct Dataset {
  std::filesystem::path root;
  DatasetMeta meta;

  std::filesystem::path image_path(const std::string& id) const { return root / "images" / (id + ".rvf"); }
  std::filesystem::path label_path(const std::string& id) const { return root / "labels" / (id + ".rvf"); }
  Volume image(const std::string& id) const;
  Volume labels(const std::string& id) const;
  /// "train", "val" or "all"
  const std::vector<std::string>& split(const std::string& name) const;
};

void write_meta(const std::filesystem::path& file, const DatasetMeta& meta);
DatasetMeta read_meta(const std::filesystem::path& file);

/// Writes images/, labels/ and meta.txt. Volume ids are zero-padded indices.
DatasetMeta write_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples, int classes,
                          double val_fraction = 0.2);
Dataset open_dataset(const std::filesystem::path& root);

}  // namespace maskseg
