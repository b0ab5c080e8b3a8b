#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "maskseg/inference.hpp"
#include "maskseg/model.hpp"
#include "maskseg/train.hpp"

namespace maskseg {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

using ConfigPairs = std::vector<std::pair<std::string, std::string>>;

/// Flat key = value configuration. Layers: defaults < ablation preset < file < flags.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<ConfigKey>& keys();
  /// "key = default  # help" lines for --help output.
  static std::string describe();

  /// Rebuilds from defaults plus the given layers; unknown keys throw std::invalid_argument.
  void resolve(const ConfigPairs& file, const ConfigPairs& flags);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  ModelConfig model() const;
  TrainConfig train() const;
  InferConfig infer() const;

  void write(const std::filesystem::path& file) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Parses "key = value" lines (# comments, blank lines allowed).
ConfigPairs read_config_file(const std::filesystem::path& file);
/// Splits "key=value".
std::pair<std::string, std::string> parse_assignment(const std::string& s);
/// Preset keys for an ablation row.
ConfigPairs ablation_preset(Ablation a);
/// "DxHxW" -> extents.
std::array<std::size_t, 3> parse_extents(const std::string& s);
std::vector<Axis> parse_axes(const std::string& s);

}  // namespace maskseg
