#include "maskseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace maskseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& w : v) out += (out.empty() ? "" : " ") + w;
  return out;
}

long parse_count(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size() || v < 0) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw DataError("meta.txt: bad value for " + key + ": '" + value + "'");
  }
}

}  // namespace

void write_meta(const std::filesystem::path& file, const DatasetMeta& meta) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file.string());
  os << "classes: " << meta.classes << "\n"
     << "modalities: " << meta.modalities << "\n"
     << "volumes: " << meta.ids.size() << "\n"
     << "max_segments: " << meta.max_segments << "\n"
     << "ids: " << join(meta.ids) << "\n"
     << "train: " << join(meta.train) << "\n"
     << "val: " << join(meta.val) << "\n";
}

DatasetMeta read_meta(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open " + file.string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(is, line);) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw DataError("meta.txt: malformed line '" + line + "'");
    kv[trim(line.substr(0, colon))] = trim(line.substr(colon + 1));
  }
  DatasetMeta m;
  if (!kv.count("classes")) throw DataError("meta.txt: missing classes");
  m.classes = static_cast<int>(parse_count("classes", kv["classes"]));
  if (m.classes < 1) throw DataError("meta.txt: classes must be >= 1");
  if (kv.count("modalities")) m.modalities = static_cast<std::size_t>(parse_count("modalities", kv["modalities"]));
  m.ids = words(kv["ids"]);
  m.train = words(kv["train"]);
  m.val = words(kv["val"]);
  if (m.ids.empty()) {
    m.ids = m.train;
    m.ids.insert(m.ids.end(), m.val.begin(), m.val.end());
  }
  if (kv.count("volumes") && static_cast<std::size_t>(parse_count("volumes", kv["volumes"])) != m.ids.size())
    throw DataError("meta.txt: volumes does not match the id list");
  m.max_segments = kv.count("max_segments") ? static_cast<std::size_t>(parse_count("max_segments", kv["max_segments"]))
                                            : static_cast<std::size_t>(m.classes);
  return m;
}

Volume Dataset::image(const std::string& id) const {
  Volume v = read_rvf(image_path(id));
  if (v.channels != meta.modalities)
    throw DataError("volume " + id + " has " + std::to_string(v.channels) + " channels, meta says " +
                    std::to_string(meta.modalities));
  return v;
}

Volume Dataset::labels(const std::string& id) const {
  Volume v = read_rvf(label_path(id));
  if (v.channels != 1) throw DataError("label volume " + id + " must be single-channel");
  for (double x : v.data)
    if (x != std::floor(x) || x < 0 || x > meta.classes)
      throw DataError("label volume " + id + " holds value outside {0.." + std::to_string(meta.classes) + "}");
  return v;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  if (name == "train") return meta.train;
  if (name == "val") return meta.val;
  if (name == "all") return meta.ids;
  throw DataError("unknown split '" + name + "'");
}

DatasetMeta write_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples, int classes,
                          double val_fraction) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "labels");
  DatasetMeta meta;
  meta.classes = classes;
  meta.modalities = samples.empty() ? 1 : samples.front().image.channels;
  const std::size_t n_val =
      samples.size() < 2 ? 0 : static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(samples.size())));
  std::size_t max_seg = 1;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream id;
    id << std::setw(3) << std::setfill('0') << i;
    meta.ids.push_back(id.str());
    (i + n_val < samples.size() ? meta.train : meta.val).push_back(id.str());
    write_rvf(root / "images" / (id.str() + ".rvf"), samples[i].image, SampleType::float32);
    write_rvf(root / "labels" / (id.str() + ".rvf"), samples[i].labels, SampleType::uint8);
    max_seg = std::max(max_seg, dataset_map(samples[i].labels, classes).segments.size());
  }
  meta.max_segments = max_seg;
  write_meta(root / "meta.txt", meta);
  return meta;
}

Dataset open_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError("dataset directory not found: " + root.string());
  Dataset ds;
  ds.root = root;
  ds.meta = read_meta(root / "meta.txt");
  for (const auto& id : ds.meta.ids) {
    if (!std::filesystem::exists(ds.image_path(id))) throw DataError("missing image for volume " + id);
    if (!std::filesystem::exists(ds.label_path(id))) throw DataError("missing labels for volume " + id);
  }
  return ds;
}

}  // namespace maskseg
