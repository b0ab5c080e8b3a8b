#include "maskseg/volume.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace maskseg {

namespace {

constexpr char kRvfMagic[8] = {'M', 'S', 'K', 'V', '0', '0', '0', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4] = {};
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

Volume::Volume(std::size_t c, std::size_t d, std::size_t h, std::size_t w, double fill)
    : channels(c), depth(d), height(h), width(w), data(c * d * h * w, fill) {
  if (c == 0 || d == 0 || h == 0 || w == 0) throw DataError("volume extents must be >= 1");
}

Volume Volume::channel(std::size_t c) const {
  Volume out(1, depth, height, width);
  const std::size_t n = spatial_size();
  std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(c * n), n, out.data.begin());
  return out;
}

void write_rvf(const std::filesystem::path& path, const Volume& v, SampleType type) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(kRvfMagic, 8);
  for (auto e : {v.channels, v.depth, v.height, v.width}) put_u32(os, static_cast<std::uint32_t>(e));
  os.put(static_cast<char>(type));
  if (type == SampleType::uint8) {
    std::vector<std::uint8_t> buf(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v.data[i];
      if (!(x >= 0.0 && x <= 255.0) || x != std::floor(x)) throw DataError("uint8 volume holds non-byte value");
      buf[i] = static_cast<std::uint8_t>(x);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  } else {
    for (double x : v.data) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
  if (!os) throw DataError("write failed: " + path.string());
}

Volume read_rvf(const std::filesystem::path& path, SampleType* type) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kRvfMagic, 8) != 0) throw DataError("bad RVF magic: " + path.string());
  std::array<std::uint32_t, 4> ext{};
  for (auto& e : ext) e = get_u32(is);
  const int t = is.get();
  if (!is || (t != 0 && t != 1)) throw DataError("bad RVF header: " + path.string());
  for (auto e : ext)
    if (e == 0) throw DataError("zero extent in " + path.string());
  Volume v(ext[0], ext[1], ext[2], ext[3]);
  if (t == 1) {
    std::vector<std::uint8_t> buf(v.size());
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    for (std::size_t i = 0; i < buf.size(); ++i) v.data[i] = buf[i];
  } else {
    for (auto& x : v.data) {
      x = std::bit_cast<float>(get_u32(is));
    }
    for (double x : v.data)
      if (!std::isfinite(x)) throw DataError("non-finite sample in " + path.string());
  }
  if (!is) throw DataError("truncated RVF: " + path.string());
  if (type) *type = static_cast<SampleType>(t);
  return v;
}

std::optional<Box> box_of(std::span<const double> values, std::size_t depth, std::size_t height, std::size_t width,
                          double threshold) {
  std::size_t r0 = height, r1 = 0, c0 = width, c1 = 0;
  bool any = false;
  for (std::size_t z = 0; z < depth; ++z)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        if (!(values[(z * height + y) * width + x] > threshold)) continue;
        any = true;
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x);
      }
  if (!any) return std::nullopt;
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  return Box{c0 / w, r0 / h, (c1 + 1) / w, (r1 + 1) / h};
}

Box box_from_mask(const Volume& mask) {
  if (mask.channels != 1) throw DataError("box_from_mask: expected a single-channel mask");
  auto b = box_of(mask.data, mask.depth, mask.height, mask.width);
  if (!b) throw EmptyMaskError();
  return *b;
}

SegmentSet dataset_map(const Volume& labels, int num_classes) {
  if (labels.channels != 1) throw DataError("labels must be single-channel");
  SegmentSet set;
  set.depth = labels.depth;
  set.height = labels.height;
  set.width = labels.width;
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes) + 1, 0);
  for (double v : labels.data) {
    if (v != std::floor(v) || v < 0 || v > num_classes) {
      std::ostringstream os;
      os << "label value " << v << " outside {0.." << num_classes << "}";
      throw DataError(os.str());
    }
    ++counts[static_cast<std::size_t>(v)];
  }
  for (int c = 1; c <= num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) continue;
    GroundTruthSegment seg;
    seg.class_id = c;
    seg.mask = Volume(1, labels.depth, labels.height, labels.width);
    for (std::size_t i = 0; i < labels.size(); ++i) seg.mask.data[i] = labels.data[i] == c ? 1.0 : 0.0;
    seg.box = box_from_mask(seg.mask);
    set.segments.push_back(std::move(seg));
  }
  return set;
}

Volume assemble_from_segments(const SegmentSet& set) {
  Volume out(1, set.depth, set.height, set.width);
  for (const auto& seg : set.segments)
    for (std::size_t i = 0; i < out.size(); ++i)
      if (seg.mask.data[i] > 0.5) out.data[i] = seg.class_id;
  return out;
}

Volume flip(const Volume& v, Axis axis) {
  Volume out = v;
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < v.depth; ++z)
      for (std::size_t y = 0; y < v.height; ++y)
        for (std::size_t x = 0; x < v.width; ++x) {
          std::size_t zz = z, yy = y, xx = x;
          switch (axis) {
            case Axis::depth: zz = v.depth - 1 - z; break;
            case Axis::height: yy = v.height - 1 - y; break;
            case Axis::width: xx = v.width - 1 - x; break;
          }
          out.at(c, zz, yy, xx) = v.at(c, z, y, x);
        }
  return out;
}

std::pair<Volume, Volume> mirror(const Volume& image, const Volume& labels, std::span<const Axis> axes) {
  if (!image.same_spatial(labels)) throw DataError("mirror: image and labels differ in extent");
  std::pair<Volume, Volume> out{image, labels};
  for (Axis a : axes) {
    out.first = flip(out.first, a);
    out.second = flip(out.second, a);
  }
  return out;
}

std::pair<Volume, Volume> mirror_augment(const Volume& image, const Volume& labels, std::span<const Axis> axes,
                                         std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<Axis> chosen;
  for (Axis a : axes)
    if (coin(rng)) chosen.push_back(a);
  return mirror(image, labels, chosen);
}

namespace {

constexpr int kAttempts = 50;
constexpr int kRestarts = 20;

struct Placed {
  std::array<std::size_t, 3> lo, hi;  // inclusive voxel bounds (z, y, x)
};

bool disjoint(const Placed& a, const Placed& b) {
  // one voxel of clearance along at least one axis
  for (int k = 0; k < 3; ++k)
    if (a.hi[k] + 1 < b.lo[k] || b.hi[k] + 1 < a.lo[k]) return true;
  return false;
}

}  // namespace

std::vector<Sample> synth_dataset(const SynthConfig& cfg) {
  if (cfg.classes < 1) throw DataError("synth: classes must be >= 1");
  if (cfg.volumes == 0 || cfg.modalities == 0) throw DataError("synth: volumes and modalities must be >= 1");
  if (cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects)
    throw DataError("synth: need 1 <= min_objects <= max_objects");
  const std::size_t K = static_cast<std::size_t>(cfg.classes);
  if (cfg.volumes * std::min(cfg.max_objects, K) < K)
    throw DataError("synth: too few volumes/objects for every class to appear");

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::size_t> uncovered(K);
  std::iota(uncovered.begin(), uncovered.end(), 1);
  std::shuffle(uncovered.begin(), uncovered.end(), rng);

  const std::array<std::size_t, 3> ext{cfg.depth, cfg.height, cfg.width};
  std::vector<Sample> out;
  out.reserve(cfg.volumes);
  for (std::size_t vi = 0; vi < cfg.volumes; ++vi) {
    const std::size_t remaining = cfg.volumes - vi;
    std::size_t n = std::uniform_int_distribution<std::size_t>(cfg.min_objects, cfg.max_objects)(rng);
    n = std::min(n, K);
    // make sure leftover classes still fit in the remaining volumes
    const std::size_t need = (uncovered.size() + remaining - 1) / remaining;
    n = std::max(n, std::min(need, std::min(cfg.max_objects, K)));

    std::vector<std::size_t> classes;
    while (classes.size() < n && !uncovered.empty()) {
      classes.push_back(uncovered.back());
      uncovered.pop_back();
    }
    std::vector<std::size_t> pool;
    for (std::size_t c = 1; c <= K; ++c)
      if (std::find(classes.begin(), classes.end(), c) == classes.end()) pool.push_back(c);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; classes.size() < n; ++i) classes.push_back(pool[i]);

    Sample s{Volume(cfg.modalities, cfg.depth, cfg.height, cfg.width), Volume(1, cfg.depth, cfg.height, cfg.width)};
    bool packed = false;
    for (int restart = 0; restart < kRestarts && !packed; ++restart) {
      std::fill(s.labels.data.begin(), s.labels.data.end(), 0.0);
      std::vector<Placed> placed;
      packed = true;
      for (std::size_t cls : classes) {
        bool ok = false;
        for (int attempt = 0; attempt < kAttempts && !ok; ++attempt) {
          Placed p;
          std::array<double, 3> centre{}, radius{};
          for (int k = 0; k < 3; ++k) {
            // integer half-extent around 1/8..1/4 of the axis (depth up to 1/3)
            const std::size_t cap = (ext[k] - 1) / 2;
            const std::size_t hi = std::min(cap, k == 0 ? ext[k] / 3 : ext[k] / 4);
            const std::size_t lo = std::min(hi, ext[k] / 8);
            // restarts draw smaller objects
            const std::size_t top = lo + (hi - lo) * static_cast<std::size_t>(kRestarts - 1 - restart) / (kRestarts - 1);
            const std::size_t rr = std::uniform_int_distribution<std::size_t>(lo, top)(rng);
            radius[k] = static_cast<double>(rr) + 0.5;
            const std::size_t c = std::uniform_int_distribution<std::size_t>(rr, ext[k] - 1 - rr)(rng);
            centre[k] = static_cast<double>(c);
            p.lo[k] = c - rr;
            p.hi[k] = c + rr;
          }
          if (!std::all_of(placed.begin(), placed.end(), [&](const Placed& q) { return disjoint(p, q); })) continue;
          const bool ellipsoid = std::bernoulli_distribution(0.5)(rng);
          for (std::size_t z = p.lo[0]; z <= p.hi[0]; ++z)
            for (std::size_t y = p.lo[1]; y <= p.hi[1]; ++y)
              for (std::size_t x = p.lo[2]; x <= p.hi[2]; ++x) {
                if (ellipsoid) {
                  const double dz = (static_cast<double>(z) - centre[0]) / radius[0];
                  const double dy = (static_cast<double>(y) - centre[1]) / radius[1];
                  const double dx = (static_cast<double>(x) - centre[2]) / radius[2];
                  if (dz * dz + dy * dy + dx * dx > 1.0) continue;
                }
                s.labels.at(0, z, y, x) = static_cast<double>(cls);
              }
          placed.push_back(p);
          ok = true;
        }
        if (!ok) {
          packed = false;
          break;
        }
      }
    }
    if (!packed) throw DataError("synth: infeasible packing, could not place objects after bounded retries");
    for (std::size_t m = 0; m < cfg.modalities; ++m)
      for (std::size_t i = 0; i < s.labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(s.labels.data[i]);
        const double mean = c == 0 ? 0.0 : static_cast<double>((c - 1 + m) % K + 1) / static_cast<double>(K);
        s.image.data[m * s.labels.size() + i] = mean + cfg.noise * gauss(rng);
      }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace maskseg
