#include "maskseg/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include "maskseg/train.hpp"

namespace maskseg {

AssemblyMode parse_assembly_mode(const std::string& s) {
  if (s == "product") return AssemblyMode::product;
  if (s == "threshold") return AssemblyMode::threshold;
  throw std::invalid_argument("unknown assembly mode '" + s + "' (product, threshold)");
}

Volume semantic_assembly(const Tensor& class_logits, const Tensor& mask_logits, AssemblyMode mode, double threshold) {
  const Shape& ms = mask_logits.shape();
  if (class_logits.dim() != 2 || ms.size() != 4 || ms[0] != class_logits.size(0))
    throw_shape_error("semantic_assembly", class_logits.shape(), ms);
  const std::size_t N = ms[0], K1 = class_logits.size(1), K = K1 - 1, V = ms[1] * ms[2] * ms[3];
  Tensor p;
  {
    NoGradGuard ng;
    p = softmax(stop_gradient(class_logits), 1);
  }
  auto pv = p.data();
  auto mv = mask_logits.data();
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  Volume out(K1, ms[1], ms[2], ms[3]);

  if (mode == AssemblyMode::product) {
    for (std::size_t c = 1; c <= K; ++c)
      for (std::size_t i = 0; i < N; ++i) {
        const double pc = pv[i * K1 + c - 1];
        if (pc == 0.0) continue;
        for (std::size_t v = 0; v < V; ++v) out.data[c * V + v] += pc * sig(mv[i * V + v]);
      }
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0;
      for (std::size_t c = 1; c <= K; ++c) s += out.data[c * V + v];
      out.data[v] = std::max(0.0, 1.0 - s);
      const double total = out.data[v] + s;
      for (std::size_t c = 0; c <= K; ++c) out.data[c * V + v] /= total;
    }
    return out;
  }

  // threshold: per class, the most confident slot whose argmax is that class paints its binarized mask
  std::vector<double> best_score(V, 0.0);
  std::vector<std::size_t> label(V, 0);
  for (std::size_t c = 1; c <= K; ++c) {
    std::size_t best = N;
    for (std::size_t i = 0; i < N; ++i) {
      const double* row = pv.data() + i * K1;
      const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + K1) - row);
      if (arg != c - 1) continue;
      if (best == N || row[c - 1] > pv[best * K1 + c - 1]) best = i;
    }
    if (best == N) continue;
    const double score = pv[best * K1 + c - 1];
    for (std::size_t v = 0; v < V; ++v)
      if (sig(mv[best * V + v]) > threshold && score > best_score[v]) {
        best_score[v] = score;
        label[v] = c;
      }
  }
  for (std::size_t v = 0; v < V; ++v) out.data[label[v] * V + v] = 1.0;
  return out;
}

std::vector<std::size_t> tile_starts(std::size_t extent, std::size_t patch) {
  if (patch == 0 || extent < patch) throw std::invalid_argument("tile_starts: extent smaller than patch");
  const std::size_t stride = std::max<std::size_t>(1, patch / 2);
  std::vector<std::size_t> s;
  for (std::size_t p = 0; p + patch < extent; p += stride) s.push_back(p);
  if (s.empty() || s.back() != extent - patch) s.push_back(extent - patch);
  return s;
}

std::vector<double> gaussian_weights(std::size_t d, std::size_t h, std::size_t w) {
  auto axis = [](std::size_t n) {
    std::vector<double> g(n);
    const double sigma = static_cast<double>(n) / 8.0, c = (static_cast<double>(n) - 1.0) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = (static_cast<double>(i) - c) / sigma;
      g[i] = std::exp(-0.5 * t * t);
    }
    return g;
  };
  const auto gz = axis(d), gy = axis(h), gx = axis(w);
  std::vector<double> out(d * h * w);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(z * h + y) * w + x] = gz[z] * gy[y] * gx[x];
  return out;
}

std::size_t worker_threads(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(1, requested);
  if (const char* env = std::getenv("MASKSEG_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

namespace {

Volume flip_all(Volume v, std::span<const Axis> axes) {
  for (Axis a : axes) v = flip(v, a);
  return v;
}

/// Average of predictions over every subset of the flip axes, each un-flipped.
Volume flip_ensemble(const PatchPredictor& predict, const Volume& patch, std::span<const Axis> axes) {
  const std::size_t combos = std::size_t{1} << axes.size();
  Volume acc;
  for (std::size_t m = 0; m < combos; ++m) {
    std::vector<Axis> chosen;
    for (std::size_t k = 0; k < axes.size(); ++k)
      if (m & (std::size_t{1} << k)) chosen.push_back(axes[k]);
    Volume pred = flip_all(predict(flip_all(patch, chosen)), chosen);
    if (m == 0) {
      acc = std::move(pred);
    } else {
      if (!pred.same_spatial(acc) || pred.channels != acc.channels) throw std::runtime_error("predictor changed shape");
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += pred.data[i];
    }
  }
  for (auto& v : acc.data) v /= static_cast<double>(combos);
  return acc;
}

}  // namespace

Volume sliding_window_infer(const PatchPredictor& predict, const Volume& image, const InferConfig& cfg) {
  const std::size_t pd = cfg.depth, ph = cfg.height, pw = cfg.width;
  Volume img = pad_to(image, pd, ph, pw);
  const auto zs = tile_starts(img.depth, pd), ys = tile_starts(img.height, ph), xs = tile_starts(img.width, pw);
  struct Tile {
    std::size_t z, y, x;
    Volume probs;
  };
  std::vector<Tile> tiles;
  for (auto z : zs)
    for (auto y : ys)
      for (auto x : xs) tiles.push_back({z, y, x, {}});

  auto run = [&](Tile& t) {
    Volume patch(img.channels, pd, ph, pw);
    for (std::size_t c = 0; c < img.channels; ++c)
      for (std::size_t z = 0; z < pd; ++z)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) patch.at(c, z, y, x) = img.at(c, t.z + z, t.y + y, t.x + x);
    t.probs = flip_ensemble(predict, patch, cfg.flip_axes);
  };
  const std::size_t nthreads = std::min(worker_threads(cfg.threads), tiles.size());
  if (nthreads <= 1) {
    for (auto& t : tiles) run(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(nthreads);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < nthreads; ++k)
      pool.emplace_back([&, k] {
        try {
          for (std::size_t i; (i = next.fetch_add(1)) < tiles.size();) run(tiles[i]);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // serial accumulation in tile order keeps the result independent of thread count
  const auto weights = gaussian_weights(pd, ph, pw);
  const std::size_t C = tiles.front().probs.channels;
  Volume acc(C, img.depth, img.height, img.width);
  std::vector<double> wsum(img.spatial_size(), 0.0);
  for (const auto& t : tiles) {
    for (std::size_t z = 0; z < pd; ++z)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x) {
          const double wv = weights[(z * ph + y) * pw + x];
          const std::size_t gi = ((t.z + z) * img.height + (t.y + y)) * img.width + (t.x + x);
          wsum[gi] += wv;
          for (std::size_t c = 0; c < C; ++c) acc.data[c * img.spatial_size() + gi] += wv * t.probs.at(c, z, y, x);
        }
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < wsum.size(); ++i) acc.data[c * wsum.size() + i] /= wsum[i];
  return crop_center(acc, image.depth, image.height, image.width);
}

PatchPredictor model_predictor(const MaskSegModel& model, AssemblyMode mode, double threshold) {
  return [&model, mode, threshold](const Volume& patch) {
    NoGradGuard ng;
    ModelOutput out = model.forward(to_tensor(patch));
    return semantic_assembly(out.decoded.class_logits, out.decoded.mask_logits, mode, threshold);
  };
}

Volume argmax_labels(const Volume& probs) {
  Volume out(1, probs.depth, probs.height, probs.width);
  const std::size_t V = probs.spatial_size();
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.channels; ++c)
      if (probs.data[c * V + v] > probs.data[best * V + v]) best = c;
    out.data[v] = static_cast<double>(best);
  }
  return out;
}

DiceReport dice_score(const Volume& pred, const Volume& gt, int classes) {
  if (!pred.same_spatial(gt) || pred.channels != 1 || gt.channels != 1)
    throw DataError("dice_score: prediction and ground truth differ in extent");
  DiceReport r;
  double sum = 0;
  std::size_t n = 0;
  for (int c = 1; c <= classes; ++c) {
    std::size_t inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool p = pred.data[i] == c, g = gt.data[i] == c;
      inter += p && g;
      sp += p;
      sg += g;
    }
    if (sp + sg == 0) {
      r.per_class.push_back(std::nan(""));
      continue;
    }
    const double d = 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
    r.per_class.push_back(d);
    sum += d;
    ++n;
  }
  r.mean = n ? sum / static_cast<double>(n) : std::nan("");
  return r;
}

}  // namespace maskseg
