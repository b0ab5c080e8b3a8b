#include "maskseg/train.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace maskseg {

void TrainConfig::validate() const {
  if (!(init_lr >= 0) || max_epoch == 0 || iters_per_epoch == 0 || batch_size == 0)
    throw std::invalid_argument("train: lr >= 0 and epochs, iterations, batch size >= 1 required");
  if (!(momentum >= 0 && momentum < 1) || !(weight_decay >= 0) || !(clip_norm >= 0))
    throw std::invalid_argument("train: momentum in [0, 1), weight_decay >= 0 and clip_norm >= 0 required");
  loss.validate();
}

double poly_lr(std::size_t epoch, std::size_t max_epoch, double init_lr) {
  if (max_epoch == 0 || epoch > max_epoch)
    throw std::invalid_argument("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(max_epoch) + "]");
  return init_lr * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(max_epoch), 0.9);
}

void sgd_step(std::span<double> p, std::span<const double> g, std::span<double> v, double lr, double momentum,
              double weight_decay) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + (g[i] + weight_decay * p[i]);
    p[i] -= lr * v[i];
  }
}

std::function<bool(const std::string&)> freeze_predicate(const std::vector<std::string>& prefixes) {
  return [prefixes](const std::string& name) {
    for (const auto& p : prefixes) {
      if (p == "sam" && is_sam_original(name)) return true;
      if (!p.empty() && p != "sam" && name.rfind(p, 0) == 0) return true;
    }
    return false;
  };
}

Sgd::Sgd(NamedTensors params, double momentum, double weight_decay, std::function<bool(const std::string&)> frozen)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_) {
    velocity_.emplace_back(t.numel(), 0.0);
    frozen_.push_back(frozen && frozen(name));
  }
}

bool Sgd::is_frozen(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].first == name) return frozen_[i];
  return false;
}

bool Sgd::step(double lr, double clip_norm) {
  double sq = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    for (double g : params_[i].second.grad()) {
      if (!std::isfinite(g)) return false;
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const bool clip = clip_norm > 0 && norm > clip_norm;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    Tensor t = params_[i].second;
    if (clip)
      for (double& g : t.mutable_grad()) g *= clip_norm / norm;
    sgd_step(t.data(), t.grad(), velocity_[i], lr, momentum_, weight_decay_);
  }
  return true;
}

void Sgd::zero_grad() {
  for (auto& [name, t] : params_) Tensor(t).zero_grad();
}

Volume pad_to(const Volume& v, std::size_t d, std::size_t h, std::size_t w) {
  const std::size_t D = std::max(d, v.depth), H = std::max(h, v.height), W = std::max(w, v.width);
  if (D == v.depth && H == v.height && W == v.width) return v;
  const std::size_t oz = (D - v.depth) / 2, oy = (H - v.height) / 2, ox = (W - v.width) / 2;
  Volume out(v.channels, D, H, W);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < v.depth; ++z)
      for (std::size_t y = 0; y < v.height; ++y)
        for (std::size_t x = 0; x < v.width; ++x) out.at(c, z + oz, y + oy, x + ox) = v.at(c, z, y, x);
  return out;
}

namespace {

Volume crop_at(const Volume& v, std::size_t z0, std::size_t y0, std::size_t x0, std::size_t d, std::size_t h,
               std::size_t w) {
  Volume out(v.channels, d, h, w);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(c, z, y, x) = v.at(c, z0 + z, y0 + y, x0 + x);
  return out;
}

}  // namespace

Volume crop_center(const Volume& v, std::size_t d, std::size_t h, std::size_t w) {
  return crop_at(v, (v.depth - d) / 2, (v.height - h) / 2, (v.width - w) / 2, d, h, w);
}

Sample crop_patch(const Sample& s, std::size_t d, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Volume img = pad_to(s.image, d, h, w);
  Volume lab = pad_to(s.labels, d, h, w);
  auto pick = [&](std::size_t ext, std::size_t p) {
    return std::uniform_int_distribution<std::size_t>(0, ext - p)(rng);
  };
  const std::size_t z0 = pick(img.depth, d), y0 = pick(img.height, h), x0 = pick(img.width, w);
  return {crop_at(img, z0, y0, x0, d, h, w), crop_at(lab, z0, y0, x0, d, h, w)};
}

Tensor to_tensor(const Volume& v) {
  return Tensor::from({1, v.channels, v.depth, v.height, v.width}, v.data);
}

namespace {

/// Mean Dice of thresholded final masks over matched pairs.
double matched_dice(const SegmentSet& gt, const DecoderOutput& pred, const MatchingResult& m) {
  if (gt.segments.empty()) return std::nan("");
  const std::size_t V = gt.depth * gt.height * gt.width;
  auto logits = pred.mask_logits.data();
  double total = 0;
  for (std::size_t j = 0; j < gt.segments.size(); ++j) {
    double inter = 0, sp = 0, sg = 0;
    for (std::size_t v = 0; v < V; ++v) {
      const double p = logits[m.sigma[j] * V + v] > 0 ? 1.0 : 0.0;
      const double g = gt.segments[j].mask.data[v];
      inter += p * g;
      sp += p;
      sg += g;
    }
    total += 2 * inter / (sp + sg);
  }
  return total / static_cast<double>(gt.segments.size());
}

}  // namespace

std::vector<EpochStats> train(MaskSegModel& model, const std::vector<Sample>& data, const TrainConfig& cfg,
                              std::ostream* log, std::ostream* diag) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  const ModelConfig& mc = model.config();
  const int K = static_cast<int>(mc.classes);
  for (const auto& s : data) {
    if (s.image.channels != mc.modalities) throw DataError("train: image modalities differ from the model");
    const std::size_t n = dataset_map(s.labels, K).segments.size();
    if (n > mc.prompts)
      throw DataError("train: a volume has " + std::to_string(n) + " segments but the model has only " +
                      std::to_string(mc.prompts) + " prompt slots; raise model.prompts");
  }

  std::mt19937_64 rng(cfg.seed);
  Sgd opt(model.named_parameters(), cfg.momentum, cfg.weight_decay, freeze_predicate(cfg.freeze));
  std::vector<EpochStats> history;
  std::size_t bad_streak = 0;
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

  for (std::size_t e = 0; e < cfg.max_epoch; ++e) {
    EpochStats st;
    st.epoch = e;
    st.lr = poly_lr(e, cfg.max_epoch, cfg.init_lr);
    double loss_sum = 0, dice_sum = 0;
    std::size_t loss_n = 0, dice_n = 0;
    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      opt.zero_grad();
      bool finite = true;
      for (std::size_t b = 0; b < cfg.batch_size && finite; ++b) {
        Sample patch = crop_patch(data[pick(rng)], mc.depth, mc.height, mc.width, rng);
        auto [img, lab] = mirror_augment(patch.image, patch.labels, cfg.mirror_axes, rng);
        SegmentSet gt = dataset_map(lab, K);
        try {
          ModelOutput out = model.forward(to_tensor(img));
          MatchingResult m;
          {
            NoGradGuard ng;
            m = hungarian(match_cost(gt, out.decoded, out.bundle, cfg.loss, cfg.cost_stride));
          }
          LossTerms lt = total_loss(gt, out.decoded, out.bundle, m, cfg.loss);
          Tensor loss = cfg.batch_size > 1 ? scale(lt.total, 1.0 / static_cast<double>(cfg.batch_size)) : lt.total;
          backward(loss);
          loss_sum += lt.total.item();
          ++loss_n;
          const double d = matched_dice(gt, out.decoded, m);
          if (!std::isnan(d)) {
            dice_sum += d;
            ++dice_n;
          }
        } catch (const NumericError& err) {
          finite = false;
          if (diag) *diag << "epoch " << e << " iter " << it << ": " << err.what() << "\n";
        }
      }
      if (!finite) {
        if (++bad_streak >= 10)
          throw NumericError("training aborted: loss non-finite for 10 consecutive iterations (epoch " +
                             std::to_string(e) + ", iteration " + std::to_string(it) + ", lr " +
                             std::to_string(st.lr) + ")");
        continue;
      }
      bad_streak = 0;
      if (!opt.step(st.lr, cfg.clip_norm)) {
        ++st.skipped_steps;
        if (diag) *diag << "epoch " << e << " iter " << it << ": non-finite gradient, step skipped\n";
      }
    }
    st.loss = loss_n ? loss_sum / static_cast<double>(loss_n) : std::nan("");
    st.dice = dice_n ? dice_sum / static_cast<double>(dice_n) : std::nan("");
    if (log) {
      *log << "epoch " << e << " lr " << st.lr << " loss " << st.loss << " dice " << st.dice << "\n";
      log->flush();
    }
    history.push_back(st);
  }
  return history;
}

}  // namespace maskseg
