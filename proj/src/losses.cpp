#include "maskseg/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace maskseg {

void LossWeights::validate() const {
  for (double v : {cls, bce_aux, dice_aux, l1, giou, bce_final, dice_final, noobj})
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

LossWeights LossWeights::scaled(double f) const {
  LossWeights w = *this;
  for (double* p : {&w.cls, &w.bce_aux, &w.dice_aux, &w.l1, &w.giou, &w.bce_final, &w.dice_final}) *p *= f;
  return w;
}

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
}

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": size mismatch");
}

std::array<double, 4> coords(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

}  // namespace

double dice_loss(std::span<const double> prob, std::span<const double> gt, double eps) {
  require_same(prob.size(), gt.size(), "dice_loss");
  require_finite(prob, "dice_loss");
  require_finite(gt, "dice_loss");
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * gt[i];
    sp += prob[i];
    sg += gt[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

double bce_loss(std::span<const double> prob, std::span<const double> gt) {
  require_same(prob.size(), gt.size(), "bce_loss");
  require_finite(prob, "bce_loss");
  require_finite(gt, "bce_loss");
  constexpr double floor = 1e-12;
  double s = 0;
  for (std::size_t i = 0; i < prob.size(); ++i)
    s -= gt[i] * std::log(std::max(prob[i], floor)) + (1.0 - gt[i]) * std::log(std::max(1.0 - prob[i], floor));
  return s / static_cast<double>(prob.size());
}

double l1_box(const Box& pred, const Box& gt) {
  const auto p = coords(pred), g = coords(gt);
  require_finite(p, "l1_box");
  double s = 0;
  for (int k = 0; k < 4; ++k) s += std::fabs(p[k] - g[k]);
  return s / 4.0;
}

double giou_loss(const Box& a, const Box& b) {
  require_finite(coords(a), "giou_loss");
  require_finite(coords(b), "giou_loss");
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double c = (std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min)) *
                   (std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min));
  if (!(c > 0.0) || !(uni > 0.0)) throw std::domain_error("giou_loss: degenerate boxes");
  return 1.0 - (inter / uni - (c - uni) / c);
}

double ce_class(std::span<const double> probs, std::size_t c) {
  require_finite(probs, "ce_class");
  return -std::log(probs[c]);
}

Tensor dice_loss(const Tensor& prob, const Tensor& gt, double eps) {
  if (prob.shape() != gt.shape() || prob.dim() != 2) throw_shape_error("dice_loss", prob.shape(), gt.shape());
  Tensor inter = sum(mul(prob, gt), 1);
  Tensor denom = add_scalar(add(sum(prob, 1), sum(gt, 1)), eps);
  return neg(add_scalar(div(add_scalar(scale(inter, 2.0), eps), denom), -1.0));
}

Tensor l1_box(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.dim() != 2 || pred.size(1) != 4) throw_shape_error("l1_box", pred.shape(), gt.shape());
  return scale(sum(abs(sub(pred, gt)), 1), 0.25);
}

Tensor giou_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.dim() != 2 || pred.size(1) != 4) throw_shape_error("giou_loss", pred.shape(), gt.shape());
  const std::size_t m = pred.size(0);
  auto col = [m](const Tensor& t, std::size_t k) { return reshape(slice(t, 1, k, k + 1), {m}); };
  Tensor px0 = col(pred, 0), py0 = col(pred, 1), px1 = col(pred, 2), py1 = col(pred, 3);
  Tensor gx0 = col(gt, 0), gy0 = col(gt, 1), gx1 = col(gt, 2), gy1 = col(gt, 3);
  Tensor area_p = mul(sub(px1, px0), sub(py1, py0));
  Tensor area_g = mul(sub(gx1, gx0), sub(gy1, gy0));
  Tensor iw = relu(sub(minimum(px1, gx1), maximum(px0, gx0)));
  Tensor ih = relu(sub(minimum(py1, gy1), maximum(py0, gy0)));
  Tensor inter = mul(iw, ih);
  Tensor uni = sub(add(area_p, area_g), inter);
  Tensor enc = mul(sub(maximum(px1, gx1), minimum(px0, gx0)), sub(maximum(py1, gy1), minimum(py0, gy0)));
  Tensor giou = sub(div(inter, uni), div(sub(enc, uni), enc));
  return neg(add_scalar(giou, -1.0));
}

namespace {

/// Strided subsample over H and W of an (N, D, H, W) buffer, optionally through a sigmoid.
std::vector<double> subsample(std::span<const double> v, std::size_t d, std::size_t h, std::size_t w, std::size_t s,
                              bool sig) {
  std::vector<double> out;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; y += s)
      for (std::size_t x = 0; x < w; x += s) {
        const double t = v[(z * h + y) * w + x];
        out.push_back(sig ? 1.0 / (1.0 + std::exp(-t)) : t);
      }
  return out;
}

Box row_box(std::span<const double> b, std::size_t i) { return Box{b[i * 4], b[i * 4 + 1], b[i * 4 + 2], b[i * 4 + 3]}; }

Tensor gt_box_tensor(const SegmentSet& gt) {
  std::vector<double> v;
  for (const auto& s : gt.segments)
    for (double c : coords(s.box)) v.push_back(c);
  return Tensor::from({gt.segments.size(), 4}, std::move(v));
}

Tensor gt_mask_tensor(const SegmentSet& gt) {
  const std::size_t vox = gt.depth * gt.height * gt.width;
  std::vector<double> v;
  v.reserve(gt.segments.size() * vox);
  for (const auto& s : gt.segments) v.insert(v.end(), s.mask.data.begin(), s.mask.data.end());
  return Tensor::from({gt.segments.size(), vox}, std::move(v));
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  std::vector<Tensor> parts;
  for (std::size_t i : idx) parts.push_back(slice(t, 0, i, i + 1));
  return concat(parts, 0);
}

}  // namespace

CostMatrix match_cost(const SegmentSet& gt, const DecoderOutput& pred, const PromptBundle& aux, const LossWeights& w,
                      std::size_t mask_stride) {
  const std::size_t N = pred.class_logits.size(0), K1 = pred.class_logits.size(1);
  const std::size_t D = gt.depth, H = gt.height, W = gt.width, V = D * H * W;
  if (pred.mask_logits.shape() != Shape{N, D, H, W}) throw_shape_error("match_cost", pred.mask_logits.shape(), "masks differ from ground truth");
  const std::size_t s = std::max<std::size_t>(1, mask_stride);

  Tensor probs = softmax(stop_gradient(pred.class_logits), 1);
  auto pv = probs.data();
  std::vector<std::vector<double>> fin(N), aux_m;
  for (std::size_t i = 0; i < N; ++i) fin[i] = subsample(pred.mask_logits.data().subspan(i * V, V), D, H, W, s, true);
  const bool has_aux = aux.aux_mask_logits.defined();
  if (has_aux) {
    aux_m.resize(N);
    for (std::size_t i = 0; i < N; ++i) aux_m[i] = subsample(aux.aux_mask_logits.data().subspan(i * V, V), D, H, W, s, true);
  }
  auto boxes = aux.aux_boxes.data();

  CostMatrix cost(gt.segments.size(), std::vector<double>(N, 0.0));
  for (std::size_t j = 0; j < gt.segments.size(); ++j) {
    const auto& seg = gt.segments[j];
    const std::size_t col = class_column(seg.class_id);
    if (col + 1 >= K1) throw std::invalid_argument("match_cost: class id outside the model's classes");
    const auto m = subsample(seg.mask.data, D, H, W, s, false);
    for (std::size_t i = 0; i < N; ++i) {
      double c = -w.cls * pv[i * K1 + col];
      if (has_aux) c += w.bce_aux * bce_loss(aux_m[i], m) + w.dice_aux * dice_loss(aux_m[i], m);
      const Box b = row_box(boxes, i);
      c += w.l1 * l1_box(b, seg.box) + w.giou * giou_loss(b, seg.box);
      c += w.bce_final * bce_loss(fin[i], m) + w.dice_final * dice_loss(fin[i], m);
      cost[j][i] = c;
    }
  }
  return cost;
}

LossTerms total_loss(const SegmentSet& gt, const DecoderOutput& pred, const PromptBundle& aux,
                     const MatchingResult& match, const LossWeights& w) {
  const std::size_t N = pred.class_logits.size(0), K1 = pred.class_logits.size(1);
  const std::size_t M = gt.segments.size();
  if (match.sigma.size() != M) throw std::invalid_argument("total_loss: matching does not cover the ground truth");
  std::vector<int> owner(N, -1);
  for (std::size_t j = 0; j < M; ++j) {
    if (match.sigma[j] >= N || owner[match.sigma[j]] >= 0) throw std::invalid_argument("total_loss: invalid matching");
    owner[match.sigma[j]] = static_cast<int>(j);
  }

  // class term: per-slot weighted -log p, summed in a slot-order independent order
  std::vector<double> onehot(N * K1, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (owner[i] >= 0)
      onehot[i * K1 + class_column(gt.segments[owner[i]].class_id)] = w.cls;
    else
      onehot[i * K1 + K1 - 1] = w.cls * w.noobj;
  }
  Tensor per_slot = neg(sum(mul(log_softmax(pred.class_logits, 1), Tensor::from({N, K1}, std::move(onehot))), 1));
  std::vector<std::size_t> order(match.sigma.begin(), match.sigma.end());
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < N; ++i)
    if (owner[i] < 0) rest.push_back(i);
  auto ps = per_slot.data();
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) { return ps[a] < ps[b]; });
  order.insert(order.end(), rest.begin(), rest.end());
  LossTerms out;
  Tensor cls_term = sum(gather_rows(per_slot, order));
  out.cls = cls_term.item();
  Tensor total = cls_term;

  if (M > 0) {
    const std::size_t V = gt.depth * gt.height * gt.width;
    const Tensor gt_masks = gt_mask_tensor(gt);
    const double Md = static_cast<double>(M);
    auto mask_terms = [&](const Tensor& logits, double wb, double wd) {
      Tensor rows = gather_rows(reshape(logits, {N, V}), match.sigma);
      Tensor bce = scale(bce_with_logits(rows, gt_masks), Md);  // sum of per-segment means
      Tensor dice = sum(dice_loss(sigmoid(rows), gt_masks));
      return add(scale(bce, wb), scale(dice, wd));
    };
    if (aux.aux_mask_logits.defined()) {
      Tensor t = mask_terms(aux.aux_mask_logits, w.bce_aux, w.dice_aux);
      out.mask_aux = t.item();
      total = add(total, t);
    }
    Tensor pb = gather_rows(aux.aux_boxes, match.sigma);
    Tensor gb = gt_box_tensor(gt);
    Tensor box = add(scale(sum(l1_box(pb, gb)), w.l1), scale(sum(giou_loss(pb, gb)), w.giou));
    out.box = box.item();
    total = add(total, box);
    Tensor fin = mask_terms(pred.mask_logits, w.bce_final, w.dice_final);
    out.mask_final = fin.item();
    total = add(total, fin);
  }
  out.total = total;
  if (!std::isfinite(total.item())) throw NumericError("total_loss is not finite");
  return out;
}

}  // namespace maskseg
