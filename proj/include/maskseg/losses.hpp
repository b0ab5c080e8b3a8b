#pragma once

#include <span>
#include <stdexcept>

#include "maskseg/decoder.hpp"
#include "maskseg/matching.hpp"
#include "maskseg/prompt_generator.hpp"
#include "maskseg/volume.hpp"

namespace maskseg {

/// Raised when a loss or gradient becomes non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double cls = 1.0;
  double bce_aux = 5.0;
  double dice_aux = 5.0;
  double l1 = 5.0;
  double giou = 2.0;
  double bce_final = 5.0;
  double dice_final = 5.0;
  double noobj = 0.1;

  void validate() const;
  LossWeights scaled(double f) const;
};

constexpr double kDiceEps = 1e-5;

// Scalar forms. Probabilities are post-sigmoid, masks binary.
double dice_loss(std::span<const double> prob, std::span<const double> gt, double eps = kDiceEps);
double bce_loss(std::span<const double> prob, std::span<const double> gt);
double l1_box(const Box& pred, const Box& gt);
double giou_loss(const Box& pred, const Box& gt);
/// -log p(c) for a probability vector.
double ce_class(std::span<const double> probs, std::size_t c);

// Differentiable forms.
/// prob, gt: (M, V); returns (M) per-row dice losses.
Tensor dice_loss(const Tensor& prob, const Tensor& gt, double eps = kDiceEps);
/// pred, gt: (M, 4); returns (M) per-row losses.
Tensor l1_box(const Tensor& pred, const Tensor& gt);
Tensor giou_loss(const Tensor& pred, const Tensor& gt);

/// Column of class c (1..K) in (N, K+1) class logits; the no-object column is K.
inline std::size_t class_column(int c) { return static_cast<std::size_t>(c - 1); }

/// cost[j][i] between ground-truth segment j and prediction slot i.
/// Mask terms use H and W subsampled by `mask_stride`.
CostMatrix match_cost(const SegmentSet& gt, const DecoderOutput& pred, const PromptBundle& aux, const LossWeights& w,
                      std::size_t mask_stride = 4);

struct LossTerms {
  Tensor total;
  double cls = 0, mask_aux = 0, box = 0, mask_final = 0;
};

LossTerms total_loss(const SegmentSet& gt, const DecoderOutput& pred, const PromptBundle& aux,
                     const MatchingResult& match, const LossWeights& w);

}  // namespace maskseg
