#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "maskseg/losses.hpp"
#include "maskseg/model.hpp"
#include "maskseg/volume.hpp"

namespace maskseg {

struct TrainConfig {
  double init_lr = 0.01;
  std::size_t max_epoch = 20;
  std::size_t iters_per_epoch = 50;
  double momentum = 0.9;
  double weight_decay = 3e-5;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  std::vector<Axis> mirror_axes{Axis::depth, Axis::height, Axis::width};
  /// Parameter-name prefixes excluded from updates; "sam" freezes the original SAM parts.
  std::vector<std::string> freeze;
  LossWeights loss;
  std::size_t cost_stride = 4;
  /// Global gradient-norm cap before each step; 0 disables.
  double clip_norm = 5.0;

  void validate() const;
};

/// init_lr * (1 - e / max_epoch)^0.9
double poly_lr(std::size_t epoch, std::size_t max_epoch, double init_lr);

/// v <- momentum * v + (g + wd * p); p <- p - lr * v
void sgd_step(std::span<double> p, std::span<const double> g, std::span<double> v, double lr, double momentum,
              double weight_decay);

/// Momentum SGD over named parameters with a freeze predicate.
class Sgd {
 public:
  Sgd(NamedTensors params, double momentum, double weight_decay, std::function<bool(const std::string&)> frozen = {});
  /// Returns false (and leaves every parameter untouched) when any gradient is non-finite.
  bool step(double lr, double clip_norm = 0.0);
  void zero_grad();
  bool is_frozen(const std::string& name) const;

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> velocity_;
  std::vector<bool> frozen_;
  double momentum_, weight_decay_;
};

std::function<bool(const std::string&)> freeze_predicate(const std::vector<std::string>& prefixes);

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0, loss = 0, dice = 0;
  std::size_t skipped_steps = 0;
};

/// Crops a patch (zero-padding symmetrically when the volume is smaller).
Sample crop_patch(const Sample& s, std::size_t d, std::size_t h, std::size_t w, std::mt19937_64& rng);
Volume pad_to(const Volume& v, std::size_t d, std::size_t h, std::size_t w);
Volume crop_center(const Volume& v, std::size_t d, std::size_t h, std::size_t w);

Tensor to_tensor(const Volume& v);

/// Runs the full training schedule. Metric lines go to `log` as
/// "epoch <e> lr <v> loss <v> dice <v>".
std::vector<EpochStats> train(MaskSegModel& model, const std::vector<Sample>& data, const TrainConfig& cfg,
                              std::ostream* log = nullptr, std::ostream* diag = nullptr);

}  // namespace maskseg
