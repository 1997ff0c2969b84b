#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fieldrecon/field.hpp"
#include "fieldrecon/rng.hpp"
#include "fieldrecon/unet.hpp"

namespace fieldrecon {

/// Per-sample weight lambda(t) on the score-matching residual.
enum class LossWeighting {
  none,            // plain squared error against the conditional score
  noise_variance,  // lambda(t) = 1 - alpha_bar_t
};

template <typename T>
struct DsmResult {
  double loss = 0.0;
  std::vector<T> grad;  // d loss / d theta, same layout as the parameters
};

/// Denoising score matching on one batch of clean samples.
///
/// Draws t ~ U{1..T} and z ~ N(0, I) per item from `rng`, forms
/// x_t = sqrt(ab) x0 + sqrt(1-ab) z and regresses the network output onto the
/// conditional score -(x_t - sqrt(ab) x0) / (1 - ab). The loss is the mean
/// over all batch elements of the (optionally weighted) squared residual.
template <typename T>
DsmResult<T> dsm_loss(const TrainableScore<T>& net, const Tensor<T>& x0, const NoiseSchedule& sched,
                      Rng& rng, LossWeighting weighting = LossWeighting::none);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::size_t n, AdamOptions options = {}) : options_(options), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<T> params, std::span<const T> grad);
  long steps() const { return steps_; }

 private:
  AdamOptions options_;
  std::vector<double> m_, v_;
  long steps_ = 0;
};

struct ScoreTrainOptions {
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  LossWeighting weighting = LossWeighting::noise_variance;
  /// Called after every epoch with (epoch, mean loss).
  std::function<void(int, double)> on_epoch;
};

struct ScoreTrainResult {
  UNet<float> net;
  std::vector<double> loss_trace;  // one entry per optimizer step
};

/// Trains a fresh network on normalized fields with Adam.
ScoreTrainResult train_score(std::span<const Field> dataset, const NoiseSchedule& sched,
                             const UNetConfig& config, const ScoreTrainOptions& options);

/// Continues training `net` in place; returns the per-step losses.
std::vector<double> fit_score(UNet<float>& net, std::span<const Field> dataset, const NoiseSchedule& sched,
                              const ScoreTrainOptions& options);

}  // namespace fieldrecon
