#pragma once

#include <cstdint>
#include <vector>

#include "fieldrecon/kernels.hpp"
#include "fieldrecon/score_function.hpp"

namespace fieldrecon {

struct UNetConfig {
  int in_channels = 1;
  int base_channels = 32;
  /// Number of 2x down-samplings.
  int depth = 2;
  /// One width multiplier per resolution level (depth + 1 entries).
  std::vector<int> channel_multipliers{1, 2, 4};
  int time_dim = 64;
  int groups = 8;

  int width(int level) const { return base_channels * channel_multipliers[level]; }
  /// Smallest multiple of 2^depth that is >= extent.
  int padded(int extent) const;
  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

/// Convolutional U-Net score estimator s_theta(x_t, t).
///
/// Each resolution level has two conv blocks (3x3 conv, group norm, SiLU); the
/// first block of a level receives a learned projection of the sinusoidal time
/// embedding as a per-channel bias. Down-sampling is 2x2 average pooling,
/// up-sampling is nearest-neighbour with skip concatenation. The final 3x3 conv
/// is linear; the score is -x_t + out / sqrt(1 - alpha_bar_t), i.e. the
/// network learns a correction to the score of a standard normal.
/// Time enters as the continuous fraction t/T, which lets one network serve
/// schedules with different step counts.
template <typename T>
class UNet final : public TrainableScore<T> {
 public:
  UNet(UNetConfig config, std::uint64_t seed);
  UNet(UNetConfig config, std::vector<T> parameters);

  const UNetConfig& config() const { return config_; }
  std::size_t parameter_count() const { return params_.size(); }

  int channels() const override { return config_.in_channels; }
  std::span<const T> parameters() const override { return params_; }
  std::span<T> mutable_parameters() override { return params_; }

  ScoreEvaluation<T> evaluate(const Tensor<T>& x, std::span<const int> steps,
                              const NoiseSchedule& sched, bool record) const override;
  Tensor<T> input_vjp(const ScoreTape& tape, const Tensor<T>& grad_score) const override;
  void backward(const ScoreTape& tape, const Tensor<T>& grad_score, std::span<T> grad_params,
                Tensor<T>* grad_input) const override;

  template <typename U>
  UNet<U> cast() const {
    return UNet<U>(config_, std::vector<U>(params_.begin(), params_.end()));
  }

 private:
  struct ConvBlock {
    int cin = 0, cout = 0;
    std::size_t weight = 0, bias = 0, gamma = 0, beta = 0;
    bool timed = false;
    std::size_t time_weight = 0, time_bias = 0;
  };
  struct Level {
    ConvBlock first, second;
  };
  struct BlockTape {
    Tensor<T> input, conv, pre;
    kernels::GroupStats<T> stats;
  };
  struct Tape;

  std::size_t layout();
  ConvBlock make_block(int cin, int cout, bool timed, std::size_t& offset) const;
  std::span<const T> view(std::size_t offset, std::size_t n) const { return {params_.data() + offset, n}; }

  Tensor<T> block_forward(const ConvBlock& b, const Tensor<T>& x, const Tensor<T>& temb,
                          BlockTape* tape) const;
  Tensor<T> block_backward(const ConvBlock& b, const BlockTape& tape, const Tensor<T>& temb,
                           const Tensor<T>& dy, std::span<T> grads, Tensor<T>* dtemb) const;
  void backward_impl(const Tape& tape, const Tensor<T>& grad_score, std::span<T> grad_params,
                     Tensor<T>* grad_input) const;

  UNetConfig config_;
  std::vector<Level> down_;
  Level mid_;
  std::vector<Level> up_;
  std::size_t time_weight_ = 0, time_bias_ = 0;
  std::size_t out_weight_ = 0, out_bias_ = 0;
  std::vector<T> params_;
};

/// Sinusoidal embedding of the continuous time fraction (t/T scaled to 1000).
template <typename T>
void sinusoidal_embedding(double fraction, int dim, std::span<T> out);

}  // namespace fieldrecon
