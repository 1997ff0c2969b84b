#pragma once

// Dense NCHW kernels used by the score network.
//
// Every heavy kernel has two implementations: a plain serial loop nest
// (`*_reference`) that is kept as the test oracle, and the production path
// that batches work into GEMMs and parallelises the per-sample loops with
// OpenMP. Backward kernels assign the input gradient and *accumulate* into
// parameter gradients.

#include <span>
#include <vector>

#include "fieldrecon/tensor.hpp"

namespace fieldrecon::kernels {

// 3x3 convolution, stride 1, zero padding 1. Weights are [cout][cin][3][3].
template <typename T>
void conv3x3_forward_reference(const Tensor<T>& x, std::span<const T> weight,
                               std::span<const T> bias, int out_channels, Tensor<T>& y);
template <typename T>
void conv3x3_backward_reference(const Tensor<T>& x, std::span<const T> weight, int out_channels,
                                const Tensor<T>& dy, Tensor<T>* dx, std::span<T> dweight,
                                std::span<T> dbias);

template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                     int out_channels, Tensor<T>& y);
/// `dx` may be null; `dweight`/`dbias` may be empty to skip parameter gradients.
template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> weight, int out_channels,
                      const Tensor<T>& dy, Tensor<T>* dx, std::span<T> dweight, std::span<T> dbias);

/// Per-(sample, group) statistics saved by the forward pass.
template <typename T>
struct GroupStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <typename T>
void group_norm_forward_reference(const Tensor<T>& x, int groups, std::span<const T> gamma,
                                  std::span<const T> beta, Tensor<T>& y, GroupStats<T>& stats);
template <typename T>
void group_norm_forward(const Tensor<T>& x, int groups, std::span<const T> gamma,
                        std::span<const T> beta, Tensor<T>& y, GroupStats<T>& stats);
template <typename T>
void group_norm_backward(const Tensor<T>& x, int groups, std::span<const T> gamma,
                         const GroupStats<T>& stats, const Tensor<T>& dy, Tensor<T>& dx,
                         std::span<T> dgamma, std::span<T> dbeta);

inline constexpr double kGroupNormEps = 1e-5;

template <typename T>
void silu_forward(const Tensor<T>& x, Tensor<T>& y);
/// dx = dy * silu'(x)
template <typename T>
void silu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx);

/// 2x2 average pooling; H and W must be even.
template <typename T>
void avg_pool2_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void avg_pool2_backward(const Tensor<T>& dy, Tensor<T>& dx);

/// Nearest-neighbour 2x upsampling.
template <typename T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx);

/// Channel concatenation [a; b] and its adjoint.
template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
template <typename T>
void split_channels(const Tensor<T>& dy, int a_channels, Tensor<T>& da, Tensor<T>& db);

/// Zero-pads spatial extents at the bottom/right, and the adjoint crop.
template <typename T>
void pad_spatial(const Tensor<T>& x, int height, int width, Tensor<T>& y);
template <typename T>
void crop_spatial(const Tensor<T>& x, int height, int width, Tensor<T>& y);

}  // namespace fieldrecon::kernels
