#include "fieldrecon/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace fieldrecon::kernels {

namespace {

template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MapCol = Eigen::Map<ColMat<T>>;
template <typename T>
using ConstMapCol = Eigen::Map<const ColMat<T>>;

template <typename T>
void im2col(const Tensor<T>& x, int n, T* cols, std::size_t ld, std::size_t col0) {
  const int cin = x.shape.channels, h = x.shape.height, w = x.shape.width;
  for (int ci = 0; ci < cin; ++ci) {
    const T* src = x.plane(n, ci);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + static_cast<std::size_t>(ci * 9 + ky * 3 + kx) * ld + col0;
        for (int r = 0; r < h; ++r) {
          const int sr = r + ky - 1;
          T* dst = row + static_cast<std::size_t>(r) * w;
          if (sr < 0 || sr >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* s = src + static_cast<std::size_t>(sr) * w;
          // Shifted row copy with a zero at the wrapped edge.
          if (kx == 0) {
            dst[0] = T(0);
            std::copy_n(s, w - 1, dst + 1);
          } else if (kx == 1) {
            std::copy_n(s, w, dst);
          } else {
            std::copy_n(s + 1, w - 1, dst);
            dst[w - 1] = T(0);
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3x3_forward_reference(const Tensor<T>& x, std::span<const T> weight,
                               std::span<const T> bias, int out_channels, Tensor<T>& y) {
  const int cin = x.shape.channels, h = x.shape.height, w = x.shape.width;
  y = Tensor<T>(x.batch, Shape{out_channels, h, w});
  for (int n = 0; n < x.batch; ++n)
    for (int co = 0; co < out_channels; ++co)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sr = r + ky - 1, sc = c + kx - 1;
                if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;
                acc += weight[((co * cin + ci) * 3 + ky) * 3 + kx] * x.plane(n, ci)[sr * w + sc];
              }
          y.plane(n, co)[r * w + c] = acc;
        }
}

template <typename T>
void conv3x3_backward_reference(const Tensor<T>& x, std::span<const T> weight, int out_channels,
                                const Tensor<T>& dy, Tensor<T>* dx, std::span<T> dweight,
                                std::span<T> dbias) {
  const int cin = x.shape.channels, h = x.shape.height, w = x.shape.width;
  if (dx) *dx = Tensor<T>(x.batch, x.shape);
  for (int n = 0; n < x.batch; ++n)
    for (int co = 0; co < out_channels; ++co)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const T g = dy.plane(n, co)[r * w + c];
          if (!dbias.empty()) dbias[co] += g;
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sr = r + ky - 1, sc = c + kx - 1;
                if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;
                const std::size_t wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                if (!dweight.empty()) dweight[wi] += g * x.plane(n, ci)[sr * w + sc];
                if (dx) dx->plane(n, ci)[sr * w + sc] += g * weight[wi];
              }
        }
}

// The GEMMs below are written in transposed form so that the pixel count is
// the long (row) dimension: a K x P row-major im2col buffer is a P x K
// column-major matrix, and a C x P row-major NCHW plane block is P x C
// column-major. Results therefore land directly in NCHW storage.
// Fixed-order reduction over eight interleaved lanes. Eigen's redux peels to
// the nearest aligned address, which makes the result depend on where the
// buffer was allocated.
template <typename T, typename F>
T lane_sum(std::size_t n, F term) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += term(i + l);
  for (; i < n; ++i) acc[i % 8] += term(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                     int out_channels, Tensor<T>& y) {
  const auto plane = static_cast<Eigen::Index>(x.shape.plane());
  const auto k = static_cast<Eigen::Index>(x.shape.channels) * 9;
  y = Tensor<T>(x.batch, Shape{out_channels, x.shape.height, x.shape.width});
  ConstMapCol<T> wt(weight.data(), k, out_channels);
#pragma omp parallel
  {
    std::vector<T> cols(static_cast<std::size_t>(k * plane));
#pragma omp for schedule(static)
    for (int n = 0; n < x.batch; ++n) {
      im2col(x, n, cols.data(), static_cast<std::size_t>(plane), 0);
      ConstMapCol<T> ct(cols.data(), plane, k);
      MapCol<T> yt(y.plane(n, 0), plane, out_channels);
      yt.noalias() = ct * wt;
      if (!bias.empty()) {
        for (int co = 0; co < out_channels; ++co) yt.col(co).array() += bias[co];
      }
    }
  }
}

template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> weight, int out_channels,
                      const Tensor<T>& dy, Tensor<T>* dx, std::span<T> dweight, std::span<T> dbias) {
  const auto plane = static_cast<Eigen::Index>(x.shape.plane());
  const auto k = static_cast<Eigen::Index>(x.shape.channels) * 9;
  if (dx) *dx = Tensor<T>(x.batch, x.shape);
  ConstMapCol<T> wt(weight.data(), k, out_channels);
  if (!dbias.empty() || !dweight.empty()) {
    // Serial over samples so the parameter-gradient reduction order is fixed.
    std::vector<T> cols(static_cast<std::size_t>(k * plane));
    for (int n = 0; n < x.batch; ++n) {
      ConstMapCol<T> gt(dy.plane(n, 0), plane, out_channels);
      if (!dbias.empty()) {
        for (int co = 0; co < out_channels; ++co) {
          const T* g = dy.plane(n, co);
          dbias[co] += lane_sum<T>(static_cast<std::size_t>(plane), [&](std::size_t i) { return g[i]; });
        }
      }
      if (!dweight.empty()) {
        im2col(x, n, cols.data(), static_cast<std::size_t>(plane), 0);
        ConstMapCol<T> ct(cols.data(), plane, k);
        MapCol<T> dwt(dweight.data(), k, out_channels);
        dwt.noalias() += ct.transpose() * gt;
      }
    }
  }
  if (!dx) return;
  // The input gradient is a same-padded convolution of dy with the kernel
  // flipped spatially and transposed over channels.
  const int cin = x.shape.channels;
  std::vector<T> flipped(weight.size());
  for (int co = 0; co < out_channels; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          flipped[((ci * out_channels + co) * 3 + ky) * 3 + kx] =
              weight[((co * cin + ci) * 3 + (2 - ky)) * 3 + (2 - kx)];
  conv3x3_forward(dy, std::span<const T>(flipped), std::span<const T>(), cin, *dx);
}

template <typename T>
void group_norm_forward_reference(const Tensor<T>& x, int groups, std::span<const T> gamma,
                                  std::span<const T> beta, Tensor<T>& y, GroupStats<T>& stats) {
  const int c = x.shape.channels, cpg = c / groups;
  const std::size_t plane = x.shape.plane();
  y = Tensor<T>(x.batch, x.shape);
  stats.mean.assign(static_cast<std::size_t>(x.batch) * groups, T(0));
  stats.rstd.assign(static_cast<std::size_t>(x.batch) * groups, T(0));
  for (int n = 0; n < x.batch; ++n)
    for (int g = 0; g < groups; ++g) {
      double sum = 0.0, sq = 0.0;
      const double count = static_cast<double>(cpg) * plane;
      for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch)
        for (std::size_t p = 0; p < plane; ++p) sum += x.plane(n, ch)[p];
      const double mean = sum / count;
      for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = x.plane(n, ch)[p] - mean;
          sq += d * d;
        }
      const double rstd = 1.0 / std::sqrt(sq / count + kGroupNormEps);
      stats.mean[n * groups + g] = static_cast<T>(mean);
      stats.rstd[n * groups + g] = static_cast<T>(rstd);
      for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch)
        for (std::size_t p = 0; p < plane; ++p)
          y.plane(n, ch)[p] = static_cast<T>((x.plane(n, ch)[p] - mean) * rstd) * gamma[ch] + beta[ch];
    }
}

template <typename T>
void group_norm_forward(const Tensor<T>& x, int groups, std::span<const T> gamma,
                        std::span<const T> beta, Tensor<T>& y, GroupStats<T>& stats) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const int c = x.shape.channels, cpg = c / groups;
  const auto plane = static_cast<Eigen::Index>(x.shape.plane());
  const Eigen::Index group_len = cpg * plane;
  y = Tensor<T>(x.batch, x.shape);
  stats.mean.assign(static_cast<std::size_t>(x.batch) * groups, T(0));
  stats.rstd.assign(static_cast<std::size_t>(x.batch) * groups, T(0));
  const int jobs = x.batch * groups;
#pragma omp parallel for schedule(static)
  for (int job = 0; job < jobs; ++job) {
    const int n = job / groups, g = job % groups;
    // Channels of a group are contiguous in NCHW.
    const T* src = x.plane(n, g * cpg);
    const auto len = static_cast<std::size_t>(group_len);
    const T mean = lane_sum<T>(len, [&](std::size_t i) { return src[i]; }) / static_cast<T>(len);
    const T var = lane_sum<T>(len, [&](std::size_t i) {
                    const T d = src[i] - mean;
                    return d * d;
                  }) / static_cast<T>(len);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kGroupNormEps));
    stats.mean[job] = mean;
    stats.rstd[job] = rstd;
    for (int j = 0; j < cpg; ++j) {
      const int ch = g * cpg + j;
      const T scale = rstd * gamma[ch];
      const T shift = beta[ch] - mean * scale;
      Eigen::Map<const Arr> s(x.plane(n, ch), plane);
      Eigen::Map<Arr> d(y.plane(n, ch), plane);
      d = s * scale + shift;
    }
  }
}

template <typename T>
void group_norm_backward(const Tensor<T>& x, int groups, std::span<const T> gamma,
                         const GroupStats<T>& stats, const Tensor<T>& dy, Tensor<T>& dx,
                         std::span<T> dgamma, std::span<T> dbeta) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const int c = x.shape.channels, cpg = c / groups;
  const auto plane = static_cast<Eigen::Index>(x.shape.plane());
  const T count = static_cast<T>(cpg * plane);
  const auto plane_n = static_cast<std::size_t>(plane);
  dx = Tensor<T>(x.batch, x.shape);
  // Parameter gradients are reduced serially in sample order for determinism.
  if (!dgamma.empty()) {
    for (int n = 0; n < x.batch; ++n)
      for (int ch = 0; ch < c; ++ch) {
        const int job = n * groups + ch / cpg;
        const T* xs = x.plane(n, ch);
        const T* g = dy.plane(n, ch);
        const T m = stats.mean[job];
        dgamma[ch] += lane_sum<T>(plane_n, [&](std::size_t i) { return g[i] * (xs[i] - m); }) * stats.rstd[job];
        dbeta[ch] += lane_sum<T>(plane_n, [&](std::size_t i) { return g[i]; });
      }
  }
  const int jobs = x.batch * groups;
#pragma omp parallel for schedule(static)
  for (int job = 0; job < jobs; ++job) {
    const int n = job / groups, g = job % groups;
    const T mean = stats.mean[job], rstd = stats.rstd[job];
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
      const T* xs = x.plane(n, ch);
      const T* gy = dy.plane(n, ch);
      sum_dxhat += lane_sum<T>(plane_n, [&](std::size_t i) { return gy[i]; }) * gamma[ch];
      sum_dxhat_xhat += lane_sum<T>(plane_n, [&](std::size_t i) { return gy[i] * (xs[i] - mean); }) * gamma[ch] * rstd;
    }
    const T a = sum_dxhat / count, b = sum_dxhat_xhat / count;
    for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
      Eigen::Map<const Arr> xs(x.plane(n, ch), plane), gy(dy.plane(n, ch), plane);
      Eigen::Map<Arr> out(dx.plane(n, ch), plane);
      out = rstd * (gy * gamma[ch] - a - (xs - mean) * (rstd * b));
    }
  }
}

template <typename T>
void silu_forward(const Tensor<T>& x, Tensor<T>& y) {
  y = Tensor<T>(x.batch, x.shape);
  // Scalar exp on every element: Eigen's packet exp differs from std::exp in
  // the last bit, and which elements take which path depends on alignment.
  const std::size_t n = x.data.size();
  for (std::size_t i = 0; i < n; ++i) y.data[i] = x.data[i] / (T(1) + std::exp(-x.data[i]));
}

template <typename T>
void silu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
  dx = Tensor<T>(x.batch, x.shape);
  const std::size_t n = x.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T xi = x.data[i];
    const T sig = T(1) / (T(1) + std::exp(-xi));
    dx.data[i] = dy.data[i] * sig * (T(1) + xi * (T(1) - sig));
  }
}

template <typename T>
void avg_pool2_forward(const Tensor<T>& x, Tensor<T>& y) {
  const int h = x.shape.height / 2, w = x.shape.width / 2;
  y = Tensor<T>(x.batch, Shape{x.shape.channels, h, w});
  const int planes = x.batch * x.shape.channels;
#pragma omp parallel for schedule(static)
  for (int pi = 0; pi < planes; ++pi) {
    const T* s = x.data.data() + static_cast<std::size_t>(pi) * x.shape.plane();
    T* d = y.data.data() + static_cast<std::size_t>(pi) * y.shape.plane();
    const int sw = x.shape.width;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        d[r * w + c] = T(0.25) * (s[2 * r * sw + 2 * c] + s[2 * r * sw + 2 * c + 1] +
                                  s[(2 * r + 1) * sw + 2 * c] + s[(2 * r + 1) * sw + 2 * c + 1]);
  }
}

template <typename T>
void avg_pool2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const int h = dy.shape.height, w = dy.shape.width;
  dx = Tensor<T>(dy.batch, Shape{dy.shape.channels, 2 * h, 2 * w});
  const int planes = dy.batch * dy.shape.channels;
#pragma omp parallel for schedule(static)
  for (int pi = 0; pi < planes; ++pi) {
    const T* s = dy.data.data() + static_cast<std::size_t>(pi) * dy.shape.plane();
    T* d = dx.data.data() + static_cast<std::size_t>(pi) * dx.shape.plane();
    for (int r = 0; r < 2 * h; ++r)
      for (int c = 0; c < 2 * w; ++c) d[r * 2 * w + c] = T(0.25) * s[(r / 2) * w + c / 2];
  }
}

template <typename T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y) {
  const int h = x.shape.height, w = x.shape.width;
  y = Tensor<T>(x.batch, Shape{x.shape.channels, 2 * h, 2 * w});
  const int planes = x.batch * x.shape.channels;
#pragma omp parallel for schedule(static)
  for (int pi = 0; pi < planes; ++pi) {
    const T* s = x.data.data() + static_cast<std::size_t>(pi) * x.shape.plane();
    T* d = y.data.data() + static_cast<std::size_t>(pi) * y.shape.plane();
    for (int r = 0; r < 2 * h; ++r)
      for (int c = 0; c < 2 * w; ++c) d[r * 2 * w + c] = s[(r / 2) * w + c / 2];
  }
}

template <typename T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const int h = dy.shape.height / 2, w = dy.shape.width / 2;
  dx = Tensor<T>(dy.batch, Shape{dy.shape.channels, h, w});
  const int planes = dy.batch * dy.shape.channels;
#pragma omp parallel for schedule(static)
  for (int pi = 0; pi < planes; ++pi) {
    const T* s = dy.data.data() + static_cast<std::size_t>(pi) * dy.shape.plane();
    T* d = dx.data.data() + static_cast<std::size_t>(pi) * dx.shape.plane();
    const int sw = dy.shape.width;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        d[r * w + c] = s[2 * r * sw + 2 * c] + s[2 * r * sw + 2 * c + 1] +
                       s[(2 * r + 1) * sw + 2 * c] + s[(2 * r + 1) * sw + 2 * c + 1];
  }
}

template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  if (a.batch != b.batch || a.shape.height != b.shape.height || a.shape.width != b.shape.width) {
    throw ShapeError("concat_channels: spatial/batch mismatch");
  }
  y = Tensor<T>(a.batch, Shape{a.shape.channels + b.shape.channels, a.shape.height, a.shape.width});
  for (int n = 0; n < a.batch; ++n) {
    std::ranges::copy(a.sample(n), y.sample(n).begin());
    std::ranges::copy(b.sample(n), y.sample(n).begin() + static_cast<std::ptrdiff_t>(a.sample_size()));
  }
}

template <typename T>
void split_channels(const Tensor<T>& dy, int a_channels, Tensor<T>& da, Tensor<T>& db) {
  const Shape sa{a_channels, dy.shape.height, dy.shape.width};
  const Shape sb{dy.shape.channels - a_channels, dy.shape.height, dy.shape.width};
  da = Tensor<T>(dy.batch, sa);
  db = Tensor<T>(dy.batch, sb);
  for (int n = 0; n < dy.batch; ++n) {
    const auto src = dy.sample(n);
    std::copy_n(src.begin(), sa.size(), da.sample(n).begin());
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(sa.size()), sb.size(), db.sample(n).begin());
  }
}

template <typename T>
void pad_spatial(const Tensor<T>& x, int height, int width, Tensor<T>& y) {
  y = Tensor<T>(x.batch, Shape{x.shape.channels, height, width});
  for (int n = 0; n < x.batch; ++n)
    for (int c = 0; c < x.shape.channels; ++c)
      for (int r = 0; r < x.shape.height; ++r)
        std::copy_n(x.plane(n, c) + r * x.shape.width, x.shape.width, y.plane(n, c) + r * width);
}

template <typename T>
void crop_spatial(const Tensor<T>& x, int height, int width, Tensor<T>& y) {
  y = Tensor<T>(x.batch, Shape{x.shape.channels, height, width});
  for (int n = 0; n < x.batch; ++n)
    for (int c = 0; c < x.shape.channels; ++c)
      for (int r = 0; r < height; ++r)
        std::copy_n(x.plane(n, c) + r * x.shape.width, width, y.plane(n, c) + r * width);
}

#define FIELDRECON_INSTANTIATE(T)                                                                  \
  template void conv3x3_forward_reference<T>(const Tensor<T>&, std::span<const T>,                 \
                                             std::span<const T>, int, Tensor<T>&);                 \
  template void conv3x3_backward_reference<T>(const Tensor<T>&, std::span<const T>, int,           \
                                              const Tensor<T>&, Tensor<T>*, std::span<T>,          \
                                              std::span<T>);                                       \
  template void conv3x3_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, int,  \
                                   Tensor<T>&);                                                    \
  template void conv3x3_backward<T>(const Tensor<T>&, std::span<const T>, int, const Tensor<T>&,   \
                                    Tensor<T>*, std::span<T>, std::span<T>);                       \
  template void group_norm_forward_reference<T>(const Tensor<T>&, int, std::span<const T>,         \
                                                std::span<const T>, Tensor<T>&, GroupStats<T>&);   \
  template void group_norm_forward<T>(const Tensor<T>&, int, std::span<const T>,                   \
                                      std::span<const T>, Tensor<T>&, GroupStats<T>&);             \
  template void group_norm_backward<T>(const Tensor<T>&, int, std::span<const T>,                  \
                                       const GroupStats<T>&, const Tensor<T>&, Tensor<T>&,         \
                                       std::span<T>, std::span<T>);                                \
  template void silu_forward<T>(const Tensor<T>&, Tensor<T>&);                                     \
  template void silu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                  \
  template void avg_pool2_forward<T>(const Tensor<T>&, Tensor<T>&);                                \
  template void avg_pool2_backward<T>(const Tensor<T>&, Tensor<T>&);                               \
  template void upsample2_forward<T>(const Tensor<T>&, Tensor<T>&);                                \
  template void upsample2_backward<T>(const Tensor<T>&, Tensor<T>&);                               \
  template void concat_channels<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);                  \
  template void pad_spatial<T>(const Tensor<T>&, int, int, Tensor<T>&);                            \
  template void crop_spatial<T>(const Tensor<T>&, int, int, Tensor<T>&);

FIELDRECON_INSTANTIATE(float)
FIELDRECON_INSTANTIATE(double)

#undef FIELDRECON_INSTANTIATE

}  // namespace fieldrecon::kernels
