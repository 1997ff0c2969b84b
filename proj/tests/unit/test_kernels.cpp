#include <gtest/gtest.h>

#include <cmath>

#include "fieldrecon/kernels.hpp"
#include "fieldrecon/rng.hpp"
#include "test_util.hpp"

using namespace fieldrecon;
namespace k = fieldrecon::kernels;

namespace {

template <typename T>
Tensor<T> random_tensor(int n, Shape s, std::uint64_t seed) {
  Tensor<T> t(n, s);
  Rng(seed).fill_normal<T>(t.data);
  return t;
}

template <typename T>
std::vector<T> random_values(std::size_t n, std::uint64_t seed) {
  std::vector<T> v(n);
  Rng(seed).fill_normal<T>(v);
  return v;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Conv3x3, ParallelMatchesReference) {
  for (auto [n, cin, cout, h, w] : {std::array{1, 1, 1, 1, 1}, std::array{2, 3, 4, 5, 7}, std::array{3, 8, 16, 10, 6}}) {
    const auto x = random_tensor<double>(n, Shape{cin, h, w}, 1);
    const auto wt = random_values<double>(static_cast<std::size_t>(cout) * cin * 9, 2);
    const auto b = random_values<double>(cout, 3);
    Tensor<double> y, yr;
    k::conv3x3_forward<double>(x, wt, b, cout, y);
    k::conv3x3_forward_reference<double>(x, wt, b, cout, yr);
    ASSERT_EQ(y.data.size(), yr.data.size());
    EXPECT_LT(max_abs_diff(y.data, yr.data), 1e-12);

    const auto dy = random_tensor<double>(n, Shape{cout, h, w}, 4);
    Tensor<double> dx, dxr;
    std::vector<double> dw(wt.size()), dwr(wt.size()), db(cout), dbr(cout);
    k::conv3x3_backward<double>(x, wt, cout, dy, &dx, dw, db);
    k::conv3x3_backward_reference<double>(x, wt, cout, dy, &dxr, dwr, dbr);
    EXPECT_LT(max_abs_diff(dx.data, dxr.data), 1e-12);
    EXPECT_LT(max_abs_diff(dw, dwr), 1e-12);
    EXPECT_LT(max_abs_diff(db, dbr), 1e-12);
  }
}

TEST(Conv3x3, BackwardIsAdjointOfForward) {
  const auto x = random_tensor<double>(2, Shape{3, 6, 5}, 5);
  const auto wt = random_values<double>(4 * 3 * 9, 6);
  const auto dy = random_tensor<double>(2, Shape{4, 6, 5}, 7);
  Tensor<double> y, dx;
  k::conv3x3_forward<double>(x, wt, {}, 4, y);
  k::conv3x3_backward<double>(x, wt, 4, dy, &dx, {}, {});
  EXPECT_NEAR(check::dot(y.data, dy.data), check::dot(x.data, dx.data), 1e-10);
}

TEST(Conv3x3, WeightGradientMatchesFiniteDifferences) {
  const auto x = random_tensor<double>(2, Shape{2, 4, 3}, 8);
  const auto dy = random_tensor<double>(2, Shape{3, 4, 3}, 9);
  const auto wt = random_values<double>(3 * 2 * 9, 10);
  std::vector<double> dw(wt.size()), db(3);
  k::conv3x3_backward<double>(x, wt, 3, dy, nullptr, dw, db);
  const auto fd = check::numeric_gradient(
      [&](std::span<const double> w) {
        Tensor<double> y;
        k::conv3x3_forward<double>(x, w, {}, 3, y);
        return check::dot(y.data, dy.data);
      },
      wt);
  EXPECT_LT(check::relative_error(dw, fd), 1e-7);
}

TEST(GroupNorm, ParallelMatchesReference) {
  const auto x = random_tensor<double>(3, Shape{8, 5, 4}, 11);
  const auto gamma = random_values<double>(8, 12), beta = random_values<double>(8, 13);
  Tensor<double> y, yr;
  k::GroupStats<double> s, sr;
  k::group_norm_forward<double>(x, 4, gamma, beta, y, s);
  k::group_norm_forward_reference<double>(x, 4, gamma, beta, yr, sr);
  EXPECT_LT(max_abs_diff(y.data, yr.data), 1e-12);
  EXPECT_LT(max_abs_diff(s.mean, sr.mean), 1e-12);
  EXPECT_LT(max_abs_diff(s.rstd, sr.rstd), 1e-12);
}

TEST(GroupNorm, NormalizesEachGroup) {
  const auto x = random_tensor<double>(2, Shape{4, 3, 3}, 14);
  const std::vector<double> gamma(4, 1.0), beta(4, 0.0);
  Tensor<double> y;
  k::GroupStats<double> s;
  k::group_norm_forward<double>(x, 2, gamma, beta, y, s);
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      double sum = 0, sq = 0;
      for (int c = 2 * g; c < 2 * g + 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const double v = y.plane(n, c)[i];
          sum += v;
          sq += v * v;
        }
      EXPECT_NEAR(sum / 18, 0.0, 1e-12);
      EXPECT_NEAR(sq / 18, 1.0, 1e-3);
    }
}

TEST(GroupNorm, BackwardMatchesFiniteDifferences) {
  const auto x = random_tensor<double>(2, Shape{4, 3, 2}, 15);
  const auto gamma = random_values<double>(4, 16), beta = random_values<double>(4, 17);
  const auto dy = random_tensor<double>(2, Shape{4, 3, 2}, 18);
  Tensor<double> y, dx;
  k::GroupStats<double> s;
  k::group_norm_forward<double>(x, 2, gamma, beta, y, s);
  std::vector<double> dg(4), db(4);
  k::group_norm_backward<double>(x, 2, gamma, s, dy, dx, dg, db);
  auto loss_x = [&](std::span<const double> v) {
    Tensor<double> xx = x, yy;
    std::copy(v.begin(), v.end(), xx.data.begin());
    k::GroupStats<double> st;
    k::group_norm_forward<double>(xx, 2, gamma, beta, yy, st);
    return check::dot(yy.data, dy.data);
  };
  EXPECT_LT(check::relative_error(dx.data, check::numeric_gradient(loss_x, x.data)), 1e-6);
  auto loss_g = [&](std::span<const double> g) {
    Tensor<double> yy;
    k::GroupStats<double> st;
    k::group_norm_forward<double>(x, 2, g, beta, yy, st);
    return check::dot(yy.data, dy.data);
  };
  EXPECT_LT(check::relative_error(dg, check::numeric_gradient(loss_g, gamma)), 1e-6);
}

TEST(Silu, ValuesAndDerivative) {
  Tensor<double> x(1, Shape{1, 1, 3});
  x.data = {-2.0, 0.0, 1.5};
  Tensor<double> y, dx;
  k::silu_forward<double>(x, y);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.data[i], x.data[i] / (1 + std::exp(-x.data[i])), 1e-14);
  Tensor<double> ones(1, Shape{1, 1, 3}, 1.0);
  k::silu_backward<double>(x, ones, dx);
  for (int i = 0; i < 3; ++i) {
    const double h = 1e-6, a = x.data[i];
    const double fd = ((a + h) / (1 + std::exp(-(a + h))) - (a - h) / (1 + std::exp(-(a - h)))) / (2 * h);
    EXPECT_NEAR(dx.data[i], fd, 1e-8);
  }
}

TEST(PoolUpsample, ValuesAndAdjoints) {
  const auto x = random_tensor<double>(2, Shape{3, 4, 6}, 19);
  Tensor<double> p;
  k::avg_pool2_forward<double>(x, p);
  ASSERT_EQ(p.shape, (Shape{3, 2, 3}));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
          const double* src = x.plane(n, c);
          const double want = (src[(2 * i) * 6 + 2 * j] + src[(2 * i) * 6 + 2 * j + 1] + src[(2 * i + 1) * 6 + 2 * j] +
                               src[(2 * i + 1) * 6 + 2 * j + 1]) / 4;
          EXPECT_NEAR(p.plane(n, c)[i * 3 + j], want, 1e-14);
        }
  const auto dp = random_tensor<double>(2, Shape{3, 2, 3}, 20);
  Tensor<double> dx;
  k::avg_pool2_backward<double>(dp, dx);
  EXPECT_NEAR(check::dot(p.data, dp.data), check::dot(x.data, dx.data), 1e-12);

  Tensor<double> u, du;
  k::upsample2_forward<double>(dp, u);
  ASSERT_EQ(u.shape, (Shape{3, 4, 6}));
  EXPECT_EQ(u.plane(1, 2)[3 * 6 + 5], dp.plane(1, 2)[1 * 3 + 2]);
  k::upsample2_backward<double>(x, du);
  EXPECT_NEAR(check::dot(u.data, x.data), check::dot(dp.data, du.data), 1e-12);
}

TEST(ConcatSplit, RoundTrip) {
  const auto a = random_tensor<double>(2, Shape{2, 3, 3}, 21);
  const auto b = random_tensor<double>(2, Shape{3, 3, 3}, 22);
  Tensor<double> cat, da, db;
  k::concat_channels<double>(a, b, cat);
  ASSERT_EQ(cat.shape.channels, 5);
  EXPECT_EQ(cat.plane(1, 2)[4], b.plane(1, 0)[4]);
  k::split_channels<double>(cat, 2, da, db);
  EXPECT_EQ(da.data, a.data);
  EXPECT_EQ(db.data, b.data);
}

TEST(PadCrop, ZeroPadAndCropBack) {
  const auto x = random_tensor<double>(2, Shape{2, 38, 24}, 23);
  Tensor<double> p, c;
  k::pad_spatial<double>(x, 40, 24, p);
  ASSERT_EQ(p.shape, (Shape{2, 40, 24}));
  for (int j = 0; j < 24; ++j) {
    EXPECT_EQ(p.plane(1, 1)[38 * 24 + j], 0.0);
    EXPECT_EQ(p.plane(1, 1)[39 * 24 + j], 0.0);
  }
  k::crop_spatial<double>(p, 38, 24, c);
  EXPECT_EQ(c.data, x.data);
}
