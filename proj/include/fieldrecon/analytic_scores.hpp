#pragma once

#include <vector>

#include "fieldrecon/score_function.hpp"

namespace fieldrecon {

/// Exact score of the diffused prior x_0 ~ N(mu, I). Diffusion keeps the
/// covariance at I, so s_t(x) = -(x - sqrt(alpha_bar_t) mu).
template <typename T>
class GaussianPriorScore final : public ScoreFunction<T> {
 public:
  /// `mean` has one entry per element of a sample of `shape`; empty means zero.
  GaussianPriorScore(Shape shape, std::vector<double> mean = {});

  int channels() const override { return shape_.channels; }
  ScoreEvaluation<T> evaluate(const Tensor<T>& x, std::span<const int> steps, const NoiseSchedule& sched,
                              bool record) const override;
  Tensor<T> input_vjp(const ScoreTape& tape, const Tensor<T>& grad_score) const override;

  /// E[x_0 | x_t] = sqrt(ab) x_t + (1 - ab) mu, elementwise for one sample.
  std::vector<double> posterior_mean(std::span<const T> x_t, int t, const NoiseSchedule& sched) const;

 private:
  Shape shape_;
  std::vector<double> mean_;
};

/// Exact score of a diffused isotropic Gaussian mixture
/// x_0 ~ sum_k w_k N(m_k, v I) on a flat state of `dim` elements.
template <typename T>
class GaussianMixtureScore final : public ScoreFunction<T> {
 public:
  GaussianMixtureScore(std::vector<std::vector<double>> means, std::vector<double> weights, double variance);

  int dim() const { return dim_; }
  Shape shape() const { return Shape{1, 1, dim_}; }
  int channels() const override { return 1; }
  ScoreEvaluation<T> evaluate(const Tensor<T>& x, std::span<const int> steps, const NoiseSchedule& sched,
                              bool record) const override;
  Tensor<T> input_vjp(const ScoreTape& tape, const Tensor<T>& grad_score) const override;

 private:
  // Responsibilities and per-component scores at one point.
  void posterior_terms(const T* x, double ab, std::vector<double>& r, std::vector<double>& u) const;

  int dim_;
  std::vector<std::vector<double>> means_;
  std::vector<double> log_weights_;
  double variance_;
};

}  // namespace fieldrecon
