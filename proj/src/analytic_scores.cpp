#include "fieldrecon/analytic_scores.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fieldrecon {

namespace {

struct StepTape final : ScoreTape {
  int batch = 0;
  Shape shape;
  std::vector<double> alpha_bar;
  std::vector<double> x;
};

}  // namespace

template <typename T>
GaussianPriorScore<T>::GaussianPriorScore(Shape shape, std::vector<double> mean)
    : shape_(shape), mean_(std::move(mean)) {
  if (mean_.empty()) mean_.assign(shape.size(), 0.0);
  if (mean_.size() != shape.size()) throw ShapeError("prior mean does not match shape " + shape.str());
}

template <typename T>
ScoreEvaluation<T> GaussianPriorScore<T>::evaluate(const Tensor<T>& x, std::span<const int> steps,
                                                   const NoiseSchedule& sched, bool record) const {
  if (!(x.shape == shape_)) throw ShapeError("Gaussian prior score expects " + shape_.str());
  if (static_cast<int>(steps.size()) != x.batch) throw ShapeError("one step index per batch item required");
  ScoreEvaluation<T> out{Tensor<T>(x.batch, x.shape), nullptr};
  for (int n = 0; n < x.batch; ++n) {
    const double k = std::sqrt(sched.alpha_bar_at(steps[n]));
    const auto xs = x.sample(n);
    auto s = out.score.sample(n);
    for (std::size_t i = 0; i < xs.size(); ++i) s[i] = static_cast<T>(-(xs[i] - k * mean_[i]));
  }
  if (record) out.tape = std::make_unique<StepTape>();
  return out;
}

template <typename T>
Tensor<T> GaussianPriorScore<T>::input_vjp(const ScoreTape&, const Tensor<T>& grad_score) const {
  Tensor<T> out(grad_score.batch, grad_score.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = -grad_score.data[i];
  return out;
}

template <typename T>
std::vector<double> GaussianPriorScore<T>::posterior_mean(std::span<const T> x_t, int t,
                                                          const NoiseSchedule& sched) const {
  if (x_t.size() != mean_.size()) throw ShapeError("posterior_mean operand size");
  const double ab = sched.alpha_bar_at(t);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(ab) * x_t[i] + (1.0 - ab) * mean_[i];
  return out;
}

template <typename T>
GaussianMixtureScore<T>::GaussianMixtureScore(std::vector<std::vector<double>> means, std::vector<double> weights,
                                              double variance)
    : means_(std::move(means)), variance_(variance) {
  if (means_.empty()) throw ParameterError("mixture needs at least one component");
  if (weights.empty()) weights.assign(means_.size(), 1.0);
  if (weights.size() != means_.size()) throw ShapeError("one weight per mixture component required");
  if (!(variance_ >= 0.0)) throw ParameterError("mixture variance must be >= 0");
  dim_ = static_cast<int>(means_.front().size());
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw ParameterError("mixture weights must be positive");
    total += w;
  }
  for (const auto& m : means_) {
    if (static_cast<int>(m.size()) != dim_) throw ShapeError("mixture means differ in dimension");
  }
  for (double w : weights) log_weights_.push_back(std::log(w / total));
}

template <typename T>
void GaussianMixtureScore<T>::posterior_terms(const T* x, double ab, std::vector<double>& r,
                                              std::vector<double>& u) const {
  const std::size_t k = means_.size();
  const double var = ab * variance_ + (1.0 - ab);
  const double sab = std::sqrt(ab);
  r.assign(k, 0.0);
  u.assign(k * dim_, 0.0);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    double sq = 0.0;
    for (int i = 0; i < dim_; ++i) {
      const double d = x[i] - sab * means_[c][i];
      sq += d * d;
      u[c * dim_ + i] = -d / var;
    }
    r[c] = log_weights_[c] - 0.5 * sq / var;
    best = std::max(best, r[c]);
  }
  double z = 0.0;
  for (auto& v : r) z += (v = std::exp(v - best));
  for (auto& v : r) v /= z;
}

template <typename T>
ScoreEvaluation<T> GaussianMixtureScore<T>::evaluate(const Tensor<T>& x, std::span<const int> steps,
                                                     const NoiseSchedule& sched, bool record) const {
  if (static_cast<int>(x.sample_size()) != dim_) throw ShapeError("mixture score expects " + std::to_string(dim_) + " elements");
  if (static_cast<int>(steps.size()) != x.batch) throw ShapeError("one step index per batch item required");
  ScoreEvaluation<T> out{Tensor<T>(x.batch, x.shape), nullptr};
  std::unique_ptr<StepTape> tape;
  if (record) {
    tape = std::make_unique<StepTape>();
    tape->batch = x.batch;
    tape->shape = x.shape;
    tape->x.assign(x.data.begin(), x.data.end());
  }
  std::vector<double> r, u;
  for (int n = 0; n < x.batch; ++n) {
    const double ab = sched.alpha_bar_at(steps[n]);
    if (tape) tape->alpha_bar.push_back(ab);
    posterior_terms(x.sample(n).data(), ab, r, u);
    auto s = out.score.sample(n);
    for (int i = 0; i < dim_; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < r.size(); ++c) acc += r[c] * u[c * dim_ + i];
      s[i] = static_cast<T>(acc);
    }
  }
  out.tape = std::move(tape);
  return out;
}

// J = -I / var + sum_k r_k u_k u_k^T - s s^T with s = sum_k r_k u_k (symmetric).
template <typename T>
Tensor<T> GaussianMixtureScore<T>::input_vjp(const ScoreTape& base, const Tensor<T>& grad_score) const {
  const auto* tape = dynamic_cast<const StepTape*>(&base);
  if (!tape || tape->x.size() != grad_score.data.size()) throw ParameterError("tape does not belong to this evaluation");
  Tensor<T> out(grad_score.batch, grad_score.shape);
  std::vector<double> r, u, s(static_cast<std::size_t>(dim_));
  std::vector<T> xt(static_cast<std::size_t>(dim_));
  for (int n = 0; n < grad_score.batch; ++n) {
    const double ab = tape->alpha_bar[n];
    const double var = ab * variance_ + (1.0 - ab);
    for (int i = 0; i < dim_; ++i) xt[i] = static_cast<T>(tape->x[n * dim_ + i]);
    posterior_terms(xt.data(), ab, r, u);
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t c = 0; c < r.size(); ++c)
      for (int i = 0; i < dim_; ++i) s[i] += r[c] * u[c * dim_ + i];
    const auto g = grad_score.sample(n);
    double sg = 0.0;
    for (int i = 0; i < dim_; ++i) sg += s[i] * g[i];
    auto o = out.sample(n);
    for (int i = 0; i < dim_; ++i) o[i] = static_cast<T>(-g[i] / var - s[i] * sg);
    for (std::size_t c = 0; c < r.size(); ++c) {
      double ug = 0.0;
      for (int i = 0; i < dim_; ++i) ug += u[c * dim_ + i] * g[i];
      for (int i = 0; i < dim_; ++i) o[i] += static_cast<T>(r[c] * u[c * dim_ + i] * ug);
    }
  }
  return out;
}

template class GaussianPriorScore<float>;
template class GaussianPriorScore<double>;
template class GaussianMixtureScore<float>;
template class GaussianMixtureScore<double>;

}  // namespace fieldrecon
