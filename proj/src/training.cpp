#include "fieldrecon/training.hpp"

#include <cmath>
#include <numeric>

namespace fieldrecon {

template <typename T>
DsmResult<T> dsm_loss(const TrainableScore<T>& net, const Tensor<T>& x0, const NoiseSchedule& sched,
                      Rng& rng, LossWeighting weighting) {
  if (x0.batch < 1) throw ParameterError("dsm_loss needs a nonempty batch");
  const int n = x0.batch;
  const std::size_t len = x0.sample_size();
  Tensor<T> xt(n, x0.shape), target(n, x0.shape);
  std::vector<int> steps(n);
  std::vector<T> z(len);
  for (int i = 0; i < n; ++i) {
    steps[i] = static_cast<int>(rng.uniform_int(1, sched.steps));
    rng.fill_normal<T>(z);
    const double ab = sched.alpha_bar_at(steps[i]);
    sample_xt_given_x0<T>(x0.sample(i), steps[i], sched, z, xt.sample(i));
    const T keep = static_cast<T>(std::sqrt(ab));
    const T inv_var = static_cast<T>(1.0 / (1.0 - ab));
    auto tgt = target.sample(i);
    const auto x = x0.sample(i);
    const auto noisy = xt.sample(i);
    for (std::size_t k = 0; k < len; ++k) tgt[k] = -(noisy[k] - keep * x[k]) * inv_var;
  }
  auto eval = net.evaluate(xt, steps, sched, true);
  const double count = static_cast<double>(n) * len;
  DsmResult<T> out;
  Tensor<T> grad_score(n, x0.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = weighting == LossWeighting::none ? 1.0 : 1.0 - sched.alpha_bar_at(steps[i]);
    const auto s = eval.score.sample(i);
    const auto tgt = target.sample(i);
    auto g = grad_score.sample(i);
    for (std::size_t k = 0; k < len; ++k) {
      const double r = static_cast<double>(s[k]) - tgt[k];
      total += w * r * r;
      g[k] = static_cast<T>(2.0 * w * r / count);
    }
  }
  out.loss = total / count;
  out.grad.assign(net.parameters().size(), T(0));
  net.backward(*eval.tape, grad_score, out.grad, nullptr);
  return out;
}

template <typename T>
void Adam<T>::step(std::span<T> params, std::span<const T> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("Adam size mismatch");
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g * g;
    const double mhat = m_[i] / c1, vhat = v_[i] / c2;
    params[i] -= static_cast<T>(options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon));
  }
}

std::vector<double> fit_score(UNet<float>& net, std::span<const Field> dataset, const NoiseSchedule& sched,
                              const ScoreTrainOptions& options) {
  if (dataset.empty()) throw ParameterError("training set is empty");
  if (options.epochs < 0 || options.batch_size < 1) throw ParameterError("invalid epochs/batch size");
  Adam<float> adam(net.parameter_count(), AdamOptions{.learning_rate = options.learning_rate});
  Rng shuffle_rng = Rng::substream(options.seed, 0);
  Rng noise_rng = Rng::substream(options.seed, 1);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> trace;
  std::vector<Field> batch;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(dataset[order[i]]);
      const auto x0 = to_tensor<float>(std::span<const Field>(batch));
      auto result = dsm_loss<float>(net, x0, sched, noise_rng, options.weighting);
      if (!std::isfinite(result.loss)) throw TrainingError("non-finite score-matching loss", adam.steps());
      adam.step(net.mutable_parameters(), result.grad);
      trace.push_back(result.loss);
      epoch_loss += result.loss;
      ++batches;
    }
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss / std::max(batches, 1));
  }
  return trace;
}

ScoreTrainResult train_score(std::span<const Field> dataset, const NoiseSchedule& sched,
                             const UNetConfig& config, const ScoreTrainOptions& options) {
  if (dataset.empty()) throw ParameterError("training set is empty");
  if (dataset.front().shape.channels != config.in_channels) {
    throw ShapeError("dataset channel count does not match network");
  }
  UNet<float> net(config, Rng::derive_seed(options.seed, 2));
  auto trace = fit_score(net, dataset, sched, options);
  return {std::move(net), std::move(trace)};
}

template DsmResult<float> dsm_loss<float>(const TrainableScore<float>&, const Tensor<float>&,
                                          const NoiseSchedule&, Rng&, LossWeighting);
template DsmResult<double> dsm_loss<double>(const TrainableScore<double>&, const Tensor<double>&,
                                            const NoiseSchedule&, Rng&, LossWeighting);
template class Adam<float>;
template class Adam<double>;

}  // namespace fieldrecon
