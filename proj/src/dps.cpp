#include "fieldrecon/dps.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fieldrecon/rng.hpp"

namespace fieldrecon {

template <typename T>
double MeasurementChannel<T>::precision() const {
  return sigma > 0.0 ? 1.0 / (sigma * sigma) : std::numeric_limits<double>::infinity();
}

template <typename T>
void MeasurementChannel<T>::validate(const Shape& field) const {
  if (!op) throw ConfigError("measurement channel '" + name + "' has no forward model");
  if (!(op->input_shape() == field)) {
    throw ShapeError("forward model expects " + op->input_shape().str() + " fields, sampler produces " +
                     field.str());
  }
  if (static_cast<int>(y.size()) != op->output_size()) {
    throw ShapeError("channel '" + name + "' has " + std::to_string(y.size()) + " readings, forward model gives " +
                     std::to_string(op->output_size()));
  }
  if (!std::isfinite(zeta) || zeta < 0.0) throw ParameterError("guidance weight must be finite and >= 0");
  if (!(sigma >= 0.0)) throw ParameterError("noise level must be >= 0");
}

double channel_zeta(double base, double sigma, ZetaRule rule) {
  switch (rule) {
    case ZetaRule::identical:
      return base;
    case ZetaRule::precision:
      if (!(sigma > 0.0)) throw ParameterError("precision-weighted zeta needs sigma > 0");
      return base / (sigma * sigma);
    case ZetaRule::noise_level:
      return base * sigma * sigma;
  }
  return base;
}

ZetaRule parse_zeta_rule(const std::string& name) {
  if (name == "identical") return ZetaRule::identical;
  if (name == "precision") return ZetaRule::precision;
  if (name == "noise_level") return ZetaRule::noise_level;
  throw ConfigError("unknown zeta rule '" + name + "'");
}

const char* to_string(ZetaRule rule) {
  switch (rule) {
    case ZetaRule::identical:
      return "identical";
    case ZetaRule::precision:
      return "precision";
    case ZetaRule::noise_level:
      return "noise_level";
  }
  return "?";
}

GuidanceMode parse_guidance_mode(const std::string& name) {
  if (name == "full") return GuidanceMode::full;
  if (name == "detached") return GuidanceMode::detached;
  throw ConfigError("unknown guidance mode '" + name + "'");
}

GuidanceStep parse_guidance_step(const std::string& name) {
  if (name == "drift") return GuidanceStep::drift;
  if (name == "direct") return GuidanceStep::direct;
  throw ConfigError("unknown guidance step '" + name + "'");
}

const char* to_string(GuidanceMode mode) { return mode == GuidanceMode::full ? "full" : "detached"; }
const char* to_string(GuidanceStep step) { return step == GuidanceStep::drift ? "drift" : "direct"; }

template <typename T>
void estimate_x0_hat(std::span<const T> x_t, std::span<const T> score, int t, const NoiseSchedule& sched,
                     std::span<T> out) {
  if (x_t.size() != score.size() || x_t.size() != out.size()) throw ShapeError("estimate_x0_hat operand size");
  const double ab = sched.alpha_bar_at(t);
  const T var = static_cast<T>(1.0 - ab);
  const T inv = static_cast<T>(1.0 / std::sqrt(ab));
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] + var * score[i]) * inv;
}

template <typename T>
Tensor<T> estimate_x0_hat(const Tensor<T>& x_t, const Tensor<T>& score, int t, const NoiseSchedule& sched) {
  require_same_extent(x_t, score, "estimate_x0_hat");
  Tensor<T> out(x_t.batch, x_t.shape);
  estimate_x0_hat<T>(x_t.data, score.data, t, sched, out.data);
  return out;
}

Field estimate_x0_hat(const Field& x_t, const Field& score, int t, const NoiseSchedule& sched) {
  if (!(x_t.shape == score.shape)) throw ShapeError("estimate_x0_hat: " + x_t.shape.str() + " vs " + score.shape.str());
  Field out(x_t.shape, 0.0f, x_t.channel_tags);
  estimate_x0_hat<float>(x_t.data, score.data, t, sched, out.data);
  return out;
}

template <typename T>
Guidance<T> guidance_from_score(const ScoreFunction<T>& score_fn, const ScoreEvaluation<T>& eval,
                                const Tensor<T>& x_t, int t, const NoiseSchedule& sched,
                                std::span<const MeasurementChannel<T>> channels, GuidanceMode mode) {
  Guidance<T> out;
  out.x0_hat = estimate_x0_hat(x_t, eval.score, t, sched);
  out.grad = Tensor<T>(x_t.batch, x_t.shape);
  out.residual.assign(static_cast<std::size_t>(x_t.batch), 0.0);
  bool any = false;
  Tensor<T> g0(x_t.batch, x_t.shape);  // d residual / d x0_hat
  std::vector<T> pred, r;
  for (const auto& ch : channels) {
    ch.validate(x_t.shape);
    if (ch.zeta == 0.0) continue;
    any = true;
    pred.resize(ch.y.size());
    r.resize(ch.y.size());
    for (int n = 0; n < x_t.batch; ++n) {
      const auto x0 = std::span<const T>(out.x0_hat.sample(n));
      ch.op->apply(x0, pred);
      double sq = 0.0;
      for (std::size_t k = 0; k < r.size(); ++k) {
        const T d = pred[k] - ch.y[k];
        sq += static_cast<double>(d) * d;
        r[k] = static_cast<T>(2.0 * ch.zeta) * d;
      }
      out.residual[n] += ch.zeta * sq;
      ch.op->vjp_add(x0, r, g0.sample(n));
    }
  }
  if (!any) return out;
  const double ab = sched.alpha_bar_at(t);
  const T inv = static_cast<T>(1.0 / std::sqrt(ab));
  if (mode == GuidanceMode::detached) {
    for (std::size_t i = 0; i < g0.data.size(); ++i) out.grad.data[i] = g0.data[i] * inv;
    return out;
  }
  if (!eval.tape) throw ParameterError("full guidance needs a recorded score evaluation");
  const Tensor<T> jg = score_fn.input_vjp(*eval.tape, g0);
  const T var = static_cast<T>(1.0 - ab);
  for (std::size_t i = 0; i < g0.data.size(); ++i) out.grad.data[i] = (g0.data[i] + var * jg.data[i]) * inv;
  return out;
}

template <typename T>
Tensor<T> likelihood_guidance(const ScoreFunction<T>& score_fn, const Tensor<T>& x_t,
                              const MeasurementChannel<T>& channel, int t, const NoiseSchedule& sched,
                              GuidanceMode mode) {
  MeasurementChannel<T> unit = channel;
  unit.zeta = 1.0;
  const auto eval = score_fn.evaluate_at(x_t, t, sched, mode == GuidanceMode::full);
  auto g = guidance_from_score<T>(score_fn, eval, x_t, t, sched, std::span<const MeasurementChannel<T>>(&unit, 1),
                                  mode);
  for (T v : g.grad.data) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericalError("non-finite likelihood gradient", t);
  }
  return std::move(g.grad);
}

void summarize_samples(ReconstructionResult& result) {
  if (result.samples.empty()) throw ParameterError("reconstruction has no samples");
  const auto& first = result.samples.front();
  const std::size_t len = first.data.size();
  const double m = static_cast<double>(result.samples.size());
  std::vector<double> sum(len, 0.0), sq(len, 0.0);
  for (const auto& s : result.samples) {
    if (!(s.shape == first.shape)) throw ShapeError("reconstruction samples differ in shape");
    for (std::size_t i = 0; i < len; ++i) sum[i] += s.data[i];
  }
  result.mean = Field(first.shape, 0.0f, first.channel_tags);
  result.std = Field(first.shape, 0.0f, first.channel_tags);
  for (std::size_t i = 0; i < len; ++i) sum[i] /= m;
  for (const auto& s : result.samples) {
    for (std::size_t i = 0; i < len; ++i) {
      const double d = s.data[i] - sum[i];
      sq[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    result.mean.data[i] = static_cast<float>(sum[i]);
    result.std.data[i] = m > 1.0 ? static_cast<float>(std::sqrt(sq[i] / (m - 1.0))) : 0.0f;
  }
}

template <typename T>
ReconstructionResult dps_sample(const ScoreFunction<T>& score_fn, const NoiseSchedule& sched,
                                std::span<const MeasurementChannel<T>> channels, Shape shape,
                                const DpsOptions& options, std::vector<std::string> tags) {
  sched.validate();
  if (options.chains < 1) throw ParameterError("need at least one chain");
  if (score_fn.channels() != 0 && score_fn.channels() != shape.channels) {
    throw ShapeError("score function expects " + std::to_string(score_fn.channels()) + " channels, field has " +
                     std::to_string(shape.channels));
  }
  for (const auto& ch : channels) ch.validate(shape);
  const bool guided = std::any_of(channels.begin(), channels.end(), [](const auto& c) { return c.zeta != 0.0; });
  const bool record = guided && options.mode == GuidanceMode::full;

  ReconstructionResult result;
  result.metadata = {sched.steps, options.chains, options.seed, {}, {}, options.mode, options.step, options.reverse};
  for (const auto& ch : channels) {
    result.metadata.zeta.push_back(ch.zeta);
    result.metadata.channel_names.push_back(ch.name);
  }
  result.samples.reserve(static_cast<std::size_t>(options.chains));

  const int batch = options.batch > 0 ? std::min(options.batch, options.chains) : options.chains;
  const std::size_t len = shape.size();
  std::vector<T> z(len);
  for (int first = 0; first < options.chains; first += batch) {
    const int nb = std::min(batch, options.chains - first);
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(nb));
    Tensor<T> x(nb, shape), next(nb, shape);
    for (int c = 0; c < nb; ++c) {
      rngs.emplace_back(options.seed + static_cast<std::uint64_t>(first + c));
      rngs.back().template fill_normal<T>(x.sample(c));
    }
    for (int t = sched.steps; t >= 1; --t) {
      const double beta = sched.beta_at(t);
      const auto eval = score_fn.evaluate_at(x, t, sched, record);
      for (int c = 0; c < nb; ++c) {
        if (t > 1) {
          rngs[c].template fill_normal<T>(z);
          reverse_step_unconditional<T>(x.sample(c), eval.score.sample(c), beta, z, next.sample(c), options.reverse);
        } else {
          reverse_step_unconditional<T>(x.sample(c), eval.score.sample(c), beta, next.sample(c), options.reverse);
        }
      }
      if (guided) {
        const auto g = guidance_from_score<T>(score_fn, eval, x, t, sched, channels, options.mode);
        const T k = static_cast<T>(options.step == GuidanceStep::drift ? score_coefficient(beta, options.reverse) / std::sqrt(1.0 - beta) : 1.0);
        for (std::size_t i = 0; i < next.data.size(); ++i) next.data[i] -= k * g.grad.data[i];
      }
      for (int c = 0; c < nb; ++c) {
        for (T v : next.sample(c)) {
          if (!std::isfinite(static_cast<double>(v))) {
            throw NumericalError("non-finite sampler state", t, first + c);
          }
        }
      }
      std::swap(x, next);
    }
    for (int c = 0; c < nb; ++c) result.samples.push_back(to_field<T>(x, c, tags));
  }
  summarize_samples(result);
  return result;
}

#define FIELDRECON_INSTANTIATE(T)                                                                           \
  template struct MeasurementChannel<T>;                                                                   \
  template void estimate_x0_hat<T>(std::span<const T>, std::span<const T>, int, const NoiseSchedule&,       \
                                   std::span<T>);                                                          \
  template Tensor<T> estimate_x0_hat<T>(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);     \
  template Guidance<T> guidance_from_score<T>(const ScoreFunction<T>&, const ScoreEvaluation<T>&,          \
                                              const Tensor<T>&, int, const NoiseSchedule&,                 \
                                              std::span<const MeasurementChannel<T>>, GuidanceMode);       \
  template Tensor<T> likelihood_guidance<T>(const ScoreFunction<T>&, const Tensor<T>&,                     \
                                            const MeasurementChannel<T>&, int, const NoiseSchedule&,       \
                                            GuidanceMode);                                                 \
  template ReconstructionResult dps_sample<T>(const ScoreFunction<T>&, const NoiseSchedule&,               \
                                              std::span<const MeasurementChannel<T>>, Shape,               \
                                              const DpsOptions&, std::vector<std::string>);

FIELDRECON_INSTANTIATE(float)
FIELDRECON_INSTANTIATE(double)

}  // namespace fieldrecon
