#include "fieldrecon/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace fieldrecon {

std::size_t NoiseSchedule::check(int t) const {
  if (t < 1 || t > steps) {
    throw ParameterError("step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::sigma_at(int t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }

void NoiseSchedule::validate() const {
  const auto n = static_cast<std::size_t>(steps);
  if (steps < 1 || beta.size() != n || alpha.size() != n || alpha_bar.size() != n) {
    throw ParameterError("noise schedule tables do not match step count");
  }
  double prev = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ParameterError("beta outside (0, 1)");
    if (alpha[i] != 1.0 - beta[i]) throw ParameterError("alpha != 1 - beta");
    if (!(alpha_bar[i] > 0.0 && alpha_bar[i] < prev)) {
      throw ParameterError("alpha_bar must be strictly decreasing in (0, 1)");
    }
    prev = alpha_bar[i];
  }
}

NoiseSchedule make_linear_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw ParameterError("schedule needs at least one step");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ParameterError("need 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  const double scale = 1000.0 / steps;
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double b = std::min(scale * (beta_min + (beta_max - beta_min) * frac), kBetaCeiling);
    s.beta[i] = b;
    s.alpha[i] = 1.0 - b;
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

namespace {

void require_same_shape(const Field& a, const Field& b, const char* what) {
  if (a.shape != b.shape) throw ShapeError(std::string(what) + ": " + a.shape.str() + " vs " + b.shape.str());
}

template <typename T>
void require_len(std::span<const T> a, std::span<const T> b, std::span<T> out, const char* what) {
  if (a.size() != b.size() || a.size() != out.size()) throw ShapeError(what);
}

}  // namespace

double score_coefficient(double beta, ReverseRule rule) {
  return rule == ReverseRule::sde ? beta : beta / 2.0;
}

ReverseRule parse_reverse_rule(const std::string& name) {
  if (name == "sde") return ReverseRule::sde;
  if (name == "half_drift") return ReverseRule::half_drift;
  throw ConfigError("unknown reverse rule '" + name + "'");
}

const char* to_string(ReverseRule rule) { return rule == ReverseRule::sde ? "sde" : "half_drift"; }

template <typename T>
void forward_diffuse_step(std::span<const T> x_prev, double beta, std::span<const T> z, std::span<T> out) {
  require_len(x_prev, z, out, "forward_diffuse_step: length mismatch");
  if (!(beta > 0.0 && beta < 1.0)) throw ParameterError("beta outside (0, 1)");
  const T keep = static_cast<T>(std::sqrt(1.0 - beta));
  const T noise = static_cast<T>(std::sqrt(beta));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x_prev[i] + noise * z[i];
}

Field forward_diffuse_step(const Field& x_prev, double beta, const Field& z) {
  require_same_shape(x_prev, z, "forward_diffuse_step");
  Field out(x_prev.shape, 0.0f, x_prev.channel_tags);
  forward_diffuse_step<float>(x_prev.data, beta, z.data, out.data);
  return out;
}

template <typename T>
void sample_xt_given_x0(std::span<const T> x0, int t, const NoiseSchedule& sched, std::span<const T> z,
                        std::span<T> out) {
  require_len(x0, z, out, "sample_xt_given_x0: length mismatch");
  const double ab = sched.alpha_bar_at(t);
  const T keep = static_cast<T>(std::sqrt(ab));
  const T noise = static_cast<T>(std::sqrt(1.0 - ab));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x0[i] + noise * z[i];
}

Field sample_xt_given_x0(const Field& x0, int t, const NoiseSchedule& sched, const Field& z) {
  require_same_shape(x0, z, "sample_xt_given_x0");
  Field out(x0.shape, 0.0f, x0.channel_tags);
  sample_xt_given_x0<float>(x0.data, t, sched, z.data, out.data);
  return out;
}

template <typename T>
void reverse_step_unconditional(std::span<const T> x_t, std::span<const T> score, double beta,
                                std::span<const T> z, std::span<T> out, ReverseRule rule) {
  require_len(x_t, score, out, "reverse_step_unconditional: length mismatch");
  if (z.size() != out.size()) throw ShapeError("reverse_step_unconditional: noise length mismatch");
  if (!(beta > 0.0 && beta < 1.0)) throw ParameterError("beta outside (0, 1)");
  const T inv = static_cast<T>(1.0 / std::sqrt(1.0 - beta));
  const T drift = static_cast<T>(score_coefficient(beta, rule));
  const T noise = static_cast<T>(std::sqrt(beta));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (x_t[i] + drift * score[i]) + noise * z[i];
}

template <typename T>
void reverse_step_unconditional(std::span<const T> x_t, std::span<const T> score, double beta,
                                std::span<T> out, ReverseRule rule) {
  require_len(x_t, score, out, "reverse_step_unconditional: length mismatch");
  if (!(beta > 0.0 && beta < 1.0)) throw ParameterError("beta outside (0, 1)");
  const T inv = static_cast<T>(1.0 / std::sqrt(1.0 - beta));
  const T drift = static_cast<T>(score_coefficient(beta, rule));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (x_t[i] + drift * score[i]);
}

Field reverse_step_unconditional(const Field& x_t, const Field& score, double beta, const Field& z,
                                 ReverseRule rule) {
  require_same_shape(x_t, score, "reverse_step_unconditional");
  require_same_shape(x_t, z, "reverse_step_unconditional");
  Field out(x_t.shape, 0.0f, x_t.channel_tags);
  reverse_step_unconditional<float>(x_t.data, score.data, beta, z.data, out.data, rule);
  return out;
}

#define FIELDRECON_INSTANTIATE(T)                                                                    \
  template void forward_diffuse_step<T>(std::span<const T>, double, std::span<const T>, std::span<T>); \
  template void sample_xt_given_x0<T>(std::span<const T>, int, const NoiseSchedule&,                 \
                                      std::span<const T>, std::span<T>);                             \
  template void reverse_step_unconditional<T>(std::span<const T>, std::span<const T>, double,        \
                                              std::span<const T>, std::span<T>, ReverseRule);        \
  template void reverse_step_unconditional<T>(std::span<const T>, std::span<const T>, double,        \
                                              std::span<T>, ReverseRule);

FIELDRECON_INSTANTIATE(float)
FIELDRECON_INSTANTIATE(double)

#undef FIELDRECON_INSTANTIATE

}  // namespace fieldrecon
