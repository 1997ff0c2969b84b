#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldrecon/field.hpp"
#include "fieldrecon/forward_models.hpp"
#include "fieldrecon/score_function.hpp"

namespace fieldrecon {

/// One sensor group: readings, the operator predicting them, and its weight.
template <typename T>
struct MeasurementChannel {
  std::vector<T> y;
  std::shared_ptr<const ForwardOperator<T>> op;
  double zeta = 5.0;
  /// Assumed measurement noise std; informational unless a zeta rule uses it.
  double sigma = 0.0;
  std::string name;

  /// 1 / sigma^2 (infinite for sigma = 0).
  double precision() const;
  /// Throws on missing operator, length mismatch, wrong field shape or bad zeta.
  void validate(const Shape& field) const;
};

/// How per-channel guidance weights relate to the assumed noise level.
enum class ZetaRule {
  identical,    // zeta_i = base for every channel
  precision,    // zeta_i = base / sigma_i^2: noisier sensors pull less
  noise_level,  // zeta_i = base * sigma_i^2: noisier sensors pull more
};

double channel_zeta(double base, double sigma, ZetaRule rule);
ZetaRule parse_zeta_rule(const std::string& name);
const char* to_string(ZetaRule rule);

enum class GuidanceMode {
  full,      // differentiate through the score network inside x0_hat
  detached,  // treat the score as constant (diagnostic)
};

/// How the likelihood gradient enters the reverse update.
enum class GuidanceStep {
  /// As a term of the conditional score s - sum_i zeta_i grad_i inside the
  /// reverse drift, i.e. scaled by the score coefficient over sqrt(1 - beta_t).
  drift,
  /// As a bare correction x_{t-1} -= sum_i zeta_i grad_i.
  direct,
};

GuidanceMode parse_guidance_mode(const std::string& name);
GuidanceStep parse_guidance_step(const std::string& name);
const char* to_string(GuidanceMode mode);
const char* to_string(GuidanceStep step);

/// x0_hat = (x_t + (1 - alpha_bar_t) score) / sqrt(alpha_bar_t)
template <typename T>
void estimate_x0_hat(std::span<const T> x_t, std::span<const T> score, int t, const NoiseSchedule& sched,
                     std::span<T> out);
template <typename T>
Tensor<T> estimate_x0_hat(const Tensor<T>& x_t, const Tensor<T>& score, int t, const NoiseSchedule& sched);
Field estimate_x0_hat(const Field& x_t, const Field& score, int t, const NoiseSchedule& sched);

template <typename T>
struct Guidance {
  Tensor<T> grad;                // sum_i zeta_i grad_{x_t} ||y_i - A_i(x0_hat)||^2, per chain
  Tensor<T> x0_hat;
  std::vector<double> residual;  // sum_i zeta_i ||y_i - A_i(x0_hat)||^2, per chain
};

/// Weighted likelihood gradient for every item of a batch that was scored at
/// step `t`. `eval` must hold a tape when `mode` is full and any channel has a
/// nonzero weight. Channels with zeta = 0 are skipped entirely.
template <typename T>
Guidance<T> guidance_from_score(const ScoreFunction<T>& score_fn, const ScoreEvaluation<T>& eval,
                                const Tensor<T>& x_t, int t, const NoiseSchedule& sched,
                                std::span<const MeasurementChannel<T>> channels, GuidanceMode mode);

/// grad_{x_t} ||y - A(x0_hat(x_t))||^2 for one channel (its zeta is not applied).
template <typename T>
Tensor<T> likelihood_guidance(const ScoreFunction<T>& score_fn, const Tensor<T>& x_t,
                              const MeasurementChannel<T>& channel, int t, const NoiseSchedule& sched,
                              GuidanceMode mode = GuidanceMode::full);

struct DpsOptions {
  int chains = 20;
  /// Chain c draws from Rng(seed + c).
  std::uint64_t seed = 0;
  GuidanceMode mode = GuidanceMode::full;
  GuidanceStep step = GuidanceStep::drift;
  ReverseRule reverse = ReverseRule::sde;
  /// Chains advanced together through the score function (0 = all).
  int batch = 0;
};

struct ReconstructionMetadata {
  int steps = 0;
  int chains = 0;
  std::uint64_t seed = 0;
  std::vector<double> zeta;
  std::vector<std::string> channel_names;
  GuidanceMode mode = GuidanceMode::full;
  GuidanceStep step = GuidanceStep::drift;
  ReverseRule reverse = ReverseRule::sde;
};

struct ReconstructionResult {
  std::vector<Field> samples;
  Field mean;
  /// Per-element standard deviation across samples (divisor M - 1; zero for M = 1).
  Field std;
  std::optional<double> wmape;
  ReconstructionMetadata metadata;
};

/// Diffusion posterior sampling. Each chain starts from x_T ~ N(0, I) and for
/// t = T..1 takes the unconditional reverse step (no noise at t = 1), then
/// subtracts the weighted likelihood gradient evaluated at x_t. With no
/// channels this is plain unconditional sampling.
///
/// Throws NumericalError naming the step and chain on a non-finite state.
template <typename T>
ReconstructionResult dps_sample(const ScoreFunction<T>& score_fn, const NoiseSchedule& sched,
                                std::span<const MeasurementChannel<T>> channels, Shape shape,
                                const DpsOptions& options, std::vector<std::string> tags = {});

/// Mean and per-element std over samples.
void summarize_samples(ReconstructionResult& result);

}  // namespace fieldrecon
