#pragma once

#include <span>
#include <string>
#include <vector>

#include "fieldrecon/field.hpp"

namespace fieldrecon {

/// Per-step variance tables for a T-step discrete diffusion. Step t runs 1..T;
/// t = 0 is clean data. Tables are stored at index t-1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const { return beta[check(t)]; }
  double alpha_at(int t) const { return alpha[check(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[check(t)]; }
  /// Standard deviation of x_t given x_0, sqrt(1 - alpha_bar_t).
  double sigma_at(int t) const;

  /// Throws ParameterError when an invariant does not hold.
  void validate() const;

 private:
  std::size_t check(int t) const;
};

inline constexpr double kDefaultBetaMin = 1e-4;
inline constexpr double kDefaultBetaMax = 0.02;
inline constexpr double kBetaCeiling = 0.999;

/// Linear beta ramp defined for a 1000-step reference chain and rescaled by
/// 1000/T so the terminal alpha_bar is roughly independent of T.
NoiseSchedule make_linear_schedule(int steps, double beta_min = kDefaultBetaMin,
                                   double beta_max = kDefaultBetaMax);

// Elementwise diffusion updates. Span forms are the kernels; Field forms
// check shapes and forward to them.

template <typename T>
void forward_diffuse_step(std::span<const T> x_prev, double beta, std::span<const T> z, std::span<T> out);
Field forward_diffuse_step(const Field& x_prev, double beta, const Field& z);

template <typename T>
void sample_xt_given_x0(std::span<const T> x0, int t, const NoiseSchedule& sched, std::span<const T> z,
                        std::span<T> out);
Field sample_xt_given_x0(const Field& x0, int t, const NoiseSchedule& sched, const Field& z);

/// Weight on the score in the reverse update.
enum class ReverseRule {
  /// x_{t-1} = (x_t + beta * score) / sqrt(1 - beta) + sqrt(beta) z, the
  /// Euler-Maruyama step of the reverse-time variance-preserving SDE. It keeps
  /// N(0, I) stationary under the score -x.
  sde,
  /// x_{t-1} = (x_t + beta/2 * score) / sqrt(1 - beta) + sqrt(beta) z. This is
  /// the probability-flow drift with SDE noise added; each step inflates the
  /// variance by about beta.
  half_drift,
};

double score_coefficient(double beta, ReverseRule rule);
ReverseRule parse_reverse_rule(const std::string& name);
const char* to_string(ReverseRule rule);

template <typename T>
void reverse_step_unconditional(std::span<const T> x_t, std::span<const T> score, double beta,
                                std::span<const T> z, std::span<T> out, ReverseRule rule = ReverseRule::sde);
/// Noise-free variant used at the final step.
template <typename T>
void reverse_step_unconditional(std::span<const T> x_t, std::span<const T> score, double beta,
                                std::span<T> out, ReverseRule rule = ReverseRule::sde);
Field reverse_step_unconditional(const Field& x_t, const Field& score, double beta, const Field& z,
                                 ReverseRule rule = ReverseRule::sde);

}  // namespace fieldrecon
