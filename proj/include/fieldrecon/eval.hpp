#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fieldrecon/dps.hpp"
#include "fieldrecon/synthdata.hpp"

namespace fieldrecon {

/// Weighted mean absolute percentage error, averaged over samples:
/// 100/M * sum_j sum_i |x_ij - x_i| / sum_i |x_i|.
double wmape(std::span<const Field> samples, const Field& truth);

/// Trained models and data a reconstruction can draw on. Pointers are not owned.
struct ReconstructionContext {
  const ScoreFunction<float>* stress_prior = nullptr;  // 1 channel (DS, NN)
  const ScoreFunction<float>* joint_prior = nullptr;   // 2 channels (CS)
  /// NN surrogates; the one whose layout hash matches the request is used.
  std::vector<const SurrogateModel*> surrogates;
  /// Normalization of (stress, strain), computed on the training split.
  DatasetStats stats;
  std::vector<const PlateSample*> train;
  std::vector<const PlateSample*> test;
};

/// Sensor quantity each forward model reads by default (DS: stress, CS/NN: strain).
std::string default_sensor_quantity(ForwardKind kind);

struct ReconstructionRequest {
  ForwardKind kind = ForwardKind::direct_selection;
  /// Full sensor layout; `active` picks a subset of its sensors (all if empty,
  /// none if `use_none`).
  SensorLayout layout;
  std::vector<int> active;
  bool use_none = false;
  double zeta = 5.0;
  /// Applied with the noise std implied by `snr_db`; identical ignores it.
  ZetaRule zeta_rule = ZetaRule::identical;
  double snr_db = std::numeric_limits<double>::infinity();
  int steps = 500;
  DpsOptions dps;
  /// Seed of the measurement-noise stream.
  std::uint64_t noise_seed = 0;
};

/// Surrogate in `ctx` fitted for `layout`, or null.
const SurrogateModel* find_surrogate(const ReconstructionContext& ctx, const SensorLayout& layout);

/// Fits an NN surrogate for `layout` on the training split: fields are the
/// z-scored stress, targets the layout readings divided by their per-sensor std.
SurrogateModel fit_surrogate_model(std::span<const PlateSample* const> train, const DatasetStats& stats,
                                   const SensorLayout& layout, const SurrogateTrainOptions& options,
                                   SurrogateTrainResult* report = nullptr);

/// Throws ConfigError when a model the request needs is missing or does not match.
void check_context(const ReconstructionContext& ctx, ForwardKind kind, const SensorLayout& layout);

/// Simulates readings of `truth` (with noise at the requested SNR), runs DPS
/// and returns samples, mean and std in physical units with the WMAPE of the
/// stress channel.
ReconstructionResult reconstruct(const ReconstructionContext& ctx, const PlateSample& truth,
                                 const ReconstructionRequest& request);

/// Test frames with nonzero load, `count` of them evenly spaced through the
/// test split (all when count <= 0 or exceeds the eligible number).
std::vector<const PlateSample*> select_test_samples(const Dataset& ds, int count);

enum class SweepAxis { steps, zeta, sensor_count, placement, snr };

SweepAxis parse_sweep_axis(const std::string& name);
const char* to_string(SweepAxis axis);

struct SweepSpec {
  SweepAxis axis = SweepAxis::steps;
  /// Axis values as written (numbers, or placement strategy names).
  std::vector<std::string> values;
  ForwardKind kind = ForwardKind::direct_selection;
  int repeats = 1;
  std::uint64_t seed = 0;
  int chains = 20;
  int test_samples = 50;
  // Settings of the axes that are not swept.
  int steps = 500;
  double zeta = 5.0;
  ZetaRule zeta_rule = ZetaRule::identical;
  int sensor_count = 15;
  std::string placement = "standard";
  /// Seed of the random placement strategy (fixed across repeats so that
  /// surrogates can be fitted for it in advance).
  std::uint64_t layout_seed = 0;
  double snr_db = std::numeric_limits<double>::infinity();
  GuidanceMode mode = GuidanceMode::full;
  GuidanceStep step = GuidanceStep::drift;
  ReverseRule reverse = ReverseRule::sde;
  /// Chains advanced together per score evaluation (0 = all).
  int batch = 0;

  void validate() const;
};

struct SweepRow {
  std::string axis;
  std::string value;
  std::string forward_model;
  int repeat = 0;  // -1 marks the summary over repeats
  double mean_wmape_pct = 0.0;
  /// Over test samples for a repeat row, over repeat means for the summary row.
  double std_wmape_pct = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

struct SweepProgress {
  std::function<void(const SweepRow&)> on_row;
  std::function<void(const std::string& value, int repeat, int sample, double wmape)> on_sample;
};

/// Runs the sweep over the context's test samples. Repeat r uses base seed
/// seed + r; within a repeat, test sample i uses the same chain and noise
/// seeds for every axis value.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, const ReconstructionContext& ctx,
                                const SweepProgress& progress = {});

inline constexpr const char* kSweepCsvHeader =
    "axis,value,forward_model,repeat,mean_wmape_pct,std_wmape_pct,wall_ms,seed";

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace fieldrecon
