#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "fieldrecon/diffusion.hpp"
#include "fieldrecon/dps.hpp"
#include "fieldrecon/eval.hpp"
#include "fieldrecon/synthdata.hpp"
#include "fieldrecon/training.hpp"
#include "fieldrecon/unet.hpp"

namespace fieldrecon {

struct ScheduleConfig {
  /// Step count used for training; sampling steps are set per run.
  int steps = 1000;
  double beta_min = kDefaultBetaMin;
  double beta_max = kDefaultBetaMax;
};

struct ScoreNetConfig {
  UNetConfig net;
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 1e-3;
  LossWeighting weighting = LossWeighting::noise_variance;
};

struct SurrogateConfig {
  int hidden = 100;
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double validation_fraction = 0.1;
};

struct DpsConfig {
  ForwardKind forward_model = ForwardKind::direct_selection;
  int steps = 500;
  double zeta = 5.0;
  ZetaRule zeta_rule = ZetaRule::identical;
  int chains = 20;
  int batch = 0;
  GuidanceMode mode = GuidanceMode::full;
  GuidanceStep step = GuidanceStep::drift;
  ReverseRule reverse = ReverseRule::sde;
  int sensor_count = 15;
  Placement placement = Placement::standard;
  std::uint64_t layout_seed = 0;
  /// Sensor quantity; empty picks the forward model's default.
  std::string quantity;
  double snr_db = std::numeric_limits<double>::infinity();
  /// Index into the evenly spaced test frames used by `reconstruct`.
  int test_index = 0;
};

struct SweepConfig {
  SweepAxis axis = SweepAxis::steps;
  std::vector<std::string> values{"100", "300", "500", "700", "900", "1100"};
  int repeats = 1;
  int test_samples = 50;
};

/// Everything a pipeline run needs. Every key is optional except `seed`;
/// unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  GeneratorConfig dataset;
  ScheduleConfig schedule;
  ScoreNetConfig scorenet;
  SurrogateConfig surrogate;
  DpsConfig dps;
  SweepConfig sweep;

  NoiseSchedule training_schedule() const;
  std::string sensor_quantity() const;
  void validate() const;
};

/// Throws ConfigError on unknown keys, wrong types or a missing seed.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text);
nlohmann::json to_json(const RunConfig& cfg);

nlohmann::json generator_to_json(const GeneratorConfig& cfg);
/// Generator section without the seed (the run seed supplies it).
GeneratorConfig generator_from_json(const nlohmann::json& j);

/// SweepSpec built from the dps (fixed axes) and sweep sections.
SweepSpec make_sweep_spec(const RunConfig& cfg);

}  // namespace fieldrecon
