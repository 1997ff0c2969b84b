#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fieldrecon/field.hpp"
#include "fieldrecon/forward_models.hpp"
#include "fieldrecon/rng.hpp"

namespace fieldrecon {

/// Parameters of the synthetic plate-field generator.
struct GeneratorConfig {
  int height = 38;
  int width = 24;
  double sigma_y = 300.0;
  double modulus = 200000.0;
  double ramberg_alpha = 0.002;
  double ramberg_n = 5.0;
  int bumps = 4;
  int frames = 20;
  int train_histories = 100;
  int test_histories = 10;
  std::uint64_t seed = 0;

  int histories() const { return train_histories + test_histories; }
  void validate() const;
  bool operator==(const GeneratorConfig&) const = default;
};

/// One frame of one loading history, in physical units.
struct PlateSample {
  Field stress;  // 1 x H x W, MPa
  Field strain;  // 1 x H x W
  double load = 0.0;
  int history = 0;
  int frame = 0;
};

struct Dataset {
  GeneratorConfig config;
  std::vector<PlateSample> samples;  // history-major, frame-minor

  bool is_test(const PlateSample& s) const { return s.history >= config.train_histories; }
  std::vector<const PlateSample*> split(bool test) const;
};

/// Ramberg-Osgood strain for a stress value.
double strain_from_stress(double stress, const GeneratorConfig& cfg);
/// (1 - exp(-3 lambda)) / (1 - exp(-3))
double load_amplitude(double lambda);

Dataset generate_dataset(const GeneratorConfig& cfg);

/// Field with the given channels stacked in order (tags are taken from the inputs).
Field stack_channels(std::span<const Field* const> channels);
/// Score-prior training field for a sample: stress only, or (stress, strain).
Field prior_field(const PlateSample& s, int channels);

/// Per-channel global mean and std.
struct DatasetStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::string> tags;

  int channels() const { return static_cast<int>(mean.size()); }
  /// Stats of the channels carrying `tags`, in that order.
  DatasetStats select(const std::vector<std::string>& tags) const;
  bool operator==(const DatasetStats&) const = default;
};

inline constexpr double kMinStd = 1e-12;

DatasetStats compute_stats(std::span<const Field> fields);
/// (x - mu) / sigma per channel. Throws DegenerateStatisticsError for sigma < 1e-12.
Field normalize(const Field& x, const DatasetStats& stats);
Field denormalize(const Field& x, const DatasetStats& stats);
std::vector<Field> normalize(std::span<const Field> xs, const DatasetStats& stats);

enum class Placement { high_variance, low_variance, standard, random };

Placement parse_placement(const std::string& name);
const char* to_string(Placement p);

/// Rows x cols lattice used by the standard strategy for n sensors on an H x W grid:
/// the factorisation n = R * C whose aspect ratio R / C is closest to H / W.
std::pair<int, int> lattice_shape(int n, int height, int width);

/// Sensor layout for `quantity` chosen by `strategy` from per-cell statistics of
/// `train` (channel 0 of each field). Positions are returned in row-major order.
SensorLayout place_sensors(Placement strategy, int n, std::span<const Field> train, std::uint64_t seed,
                           const std::string& quantity);

/// 10^(-snr_db / 20): noise std for readings of unit variance.
double noise_std_for_snr(double snr_db);
/// Readings plus i.i.d. N(0, noise_std_for_snr(snr_db)^2). Infinite SNR returns y unchanged.
std::vector<float> add_noise(std::span<const float> y, double snr_db, Rng& rng);

}  // namespace fieldrecon
