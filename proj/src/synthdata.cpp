#include "fieldrecon/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fieldrecon {

void GeneratorConfig::validate() const {
  if (height < 2 || width < 2) throw ParameterError("generator grid must be at least 2x2");
  if (!(sigma_y > 0.0 && modulus > 0.0 && ramberg_alpha > 0.0 && ramberg_n > 0.0)) {
    throw ParameterError("generator material constants must be positive");
  }
  if (bumps < 0) throw ParameterError("bump count must be >= 0");
  if (frames < 1) throw ParameterError("need at least one frame per history");
  if (train_histories < 0 || test_histories < 0 || histories() < 1) {
    throw ParameterError("need at least one loading history");
  }
}

std::vector<const PlateSample*> Dataset::split(bool test) const {
  std::vector<const PlateSample*> out;
  for (const auto& s : samples) {
    if (is_test(s) == test) out.push_back(&s);
  }
  return out;
}

double strain_from_stress(double stress, const GeneratorConfig& cfg) {
  return stress / cfg.modulus + cfg.ramberg_alpha * std::pow(stress / cfg.sigma_y, cfg.ramberg_n);
}

double load_amplitude(double lambda) { return (1.0 - std::exp(-3.0 * lambda)) / (1.0 - std::exp(-3.0)); }

Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  const int h = cfg.height, w = cfg.width, nh = cfg.histories();
  Dataset ds{cfg, std::vector<PlateSample>(static_cast<std::size_t>(nh) * cfg.frames)};
  constexpr double kBand = 0.18;
#pragma omp parallel for schedule(dynamic)
  for (int hist = 0; hist < nh; ++hist) {
    Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(hist));
    struct Bump {
      double cu, cv, s, w;
    };
    std::vector<Bump> bumps(static_cast<std::size_t>(cfg.bumps));
    for (auto& b : bumps) {
      b.cu = rng.uniform(0.1, 0.9);
      b.cv = rng.uniform(0.1, 0.9);
      b.s = rng.uniform(0.05, 0.15);
      b.w = rng.uniform(0.3, 1.0);
    }
    std::vector<double> pattern(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h; ++i) {
      const double u = static_cast<double>(i) / (h - 1);
      for (int j = 0; j < w; ++j) {
        const double v = static_cast<double>(j) / (w - 1);
        double p = std::exp(-(u - v) * (u - v) / (2.0 * kBand * kBand));
        for (const auto& b : bumps) {
          const double d2 = (u - b.cu) * (u - b.cu) + (v - b.cv) * (v - b.cv);
          p += b.w * std::exp(-d2 / (2.0 * b.s * b.s));
        }
        pattern[static_cast<std::size_t>(i) * w + j] = p;
      }
    }
    const double pmax = *std::max_element(pattern.begin(), pattern.end());
    for (int f = 0; f < cfg.frames; ++f) {
      const double lambda = cfg.frames > 1 ? static_cast<double>(f) / (cfg.frames - 1) : 0.0;
      const double amp = cfg.sigma_y * load_amplitude(lambda) / pmax;
      PlateSample& s = ds.samples[static_cast<std::size_t>(hist) * cfg.frames + f];
      s.history = hist;
      s.frame = f;
      s.load = lambda;
      s.stress = Field(Shape{1, h, w}, 0.0f, {kStressTag});
      s.strain = Field(Shape{1, h, w}, 0.0f, {kStrainTag});
      for (std::size_t k = 0; k < pattern.size(); ++k) {
        const double sigma = amp * pattern[k];
        s.stress.data[k] = static_cast<float>(sigma);
        s.strain.data[k] = static_cast<float>(strain_from_stress(sigma, cfg));
      }
    }
  }
  return ds;
}

Field stack_channels(std::span<const Field* const> channels) {
  if (channels.empty()) throw ShapeError("nothing to stack");
  const Shape base = channels.front()->shape;
  Shape out_shape{0, base.height, base.width};
  for (const Field* f : channels) {
    if (f->shape.height != base.height || f->shape.width != base.width) throw ShapeError("stacked fields differ in extent");
    out_shape.channels += f->shape.channels;
  }
  Field out(out_shape);
  auto it = out.data.begin();
  for (const Field* f : channels) {
    it = std::copy(f->data.begin(), f->data.end(), it);
    for (int c = 0; c < f->shape.channels; ++c) {
      out.channel_tags.push_back(c < static_cast<int>(f->channel_tags.size()) ? f->channel_tags[c] : std::string());
    }
  }
  return out;
}

Field prior_field(const PlateSample& s, int channels) {
  if (channels == 1) return s.stress;
  if (channels == 2) {
    const Field* parts[] = {&s.stress, &s.strain};
    return stack_channels(parts);
  }
  throw ParameterError("score prior has 1 or 2 channels, not " + std::to_string(channels));
}

DatasetStats DatasetStats::select(const std::vector<std::string>& wanted) const {
  DatasetStats out;
  for (const auto& tag : wanted) {
    const auto it = std::find(tags.begin(), tags.end(), tag);
    if (it == tags.end()) throw ConfigError("no normalization statistics for channel '" + tag + "'");
    const auto k = static_cast<std::size_t>(it - tags.begin());
    out.mean.push_back(mean[k]);
    out.std.push_back(std[k]);
    out.tags.push_back(tag);
  }
  return out;
}

DatasetStats compute_stats(std::span<const Field> fields) {
  if (fields.empty()) throw ParameterError("cannot compute statistics of an empty set");
  const Shape shape = fields.front().shape;
  DatasetStats st;
  st.tags = fields.front().channel_tags;
  st.tags.resize(static_cast<std::size_t>(shape.channels));
  for (int c = 0; c < shape.channels; ++c) {
    double sum = 0.0;
    for (const auto& f : fields) {
      if (!(f.shape == shape)) throw ShapeError("statistics over fields of different shapes");
      for (float v : f.channel(c)) sum += v;
    }
    const double count = static_cast<double>(fields.size()) * shape.plane();
    const double mean = sum / count;
    double sq = 0.0;
    for (const auto& f : fields) {
      for (float v : f.channel(c)) sq += (v - mean) * (v - mean);
    }
    st.mean.push_back(mean);
    st.std.push_back(std::sqrt(sq / count));
  }
  return st;
}

namespace {

void check_stats(const Field& x, const DatasetStats& stats) {
  if (stats.channels() != x.shape.channels) {
    throw ShapeError("statistics for " + std::to_string(stats.channels()) + " channels, field has " +
                     std::to_string(x.shape.channels));
  }
  for (double s : stats.std) {
    if (!(s >= kMinStd)) throw DegenerateStatisticsError("channel standard deviation below 1e-12");
  }
}

}  // namespace

Field normalize(const Field& x, const DatasetStats& stats) {
  check_stats(x, stats);
  Field out = x;
  for (int c = 0; c < x.shape.channels; ++c) {
    for (float& v : out.channel(c)) v = static_cast<float>((v - stats.mean[c]) / stats.std[c]);
  }
  return out;
}

Field denormalize(const Field& x, const DatasetStats& stats) {
  check_stats(x, stats);
  Field out = x;
  for (int c = 0; c < x.shape.channels; ++c) {
    for (float& v : out.channel(c)) v = static_cast<float>(v * stats.std[c] + stats.mean[c]);
  }
  return out;
}

std::vector<Field> normalize(std::span<const Field> xs, const DatasetStats& stats) {
  std::vector<Field> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(normalize(x, stats));
  return out;
}

Placement parse_placement(const std::string& name) {
  if (name == "high_variance") return Placement::high_variance;
  if (name == "low_variance") return Placement::low_variance;
  if (name == "standard") return Placement::standard;
  if (name == "random") return Placement::random;
  throw ConfigError("unknown placement strategy '" + name + "'");
}

const char* to_string(Placement p) {
  switch (p) {
    case Placement::high_variance:
      return "high_variance";
    case Placement::low_variance:
      return "low_variance";
    case Placement::standard:
      return "standard";
    case Placement::random:
      return "random";
  }
  return "?";
}

std::pair<int, int> lattice_shape(int n, int height, int width) {
  if (n < 1) throw ParameterError("lattice needs at least one sensor");
  const double target = static_cast<double>(height) / width;
  std::pair<int, int> best{0, 0};
  double best_err = std::numeric_limits<double>::infinity();
  for (int r = 1; r <= n; ++r) {
    if (n % r != 0) continue;
    const int c = n / r;
    if (r > height || c > width) continue;
    const double err = std::abs(std::log(static_cast<double>(r) / c / target));
    if (err < best_err) {
      best_err = err;
      best = {r, c};
    }
  }
  if (best.first == 0) throw ParameterError("no lattice of " + std::to_string(n) + " sensors fits the grid");
  return best;
}

SensorLayout place_sensors(Placement strategy, int n, std::span<const Field> train, std::uint64_t seed,
                           const std::string& quantity) {
  if (train.empty()) throw ParameterError("sensor placement needs training fields");
  const int h = train.front().shape.height, w = train.front().shape.width;
  const int cells = h * w;
  if (n < 0 || n > cells) {
    throw ParameterError("cannot place " + std::to_string(n) + " sensors on " + std::to_string(cells) + " cells");
  }
  SensorLayout layout{h, w, quantity, {}};
  std::vector<int> chosen;
  switch (strategy) {
    case Placement::high_variance:
    case Placement::low_variance: {
      std::vector<double> mean(static_cast<std::size_t>(cells), 0.0), var(static_cast<std::size_t>(cells), 0.0);
      for (const auto& f : train) {
        const auto ch = f.channel(0);
        for (int k = 0; k < cells; ++k) mean[k] += ch[k];
      }
      for (auto& m : mean) m /= static_cast<double>(train.size());
      for (const auto& f : train) {
        const auto ch = f.channel(0);
        for (int k = 0; k < cells; ++k) var[k] += (ch[k] - mean[k]) * (ch[k] - mean[k]);
      }
      std::vector<int> order(static_cast<std::size_t>(cells));
      std::iota(order.begin(), order.end(), 0);
      const bool high = strategy == Placement::high_variance;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return high ? var[a] > var[b] : var[a] < var[b]; });
      chosen.assign(order.begin(), order.begin() + n);
      break;
    }
    case Placement::standard: {
      if (n == 0) break;
      const auto [rows, cols] = lattice_shape(n, h, w);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) chosen.push_back((h * (2 * r + 1) / (2 * rows)) * w + w * (2 * c + 1) / (2 * cols));
      break;
    }
    case Placement::random: {
      std::vector<int> all(static_cast<std::size_t>(cells));
      std::iota(all.begin(), all.end(), 0);
      Rng rng(seed);
      for (int i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(i, cells - 1));
        std::swap(all[i], all[j]);
      }
      chosen.assign(all.begin(), all.begin() + n);
      break;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  for (int k : chosen) layout.positions.push_back({k / w, k % w});
  layout.validate();
  return layout;
}

double noise_std_for_snr(double snr_db) { return std::pow(10.0, -snr_db / 20.0); }

std::vector<float> add_noise(std::span<const float> y, double snr_db, Rng& rng) {
  std::vector<float> out(y.begin(), y.end());
  if (std::isinf(snr_db) && snr_db > 0) return out;
  const double sd = noise_std_for_snr(snr_db);
  for (auto& v : out) v = static_cast<float>(v + sd * rng.normal());
  return out;
}

}  // namespace fieldrecon
