#include "fieldrecon/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fieldrecon {

double wmape(std::span<const Field> samples, const Field& truth) {
  if (samples.empty()) throw ParameterError("wmape needs at least one sample");
  double weight = 0.0;
  for (float v : truth.data) weight += std::abs(static_cast<double>(v));
  if (!(weight > 0.0)) throw UndefinedMetricError("wmape is undefined for an all-zero ground truth");
  double total = 0.0;
  for (const auto& s : samples) {
    if (!(s.shape == truth.shape)) throw ShapeError("wmape: sample " + s.shape.str() + " vs truth " + truth.shape.str());
    double err = 0.0;
    for (std::size_t i = 0; i < s.data.size(); ++i) {
      err += std::abs(static_cast<double>(s.data[i]) - static_cast<double>(truth.data[i]));
    }
    total += err / weight;
  }
  return 100.0 * total / static_cast<double>(samples.size());
}

std::string default_sensor_quantity(ForwardKind kind) {
  return kind == ForwardKind::direct_selection ? kStressTag : kStrainTag;
}

const SurrogateModel* find_surrogate(const ReconstructionContext& ctx, const SensorLayout& layout) {
  const auto h = layout.hash();
  for (const auto* m : ctx.surrogates) {
    if (m && m->layout_hash == h) return m;
  }
  return nullptr;
}

namespace {

const Field& quantity_field(const PlateSample& s, const std::string& quantity) {
  if (quantity == kStressTag) return s.stress;
  if (quantity == kStrainTag) return s.strain;
  throw LayoutError("unknown sensor quantity '" + quantity + "'");
}

}  // namespace

SurrogateModel fit_surrogate_model(std::span<const PlateSample* const> train, const DatasetStats& stats,
                                   const SensorLayout& layout, const SurrogateTrainOptions& options,
                                   SurrogateTrainResult* report) {
  if (train.empty()) throw ParameterError("surrogate needs training samples");
  layout.validate();
  if (layout.size() == 0) throw LayoutError("surrogate needs at least one sensor");
  const DatasetStats st = stats.select({kStressTag});
  std::vector<Field> inputs;
  std::vector<std::vector<float>> readings;
  std::vector<int> groups;
  inputs.reserve(train.size());
  for (const auto* s : train) {
    inputs.push_back(normalize(s->stress, st));
    readings.push_back(layout.read(quantity_field(*s, layout.quantity)));
    groups.push_back(s->history);
  }
  SurrogateModel model;
  model.field_mean = st.mean[0];
  model.field_std = st.std[0];
  model.layout_hash = layout.hash();
  model.height = layout.height;
  model.width = layout.width;
  const std::size_t n = static_cast<std::size_t>(layout.size());
  model.reading_scale.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double sum = 0.0, sq = 0.0;
    for (const auto& r : readings) sum += r[k];
    const double mean = sum / static_cast<double>(readings.size());
    for (const auto& r : readings) sq += (r[k] - mean) * (r[k] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(readings.size()));
    if (!(sd >= kMinStd)) throw DegenerateStatisticsError("sensor " + std::to_string(k) + " reads a constant value");
    model.reading_scale[k] = sd;
  }
  for (auto& r : readings) {
    for (std::size_t k = 0; k < n; ++k) r[k] = static_cast<float>(r[k] / model.reading_scale[k]);
  }
  auto result = train_surrogate(inputs, readings, groups, options);
  model.mlp = result.mlp;
  if (report) *report = std::move(result);
  return model;
}

void check_context(const ReconstructionContext& ctx, ForwardKind kind, const SensorLayout& layout) {
  if (ctx.stats.channels() == 0) throw ConfigError("normalization statistics are missing");
  switch (kind) {
    case ForwardKind::direct_selection:
      if (!ctx.stress_prior) throw ConfigError("DS reconstruction needs a one-channel score checkpoint");
      break;
    case ForwardKind::channel_selection:
      if (!ctx.joint_prior) throw ConfigError("CS reconstruction needs a two-channel score checkpoint");
      break;
    case ForwardKind::surrogate:
      if (!ctx.stress_prior) throw ConfigError("NN reconstruction needs a one-channel score checkpoint");
      if (!find_surrogate(ctx, layout)) throw ConfigError("no surrogate fitted for this sensor layout");
      break;
  }
}

ReconstructionResult reconstruct(const ReconstructionContext& ctx, const PlateSample& truth,
                                 const ReconstructionRequest& request) {
  check_context(ctx, request.kind, request.layout);
  request.layout.validate();
  SensorLayout active_layout = request.layout;
  std::vector<int> active = request.active;
  if (request.use_none) {
    active_layout.positions.clear();
    active.clear();
  } else if (!active.empty()) {
    active_layout = request.layout.subset(active);
  } else {
    active.resize(static_cast<std::size_t>(request.layout.size()));
    std::iota(active.begin(), active.end(), 0);
  }

  const ScoreFunction<float>* prior = nullptr;
  DatasetStats st;
  std::vector<float> y;
  std::shared_ptr<const ForwardOperator<float>> op;
  Field truth_field;
  switch (request.kind) {
    case ForwardKind::direct_selection: {
      prior = ctx.stress_prior;
      st = ctx.stats.select({kStressTag});
      truth_field = truth.stress;
      auto ds = make_direct_selection<float>(active_layout, kStressTag);
      y = active_layout.read(normalize(truth_field, st));
      op = ds;
      break;
    }
    case ForwardKind::channel_selection: {
      prior = ctx.joint_prior;
      st = ctx.stats.select({kStressTag, kStrainTag});
      truth_field = prior_field(truth, 2);
      auto cs = make_channel_selection<float>(active_layout, st.tags);
      y = active_layout.read(normalize(truth_field, st), cs->channel());
      op = cs;
      break;
    }
    case ForwardKind::surrogate: {
      prior = ctx.stress_prior;
      st = ctx.stats.select({kStressTag});
      truth_field = truth.stress;
      const SurrogateModel& model = *find_surrogate(ctx, request.layout);
      const auto raw = request.layout.read(quantity_field(truth, request.layout.quantity));
      for (int k : active) y.push_back(static_cast<float>(raw[k] / model.reading_scale[k]));
      op = make_surrogate_operator<float>(model, active);
      break;
    }
  }

  const bool noisy = !(std::isinf(request.snr_db) && request.snr_db > 0);
  Rng noise_rng(request.noise_seed);
  y = add_noise(y, request.snr_db, noise_rng);

  std::vector<MeasurementChannel<float>> channels;
  if (active_layout.size() > 0) {
    const double sigma = noisy ? noise_std_for_snr(request.snr_db) : 0.0;
    channels.push_back({y, op, channel_zeta(request.zeta, sigma, request.zeta_rule), sigma, to_string(request.kind)});
  }
  const auto sched = make_linear_schedule(request.steps);
  auto result = dps_sample<float>(*prior, sched, channels, truth_field.shape, request.dps, st.tags);
  for (auto& s : result.samples) s = denormalize(s, st);
  summarize_samples(result);
  std::vector<Field> stress;
  stress.reserve(result.samples.size());
  for (const auto& s : result.samples) stress.push_back(s.extract_channel(0));
  result.wmape = wmape(stress, truth.stress);
  return result;
}

std::vector<const PlateSample*> select_test_samples(const Dataset& ds, int count) {
  std::vector<const PlateSample*> eligible;
  for (const auto* s : ds.split(true)) {
    if (s->load > 0.0) eligible.push_back(s);
  }
  if (count <= 0 || count >= static_cast<int>(eligible.size())) return eligible;
  std::vector<const PlateSample*> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(eligible[static_cast<std::size_t>(i) * eligible.size() / static_cast<std::size_t>(count)]);
  }
  return out;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "T") return SweepAxis::steps;
  if (name == "zeta") return SweepAxis::zeta;
  if (name == "sensor_count") return SweepAxis::sensor_count;
  if (name == "placement") return SweepAxis::placement;
  if (name == "snr") return SweepAxis::snr;
  throw ConfigError("unknown sweep axis '" + name + "' (expected T, zeta, sensor_count, placement or snr)");
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::steps:
      return "T";
    case SweepAxis::zeta:
      return "zeta";
    case SweepAxis::sensor_count:
      return "sensor_count";
    case SweepAxis::placement:
      return "placement";
    case SweepAxis::snr:
      return "snr";
  }
  return "?";
}

namespace {

double parse_number(const std::string& s, const char* axis) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError(std::string("sweep value '") + s + "' for axis " + axis + " is not a number");
  return v;
}

int parse_count(const std::string& s, const char* axis) {
  const double v = parse_number(s, axis);
  if (v != std::floor(v)) throw ConfigError(std::string("sweep value '") + s + "' for axis " + axis + " must be an integer");
  return static_cast<int>(v);
}

// Settings for one sweep point.
struct Point {
  int steps;
  double zeta;
  int count;
  std::string placement;
  double snr_db;
};

Point point_for(const SweepSpec& spec, const std::string& value) {
  Point p{spec.steps, spec.zeta, spec.sensor_count, spec.placement, spec.snr_db};
  const char* axis = to_string(spec.axis);
  switch (spec.axis) {
    case SweepAxis::steps:
      p.steps = parse_count(value, axis);
      break;
    case SweepAxis::zeta:
      p.zeta = parse_number(value, axis);
      break;
    case SweepAxis::sensor_count:
      p.count = parse_count(value, axis);
      break;
    case SweepAxis::placement:
      p.placement = value;
      break;
    case SweepAxis::snr:
      p.snr_db = parse_number(value, axis);
      break;
  }
  return p;
}

std::vector<Field> train_fields(const ReconstructionContext& ctx, const std::string& quantity) {
  std::vector<Field> out;
  out.reserve(ctx.train.size());
  for (const auto* s : ctx.train) out.push_back(quantity_field(*s, quantity));
  return out;
}

}  // namespace

void SweepSpec::validate() const {
  if (values.empty()) throw ConfigError("sweep needs at least one axis value");
  if (repeats < 1) throw ConfigError("sweep repeats must be >= 1");
  if (chains < 1) throw ConfigError("sweep needs at least one chain");
  for (const auto& v : values) {
    const Point p = point_for(*this, v);
    if (p.steps < 1) throw ConfigError("sampling steps must be >= 1");
    if (!(p.zeta >= 0.0) || !std::isfinite(p.zeta)) throw ConfigError("zeta must be finite and >= 0");
    if (p.count < 0) throw ConfigError("sensor count must be >= 0");
    parse_placement(p.placement);
  }
  if (axis == SweepAxis::sensor_count) {
    for (const auto& v : values) {
      if (point_for(*this, v).count > sensor_count) {
        throw ConfigError("sensor_count values cannot exceed the base layout size " + std::to_string(sensor_count));
      }
    }
  }
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, const ReconstructionContext& ctx,
                                const SweepProgress& progress) {
  spec.validate();
  if (ctx.test.empty()) throw ConfigError("sweep has no test samples");
  const std::string quantity = default_sensor_quantity(spec.kind);
  const auto fields = train_fields(ctx, quantity);

  // Resolve every point and check its artifacts before any sampling.
  std::vector<Point> points;
  std::vector<SensorLayout> layouts;
  for (const auto& v : spec.values) {
    points.push_back(point_for(spec, v));
    const Point& p = points.back();
    const int base = spec.axis == SweepAxis::sensor_count ? spec.sensor_count : p.count;
    layouts.push_back(place_sensors(parse_placement(p.placement), base, fields, spec.layout_seed, quantity));
    check_context(ctx, spec.kind, layouts.back());
  }

  std::vector<SweepRow> rows;
  for (std::size_t vi = 0; vi < spec.values.size(); ++vi) {
    const Point& p = points[vi];
    std::vector<double> repeat_means;
    double total_ms = 0.0;
    for (int r = 0; r < spec.repeats; ++r) {
      const std::uint64_t base_seed = spec.seed + static_cast<std::uint64_t>(r);
      ReconstructionRequest req;
      req.kind = spec.kind;
      req.layout = layouts[vi];
      req.zeta = p.zeta;
      req.zeta_rule = spec.zeta_rule;
      req.snr_db = p.snr_db;
      req.steps = p.steps;
      req.dps.chains = spec.chains;
      req.dps.mode = spec.mode;
      req.dps.step = spec.step;
      req.dps.reverse = spec.reverse;
      req.dps.batch = spec.batch;
      if (spec.axis == SweepAxis::sensor_count) {
        // Keep p.count of the base sensors, chosen at random per repeat.
        std::vector<int> idx(static_cast<std::size_t>(req.layout.size()));
        std::iota(idx.begin(), idx.end(), 0);
        Rng pick = Rng::substream(base_seed, 1);
        pick.shuffle(idx);
        idx.resize(static_cast<std::size_t>(p.count));
        std::sort(idx.begin(), idx.end());
        req.active = idx;
        req.use_none = p.count == 0;
      }
      const auto start = std::chrono::steady_clock::now();
      std::vector<double> scores;
      for (std::size_t i = 0; i < ctx.test.size(); ++i) {
        const std::uint64_t sample_seed = Rng::derive_seed(base_seed, i);
        req.dps.seed = sample_seed;
        req.noise_seed = Rng::derive_seed(sample_seed, 0x6e6f697365ULL);
        const auto res = reconstruct(ctx, *ctx.test[i], req);
        scores.push_back(*res.wmape);
        if (progress.on_sample) progress.on_sample(spec.values[vi], r, static_cast<int>(i), *res.wmape);
      }
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      total_ms += ms;
      const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
      double sq = 0.0;
      for (double s : scores) sq += (s - mean) * (s - mean);
      const double sd = scores.size() > 1 ? std::sqrt(sq / static_cast<double>(scores.size() - 1)) : 0.0;
      repeat_means.push_back(mean);
      rows.push_back({to_string(spec.axis), spec.values[vi], to_string(spec.kind), r, mean, sd, ms, base_seed});
      if (progress.on_row) progress.on_row(rows.back());
    }
    const double mean =
        std::accumulate(repeat_means.begin(), repeat_means.end(), 0.0) / static_cast<double>(repeat_means.size());
    double sq = 0.0;
    for (double m : repeat_means) sq += (m - mean) * (m - mean);
    const double sd = repeat_means.size() > 1 ? std::sqrt(sq / static_cast<double>(repeat_means.size() - 1)) : 0.0;
    rows.push_back({to_string(spec.axis), spec.values[vi], to_string(spec.kind), -1, mean, sd, total_ms, spec.seed});
    if (progress.on_row) progress.on_row(rows.back());
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << kSweepCsvHeader << '\n';
  std::ostringstream line;
  for (const auto& r : rows) {
    line.str("");
    line << csv_field(r.axis) << ',' << csv_field(r.value) << ',' << csv_field(r.forward_model) << ',' << r.repeat
         << ',' << std::setprecision(10) << r.mean_wmape_pct << ',' << r.std_wmape_pct << ',' << std::fixed
         << std::setprecision(3) << r.wall_ms << std::defaultfloat << ',' << r.seed;
    out << line.str() << '\n';
  }
}

}  // namespace fieldrecon
