#include "fieldrecon/config.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace fieldrecon {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; });
    if (!known) throw ConfigError("unknown key '" + key + "' in " + section);
  }
}

template <typename U>
void read(const json& j, const std::string& section, const char* key, U& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  const std::string where = section + "." + key;
  if constexpr (std::is_same_v<U, std::uint64_t>) {
    if (!it->is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
  } else if constexpr (std::is_integral_v<U>) {
    if (!it->is_number_integer()) throw ConfigError(where + " must be an integer");
  } else if constexpr (std::is_floating_point_v<U>) {
    if (!it->is_number()) throw ConfigError(where + " must be a number");
  }
  try {
    out = it->get<U>();
  } catch (const json::exception&) {
    throw ConfigError(where + " has the wrong type");
  }
}

template <typename E, typename Parse>
void read_enum(const json& j, const std::string& section, const char* key, E& out, Parse parse) {
  std::string name;
  read(j, section, key, name);
  if (!name.empty()) out = parse(name);
}

LossWeighting parse_weighting(const std::string& name) {
  if (name == "none") return LossWeighting::none;
  if (name == "noise_variance") return LossWeighting::noise_variance;
  throw ConfigError("unknown loss weighting '" + name + "'");
}

const char* weighting_name(LossWeighting w) { return w == LossWeighting::none ? "none" : "noise_variance"; }

double read_snr(const json& j, const std::string& section) {
  const auto it = j.find("snr_db");
  if (it == j.end()) return std::numeric_limits<double>::infinity();
  if (it->is_number()) return it->get<double>();
  if (it->is_string() && (*it == "inf" || *it == "infinity")) return std::numeric_limits<double>::infinity();
  throw ConfigError(section + ".snr_db must be a number or \"inf\"");
}

json snr_json(double snr) { return std::isinf(snr) && snr > 0 ? json("inf") : json(snr); }

const json& section_or_empty(const json& j, const char* name) {
  static const json empty = json::object();
  const auto it = j.find(name);
  return it == j.end() ? empty : *it;
}

}  // namespace

json generator_to_json(const GeneratorConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"sigma_y", c.sigma_y},
          {"modulus", c.modulus},
          {"ramberg_alpha", c.ramberg_alpha},
          {"ramberg_n", c.ramberg_n},
          {"bumps", c.bumps},
          {"frames", c.frames},
          {"train_histories", c.train_histories},
          {"test_histories", c.test_histories}};
}

GeneratorConfig generator_from_json(const json& j) {
  const std::string s = "dataset";
  check_keys(j, s,
             {"height", "width", "sigma_y", "modulus", "ramberg_alpha", "ramberg_n", "bumps", "frames",
              "train_histories", "test_histories"});
  GeneratorConfig c;
  read(j, s, "height", c.height);
  read(j, s, "width", c.width);
  read(j, s, "sigma_y", c.sigma_y);
  read(j, s, "modulus", c.modulus);
  read(j, s, "ramberg_alpha", c.ramberg_alpha);
  read(j, s, "ramberg_n", c.ramberg_n);
  read(j, s, "bumps", c.bumps);
  read(j, s, "frames", c.frames);
  read(j, s, "train_histories", c.train_histories);
  read(j, s, "test_histories", c.test_histories);
  return c;
}

RunConfig parse_run_config(const json& j) {
  check_keys(j, "config", {"seed", "dataset", "schedule", "scorenet", "surrogate", "dps", "sweep"});
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
  RunConfig cfg;
  read(j, "config", "seed", cfg.seed);

  cfg.dataset = generator_from_json(section_or_empty(j, "dataset"));
  cfg.dataset.seed = cfg.seed;

  {
    const json& s = section_or_empty(j, "schedule");
    check_keys(s, "schedule", {"steps", "beta_min", "beta_max"});
    read(s, "schedule", "steps", cfg.schedule.steps);
    read(s, "schedule", "beta_min", cfg.schedule.beta_min);
    read(s, "schedule", "beta_max", cfg.schedule.beta_max);
  }
  {
    const std::string n = "scorenet";
    const json& s = section_or_empty(j, "scorenet");
    check_keys(s, n,
               {"base_channels", "depth", "channel_multipliers", "time_dim", "groups", "epochs", "batch_size",
                "learning_rate", "weighting"});
    auto& c = cfg.scorenet;
    read(s, n, "base_channels", c.net.base_channels);
    read(s, n, "depth", c.net.depth);
    read(s, n, "channel_multipliers", c.net.channel_multipliers);
    read(s, n, "time_dim", c.net.time_dim);
    read(s, n, "groups", c.net.groups);
    read(s, n, "epochs", c.epochs);
    read(s, n, "batch_size", c.batch_size);
    read(s, n, "learning_rate", c.learning_rate);
    read_enum(s, n, "weighting", c.weighting, parse_weighting);
  }
  {
    const std::string n = "surrogate";
    const json& s = section_or_empty(j, "surrogate");
    check_keys(s, n, {"hidden", "epochs", "batch_size", "learning_rate", "validation_fraction"});
    auto& c = cfg.surrogate;
    read(s, n, "hidden", c.hidden);
    read(s, n, "epochs", c.epochs);
    read(s, n, "batch_size", c.batch_size);
    read(s, n, "learning_rate", c.learning_rate);
    read(s, n, "validation_fraction", c.validation_fraction);
  }
  {
    const std::string n = "dps";
    const json& s = section_or_empty(j, "dps");
    check_keys(s, n,
               {"forward_model", "steps", "zeta", "zeta_rule", "chains", "batch", "mode", "step", "reverse",
                "sensor_count", "placement", "layout_seed", "quantity", "snr_db", "test_index"});
    auto& c = cfg.dps;
    read_enum(s, n, "forward_model", c.forward_model, parse_forward_kind);
    read(s, n, "steps", c.steps);
    read(s, n, "zeta", c.zeta);
    read_enum(s, n, "zeta_rule", c.zeta_rule, parse_zeta_rule);
    read(s, n, "chains", c.chains);
    read(s, n, "batch", c.batch);
    read_enum(s, n, "mode", c.mode, parse_guidance_mode);
    read_enum(s, n, "step", c.step, parse_guidance_step);
    read_enum(s, n, "reverse", c.reverse, parse_reverse_rule);
    read(s, n, "sensor_count", c.sensor_count);
    read_enum(s, n, "placement", c.placement, parse_placement);
    read(s, n, "layout_seed", c.layout_seed);
    read(s, n, "quantity", c.quantity);
    c.snr_db = read_snr(s, n);
    read(s, n, "test_index", c.test_index);
  }
  {
    const std::string n = "sweep";
    const json& s = section_or_empty(j, "sweep");
    check_keys(s, n, {"axis", "values", "repeats", "test_samples"});
    auto& c = cfg.sweep;
    read_enum(s, n, "axis", c.axis, parse_sweep_axis);
    if (const auto it = s.find("values"); it != s.end()) {
      if (!it->is_array()) throw ConfigError("sweep.values must be an array");
      c.values.clear();
      for (const auto& v : *it) {
        if (v.is_string()) {
          c.values.push_back(v.get<std::string>());
        } else if (v.is_number()) {
          c.values.push_back(v.dump());
        } else {
          throw ConfigError("sweep.values entries must be numbers or strings");
        }
      }
    }
    read(s, n, "repeats", c.repeats);
    read(s, n, "test_samples", c.test_samples);
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
  const auto& n = cfg.scorenet;
  const auto& d = cfg.dps;
  return {{"seed", cfg.seed},
          {"dataset", generator_to_json(cfg.dataset)},
          {"schedule",
           {{"steps", cfg.schedule.steps}, {"beta_min", cfg.schedule.beta_min}, {"beta_max", cfg.schedule.beta_max}}},
          {"scorenet",
           {{"base_channels", n.net.base_channels},
            {"depth", n.net.depth},
            {"channel_multipliers", n.net.channel_multipliers},
            {"time_dim", n.net.time_dim},
            {"groups", n.net.groups},
            {"epochs", n.epochs},
            {"batch_size", n.batch_size},
            {"learning_rate", n.learning_rate},
            {"weighting", weighting_name(n.weighting)}}},
          {"surrogate",
           {{"hidden", cfg.surrogate.hidden},
            {"epochs", cfg.surrogate.epochs},
            {"batch_size", cfg.surrogate.batch_size},
            {"learning_rate", cfg.surrogate.learning_rate},
            {"validation_fraction", cfg.surrogate.validation_fraction}}},
          {"dps",
           {{"forward_model", to_string(d.forward_model)},
            {"steps", d.steps},
            {"zeta", d.zeta},
            {"zeta_rule", to_string(d.zeta_rule)},
            {"chains", d.chains},
            {"batch", d.batch},
            {"mode", to_string(d.mode)},
            {"step", to_string(d.step)},
            {"reverse", to_string(d.reverse)},
            {"sensor_count", d.sensor_count},
            {"placement", to_string(d.placement)},
            {"layout_seed", d.layout_seed},
            {"quantity", d.quantity},
            {"snr_db", snr_json(d.snr_db)},
            {"test_index", d.test_index}}},
          {"sweep",
           {{"axis", to_string(cfg.sweep.axis)},
            {"values", cfg.sweep.values},
            {"repeats", cfg.sweep.repeats},
            {"test_samples", cfg.sweep.test_samples}}}};
}

NoiseSchedule RunConfig::training_schedule() const {
  return make_linear_schedule(schedule.steps, schedule.beta_min, schedule.beta_max);
}

std::string RunConfig::sensor_quantity() const {
  return dps.quantity.empty() ? default_sensor_quantity(dps.forward_model) : dps.quantity;
}

void RunConfig::validate() const {
  try {
    dataset.validate();
    scorenet.net.validate();
    training_schedule();
    make_sweep_spec(*this).validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (scorenet.epochs < 0 || scorenet.batch_size < 1 || !(scorenet.learning_rate > 0.0)) {
    throw ConfigError("scorenet training settings out of range");
  }
  if (surrogate.hidden < 1 || surrogate.epochs < 0 || surrogate.batch_size < 1 || !(surrogate.learning_rate > 0.0) ||
      !(surrogate.validation_fraction >= 0.0 && surrogate.validation_fraction < 1.0)) {
    throw ConfigError("surrogate training settings out of range");
  }
  if (dps.steps < 1 || dps.chains < 1 || dps.batch < 0 || !(dps.zeta >= 0.0) || dps.sensor_count < 0 ||
      dps.test_index < 0 || std::isnan(dps.snr_db)) {
    throw ConfigError("dps settings out of range");
  }
  if (!dps.quantity.empty() && dps.quantity != kStressTag && dps.quantity != kStrainTag) {
    throw ConfigError("dps.quantity must be '" + std::string(kStressTag) + "' or '" + kStrainTag + "'");
  }
}

SweepSpec make_sweep_spec(const RunConfig& cfg) {
  SweepSpec s;
  s.axis = cfg.sweep.axis;
  s.values = cfg.sweep.values;
  s.kind = cfg.dps.forward_model;
  s.repeats = cfg.sweep.repeats;
  s.seed = cfg.seed;
  s.chains = cfg.dps.chains;
  s.test_samples = cfg.sweep.test_samples;
  s.steps = cfg.dps.steps;
  s.zeta = cfg.dps.zeta;
  s.zeta_rule = cfg.dps.zeta_rule;
  s.batch = cfg.dps.batch;
  s.sensor_count = cfg.dps.sensor_count;
  s.placement = to_string(cfg.dps.placement);
  s.layout_seed = cfg.dps.layout_seed;
  s.snr_db = cfg.dps.snr_db;
  s.mode = cfg.dps.mode;
  s.step = cfg.dps.step;
  s.reverse = cfg.dps.reverse;
  return s;
}

}  // namespace fieldrecon
