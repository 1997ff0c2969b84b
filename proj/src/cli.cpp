#include "fieldrecon/cli.hpp"

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fieldrecon/config.hpp"
#include "fieldrecon/eval.hpp"
#include "fieldrecon/io.hpp"

namespace fieldrecon {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  int threads = 0;
  std::string kind;        // train-score: DS, CS or NN
  std::string input;       // render
};

// Layout of a workspace directory.
struct Workspace {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path score(int channels) const { return root / (channels == 1 ? "score_1ch.snet" : "score_2ch.snet"); }
  fs::path surrogates() const { return root / "surrogates"; }
  fs::path surrogate(std::uint64_t hash) const {
    char buf[40];
    std::snprintf(buf, sizeof buf, "layout_%016llx.smlp", static_cast<unsigned long long>(hash));
    return surrogates() / buf;
  }
};

RunConfig load_config(const Options& o) {
  json j = json::object();
  if (!o.config_path.empty()) {
    try {
      j = json::parse(read_text(o.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    } catch (const FormatError&) {
      throw ConfigError("cannot read config " + o.config_path);
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
  }
  if (o.seed) j["seed"] = *o.seed;
  return parse_run_config(j);
}

std::vector<Field> fields_of(std::span<const PlateSample* const> samples, int channels) {
  std::vector<Field> out;
  out.reserve(samples.size());
  for (const auto* s : samples) out.push_back(prior_field(*s, channels));
  return out;
}

SensorLayout layout_for(const RunConfig& cfg, Placement placement, int count, const Dataset& ds) {
  const std::string quantity = cfg.sensor_quantity();
  const auto train = ds.split(false);
  std::vector<Field> fields;
  fields.reserve(train.size());
  for (const auto* s : train) fields.push_back(quantity == kStressTag ? s->stress : s->strain);
  return place_sensors(placement, count, fields, cfg.dps.layout_seed, quantity);
}

// Models loaded for sampling; the context points into it.
struct Loaded {
  LoadedDataset data;
  std::optional<ScoreCheckpoint> stress, joint;
  std::vector<SurrogateModel> surrogates;
  ReconstructionContext ctx;
};

void load_models(Loaded& l, const Workspace& ws, ForwardKind kind) {
  l.data = load_dataset(ws.data());
  if (required_score_channels(kind) == 1) {
    l.stress = load_score_checkpoint(ws.score(1));
  } else {
    l.joint = load_score_checkpoint(ws.score(2));
  }
  if (kind == ForwardKind::surrogate && fs::is_directory(ws.surrogates())) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ws.surrogates())) {
      if (e.path().extension() == ".smlp") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) l.surrogates.push_back(load_surrogate(f));
  }
  l.ctx.stress_prior = l.stress ? &l.stress->net : nullptr;
  l.ctx.joint_prior = l.joint ? &l.joint->net : nullptr;
  for (const auto& m : l.surrogates) l.ctx.surrogates.push_back(&m);
  l.ctx.stats = l.data.stats;
  l.ctx.train = l.data.dataset.split(false);
}

int cmd_gen_data(const RunConfig& cfg, const Workspace& ws, std::ostream& out) {
  const Dataset ds = generate_dataset(cfg.dataset);
  const auto train = ds.split(false);
  const DatasetStats stats = compute_stats(fields_of(train, 2));
  save_dataset(ws.data(), ds, stats);
  out << "wrote " << ds.samples.size() << " samples (" << train.size() << " train) to " << ws.data().string()
      << '\n';
  return kExitOk;
}

int cmd_train_score(const RunConfig& cfg, const Workspace& ws, const Options& o, std::ostream& out,
                    std::ostream& err) {
  const ForwardKind kind = o.kind.empty() ? cfg.dps.forward_model : parse_forward_kind(o.kind);
  const int channels = required_score_channels(kind);
  const LoadedDataset data = load_dataset(ws.data());
  const DatasetStats st = channels == 1 ? data.stats.select({kStressTag}) : data.stats.select({kStressTag, kStrainTag});
  const auto train = data.dataset.split(false);
  const auto fields = normalize(fields_of(train, channels), st);

  UNetConfig net = cfg.scorenet.net;
  net.in_channels = channels;
  ScoreTrainOptions opt;
  opt.epochs = cfg.scorenet.epochs;
  opt.batch_size = cfg.scorenet.batch_size;
  opt.learning_rate = cfg.scorenet.learning_rate;
  opt.weighting = cfg.scorenet.weighting;
  opt.seed = Rng::derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(channels));
  const auto start = std::chrono::steady_clock::now();
  opt.on_epoch = [&](int epoch, double loss) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    err << "epoch " << epoch + 1 << '/' << opt.epochs << "  loss " << loss << "  " << std::fixed
        << std::setprecision(1) << s << "s" << std::defaultfloat << std::setprecision(6) << '\n';
  };
  const auto result = train_score(fields, cfg.training_schedule(), net, opt);
  save_score_checkpoint(ws.score(channels), result.net, st);
  out << "wrote " << ws.score(channels).string() << " (" << result.net.parameter_count() << " parameters)\n";
  return kExitOk;
}

int cmd_train_surrogate(const RunConfig& cfg, const Workspace& ws, std::ostream& out, std::ostream& err) {
  const LoadedDataset data = load_dataset(ws.data());
  std::vector<Placement> placements{cfg.dps.placement};
  if (cfg.sweep.axis == SweepAxis::placement) {
    for (const auto& v : cfg.sweep.values) {
      const Placement p = parse_placement(v);
      if (std::find(placements.begin(), placements.end(), p) == placements.end()) placements.push_back(p);
    }
  }
  const auto train = data.dataset.split(false);
  SurrogateTrainOptions opt;
  opt.hidden = cfg.surrogate.hidden;
  opt.epochs = cfg.surrogate.epochs;
  opt.batch_size = cfg.surrogate.batch_size;
  opt.learning_rate = cfg.surrogate.learning_rate;
  opt.validation_fraction = cfg.surrogate.validation_fraction;
  opt.seed = Rng::derive_seed(cfg.seed, 200);
  opt.on_epoch = [&](int epoch, double tr, double val) {
    if ((epoch + 1) % 25 == 0 || epoch + 1 == opt.epochs) {
      err << "epoch " << epoch + 1 << '/' << opt.epochs << "  train " << tr << "  validation " << val << '\n';
    }
  };
  for (Placement p : placements) {
    const SensorLayout layout = layout_for(cfg, p, cfg.dps.sensor_count, data.dataset);
    SurrogateTrainResult report;
    const SurrogateModel model = fit_surrogate_model(train, data.stats, layout, opt, &report);
    save_surrogate(ws.surrogate(layout.hash()), model);
    out << to_string(p) << ": wrote " << ws.surrogate(layout.hash()).string() << "  validation relative error "
        << 100.0 * report.validation_relative_error << "%\n";
  }
  return kExitOk;
}

DpsOptions dps_options(const RunConfig& cfg) {
  DpsOptions d;
  d.chains = cfg.dps.chains;
  d.seed = cfg.seed;
  d.mode = cfg.dps.mode;
  d.step = cfg.dps.step;
  d.reverse = cfg.dps.reverse;
  d.batch = cfg.dps.batch;
  return d;
}

int cmd_sample(const RunConfig& cfg, const Workspace& ws, std::ostream& out) {
  const int channels = required_score_channels(cfg.dps.forward_model);
  const LoadedDataset data = load_dataset(ws.data());
  const ScoreCheckpoint ck = load_score_checkpoint(ws.score(channels));
  const Shape shape{channels, data.dataset.config.height, data.dataset.config.width};
  const auto sched = make_linear_schedule(cfg.dps.steps);
  auto result = dps_sample<float>(ck.net, sched, {}, shape, dps_options(cfg), ck.stats.tags);
  for (auto& s : result.samples) s = denormalize(s, ck.stats);
  summarize_samples(result);
  save_reconstruction(ws.root / "sample", result);
  out << "wrote " << result.samples.size() << " unconditional samples to " << (ws.root / "sample").string() << '\n';
  return kExitOk;
}

int cmd_reconstruct(const RunConfig& cfg, const Workspace& ws, std::ostream& out) {
  Loaded l;
  load_models(l, ws, cfg.dps.forward_model);
  const auto tests = select_test_samples(l.data.dataset, 0);
  if (tests.empty()) throw ConfigError("dataset has no test frames with nonzero load");
  if (cfg.dps.test_index >= static_cast<int>(tests.size())) {
    throw ConfigError("dps.test_index must be below " + std::to_string(tests.size()));
  }
  const PlateSample& truth = *tests[static_cast<std::size_t>(cfg.dps.test_index)];
  ReconstructionRequest req;
  req.kind = cfg.dps.forward_model;
  req.layout = layout_for(cfg, cfg.dps.placement, cfg.dps.sensor_count, l.data.dataset);
  req.use_none = cfg.dps.sensor_count == 0;
  req.zeta = cfg.dps.zeta;
  req.zeta_rule = cfg.dps.zeta_rule;
  req.snr_db = cfg.dps.snr_db;
  req.steps = cfg.dps.steps;
  req.dps = dps_options(cfg);
  req.noise_seed = Rng::derive_seed(cfg.seed, 0x6e6f697365ULL);
  const auto result = reconstruct(l.ctx, truth, req);
  const fs::path dir = ws.root / "reconstruction";
  save_reconstruction(dir, result);
  save_field(dir / "truth.fgrd", prior_field(truth, required_score_channels(req.kind)));
  out << "history " << truth.history << " frame " << truth.frame << "  " << to_string(req.kind) << "  "
      << req.layout.size() << " sensors  T=" << req.steps << "  zeta=" << req.zeta << "  WMAPE " << std::fixed
      << std::setprecision(3) << *result.wmape << "%\n";
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, const Workspace& ws, std::ostream& out, std::ostream& err) {
  Loaded l;
  load_models(l, ws, cfg.dps.forward_model);
  l.ctx.test = select_test_samples(l.data.dataset, cfg.sweep.test_samples);
  const SweepSpec spec = make_sweep_spec(cfg);
  SweepProgress progress;
  progress.on_row = [&](const SweepRow& r) {
    err << r.axis << '=' << r.value << (r.repeat < 0 ? " summary" : " repeat " + std::to_string(r.repeat))
        << "  WMAPE " << r.mean_wmape_pct << "% (std " << r.std_wmape_pct << ")\n";
  };
  const auto rows = run_sweep(spec, l.ctx, progress);
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  write_text(ws.root / "sweep.csv", csv.str());
  json sidecar = {{"config", to_json(cfg)},
                  {"axis", to_string(spec.axis)},
                  {"values", spec.values},
                  {"forward_model", to_string(spec.kind)},
                  {"repeats", spec.repeats},
                  {"test_samples", l.ctx.test.size()},
                  {"chains", spec.chains},
                  {"seed", spec.seed}};
  write_text(ws.root / "sweep.json", sidecar.dump(2) + "\n");
  out << csv.str();
  return kExitOk;
}

int cmd_render(const Options& o, std::ostream& out) {
  if (o.input.empty()) throw ConfigError("render needs an input field file");
  const Field f = load_field(o.input);
  const fs::path dir = o.out;
  const std::string stem = fs::path(o.input).stem().string();
  std::ostringstream pgm, csv;
  write_pgm(pgm, f);
  write_field_csv(csv, f);
  write_text(dir / (stem + ".pgm"), pgm.str());
  write_text(dir / (stem + ".csv"), csv.str());
  out << "wrote " << (dir / (stem + ".pgm")).string() << " and " << (dir / (stem + ".csv")).string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse-sensor field reconstruction with diffusion posterior sampling", "fieldrecon"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", o.config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
      sub->add_option("--seed", o.seed, "Seed (overrides the config)");
    }
    sub->add_option("--out", o.out, "Workspace / output directory")->capture_default_str();
    sub->add_option("--threads", o.threads, "OpenMP threads (0 = auto)")->check(CLI::NonNegativeNumber);
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  auto* ts = app.add_subcommand("train-score", "Train a score network");
  auto* tsur = app.add_subcommand("train-surrogate", "Train NN surrogates for the configured layouts");
  auto* smp = app.add_subcommand("sample", "Unconditional samples from the prior");
  auto* rec = app.add_subcommand("reconstruct", "DPS reconstruction of one test frame");
  auto* swp = app.add_subcommand("sweep", "Run the configured parameter sweep");
  auto* ren = app.add_subcommand("render", "Render a field file as PGM + CSV");
  for (auto* s : {gen, ts, tsur, smp, rec, swp}) common(s, true);
  common(ren, false);
  ts->add_option("--kind", o.kind, "Forward model the prior is for (DS, CS, NN)");
  ren->add_option("input", o.input, "Field file (.fgrd)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (o.threads > 0) omp_set_num_threads(o.threads);

  try {
    if (ren->parsed()) return cmd_render(o, out);
    const RunConfig cfg = load_config(o);
    const Workspace ws{o.out};
    if (gen->parsed()) return cmd_gen_data(cfg, ws, out);
    if (ts->parsed()) return cmd_train_score(cfg, ws, o, out, err);
    if (tsur->parsed()) return cmd_train_surrogate(cfg, ws, out, err);
    if (smp->parsed()) return cmd_sample(cfg, ws, out);
    if (rec->parsed()) return cmd_reconstruct(cfg, ws, out);
    if (swp->parsed()) return cmd_sweep(cfg, ws, out, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "invalid parameter: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const TrainingError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace fieldrecon
