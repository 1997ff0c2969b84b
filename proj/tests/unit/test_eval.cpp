#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fieldrecon/eval.hpp"
#include "fieldrecon/unet.hpp"

using namespace fieldrecon;

namespace {

Field row(std::vector<float> v) {
  Field f(Shape{1, 1, static_cast<int>(v.size())});
  f.data = std::move(v);
  return f;
}

UNetConfig tiny(int channels) {
  UNetConfig c;
  c.in_channels = channels;
  c.base_channels = 4;
  c.depth = 1;
  c.channel_multipliers = {1, 2};
  c.time_dim = 8;
  c.groups = 2;
  return c;
}

// Small dataset, untrained priors and one fitted surrogate: enough to drive the harness.
class SweepHarness : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    GeneratorConfig g;
    g.height = 10;
    g.width = 7;
    g.frames = 4;
    g.train_histories = 6;
    g.test_histories = 2;
    g.seed = 12;
    data_ = new Dataset(generate_dataset(g));
    stress_ = new UNet<float>(tiny(1), 1);
    joint_ = new UNet<float>(tiny(2), 2);
    std::vector<Field> joint, strain;
    for (const auto* s : data_->split(false)) {
      joint.push_back(prior_field(*s, 2));
      strain.push_back(s->strain);
    }
    stats_ = new DatasetStats(compute_stats(joint));
    const auto layout = place_sensors(Placement::standard, 15, strain, 0, kStrainTag);
    SurrogateTrainOptions opt;
    opt.hidden = 16;
    opt.epochs = 5;
    surrogate_ = new SurrogateModel(fit_surrogate_model(data_->split(false), *stats_, layout, opt));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete stress_;
    delete joint_;
    delete stats_;
    delete surrogate_;
  }

  ReconstructionContext context(int test_count = 2) const {
    ReconstructionContext ctx;
    ctx.stress_prior = stress_;
    ctx.joint_prior = joint_;
    ctx.surrogates = {surrogate_};
    ctx.stats = *stats_;
    ctx.train = data_->split(false);
    ctx.test = select_test_samples(*data_, test_count);
    return ctx;
  }

  static SweepSpec base_spec() {
    SweepSpec s;
    s.axis = SweepAxis::steps;
    s.values = {"5"};
    s.chains = 2;
    s.steps = 5;
    s.seed = 50;
    return s;
  }

  static Dataset* data_;
  static UNet<float>* stress_;
  static UNet<float>* joint_;
  static DatasetStats* stats_;
  static SurrogateModel* surrogate_;
};

Dataset* SweepHarness::data_ = nullptr;
UNet<float>* SweepHarness::stress_ = nullptr;
UNet<float>* SweepHarness::joint_ = nullptr;
DatasetStats* SweepHarness::stats_ = nullptr;
SurrogateModel* SweepHarness::surrogate_ = nullptr;

}  // namespace

TEST(Wmape, HandExample) {
  const std::vector<Field> samples{row({1, 3})};
  EXPECT_NEAR(wmape(samples, row({2, 4})), 100.0 / 3.0, 1e-6);
}

TEST(Wmape, ExactSamplesScoreZero) {
  const auto truth = row({1, -2, 3});
  const std::vector<Field> samples{truth, truth, truth};
  EXPECT_EQ(wmape(samples, truth), 0.0);
}

TEST(Wmape, SymmetricErrorsDoNotCancel) {
  const auto truth = row({2, 4, 6});
  const std::vector<Field> over{row({3, 5, 7})}, under{row({1, 3, 5})}, both{row({3, 5, 7}), row({1, 3, 5})};
  EXPECT_DOUBLE_EQ(wmape(both, truth), wmape(over, truth));
  EXPECT_DOUBLE_EQ(wmape(both, truth), wmape(under, truth));
}

TEST(Wmape, ScaleInvariantNonNegativeAndZeroOnlyAtTruth) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Field truth(Shape{1, 4, 5});
    rng.fill_normal<float>(truth.data);
    std::vector<Field> samples(3, truth);
    for (auto& s : samples) rng.fill_normal<float>(s.data);
    const double w = wmape(samples, truth);
    EXPECT_GT(w, 0.0);
    // Power-of-two factors scale exactly in binary floating point.
    for (float c : {0.25f, 8.0f}) {
      Field ct = truth;
      for (auto& v : ct.data) v *= c;
      std::vector<Field> cs = samples;
      for (auto& s : cs)
        for (auto& v : s.data) v *= c;
      EXPECT_DOUBLE_EQ(wmape(cs, ct), w);
    }
    samples[1] = truth;
    samples[0] = truth;
    samples[2] = truth;
    samples[2].data[trial % 20] += 1e-3f;
    EXPECT_GT(wmape(samples, truth), 0.0);
  }
}

TEST(Wmape, RejectsZeroTruthEmptyAndShapeMismatch) {
  const std::vector<Field> one{row({1, 1})};
  EXPECT_THROW(wmape(one, row({0, 0})), UndefinedMetricError);
  EXPECT_THROW(wmape({}, row({1, 1})), ParameterError);
  EXPECT_THROW(wmape(one, row({1, 1, 1})), ShapeError);
}

TEST(SweepAxis, ParsesNames) {
  EXPECT_EQ(parse_sweep_axis("T"), SweepAxis::steps);
  EXPECT_EQ(parse_sweep_axis("snr"), SweepAxis::snr);
  EXPECT_THROW(parse_sweep_axis("temperature"), ConfigError);
  EXPECT_STREQ(to_string(SweepAxis::sensor_count), "sensor_count");
}

TEST(SweepSpecCheck, RejectsBadSpecs) {
  SweepSpec s;
  s.values = {};
  EXPECT_THROW(s.validate(), ConfigError);
  s.values = {"100"};
  s.repeats = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.repeats = 1;
  s.values = {"abc"};
  EXPECT_THROW(s.validate(), ConfigError);
  s.axis = SweepAxis::sensor_count;
  s.values = {"16"};
  EXPECT_THROW(s.validate(), ConfigError);
  s.values = {"2.5"};
  EXPECT_THROW(s.validate(), ConfigError);
  s.axis = SweepAxis::placement;
  s.values = {"diagonal"};
  EXPECT_THROW(s.validate(), ConfigError);
  s.values = {"high_variance", "random"};
  EXPECT_NO_THROW(s.validate());
}

TEST_F(SweepHarness, TestSamplesSkipZeroLoad) {
  const auto all = select_test_samples(*data_, 0);
  EXPECT_EQ(all.size(), 6u);  // 2 histories x 3 loaded frames
  for (const auto* s : all) {
    EXPECT_GT(s->load, 0.0);
    EXPECT_TRUE(data_->is_test(*s));
  }
  const auto two = select_test_samples(*data_, 2);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0], all[0]);
  EXPECT_EQ(two[1], all[3]);
}

TEST_F(SweepHarness, SingleRowEqualsDirectMetric) {
  const auto ctx = context(1);
  const auto spec = base_spec();
  const auto rows = run_sweep(spec, ctx);
  ASSERT_EQ(rows.size(), 2u);  // one repeat plus the summary
  EXPECT_EQ(rows[0].repeat, 0);
  EXPECT_EQ(rows[1].repeat, -1);
  EXPECT_EQ(rows[0].axis, "T");
  EXPECT_EQ(rows[0].value, "5");
  EXPECT_EQ(rows[0].forward_model, "DS");

  ReconstructionRequest req;
  req.kind = ForwardKind::direct_selection;
  req.layout = place_sensors(Placement::standard, 15, [&] {
    std::vector<Field> f;
    for (const auto* s : ctx.train) f.push_back(s->stress);
    return f;
  }(), 0, kStressTag);
  req.steps = 5;
  req.zeta = spec.zeta;
  req.dps.chains = 2;
  req.dps.seed = Rng::derive_seed(spec.seed, 0);
  req.noise_seed = Rng::derive_seed(req.dps.seed, 0x6e6f697365ULL);
  const auto res = reconstruct(ctx, *ctx.test[0], req);
  std::vector<Field> stress;
  for (const auto& s : res.samples) stress.push_back(s.extract_channel(0));
  EXPECT_DOUBLE_EQ(rows[0].mean_wmape_pct, wmape(stress, ctx.test[0]->stress));
  EXPECT_DOUBLE_EQ(rows[1].mean_wmape_pct, rows[0].mean_wmape_pct);
  EXPECT_TRUE(std::isfinite(rows[0].mean_wmape_pct));
}

TEST_F(SweepHarness, ZeroSensorsIsUnconditional) {
  const auto ctx = context(1);
  auto spec = base_spec();
  spec.axis = SweepAxis::sensor_count;
  spec.values = {"0"};
  const auto rows = run_sweep(spec, ctx);

  // Same seeds, no guidance at all.
  const auto sched = make_linear_schedule(5);
  DpsOptions opt;
  opt.chains = 2;
  opt.seed = Rng::derive_seed(spec.seed, 0);
  const auto st = ctx.stats.select({kStressTag});
  auto res = dps_sample<float>(*stress_, sched, {}, Shape{1, 10, 7}, opt, st.tags);
  std::vector<Field> phys;
  for (const auto& s : res.samples) phys.push_back(denormalize(s, st));
  EXPECT_DOUBLE_EQ(rows[0].mean_wmape_pct, wmape(phys, ctx.test[0]->stress));
}

TEST_F(SweepHarness, RepeatsUseConsecutiveSeedsAndAreDeterministic) {
  const auto ctx = context(2);
  auto spec = base_spec();
  spec.axis = SweepAxis::sensor_count;
  spec.values = {"15", "4"};
  spec.repeats = 2;
  const auto a = run_sweep(spec, ctx);
  const auto b = run_sweep(spec, ctx);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mean_wmape_pct, b[i].mean_wmape_pct);
    EXPECT_EQ(a[i].std_wmape_pct, b[i].std_wmape_pct);
    EXPECT_EQ(a[i].seed, b[i].seed);
  }
  EXPECT_EQ(a[0].seed, 50u);
  EXPECT_EQ(a[1].seed, 51u);
  EXPECT_EQ(a[2].repeat, -1);
  EXPECT_NEAR(a[2].mean_wmape_pct, 0.5 * (a[0].mean_wmape_pct + a[1].mean_wmape_pct), 1e-12);
  EXPECT_NEAR(a[2].std_wmape_pct, std::abs(a[0].mean_wmape_pct - a[1].mean_wmape_pct) / std::sqrt(2.0), 1e-12);
}

TEST_F(SweepHarness, MissingSurrogateFailsBeforeSampling) {
  auto ctx = context(1);
  auto spec = base_spec();
  spec.kind = ForwardKind::surrogate;
  spec.axis = SweepAxis::placement;
  spec.values = {"standard", "high_variance"};
  int sampled = 0;
  SweepProgress progress;
  progress.on_sample = [&](const std::string&, int, int, double) { ++sampled; };
  EXPECT_THROW(run_sweep(spec, ctx, progress), ConfigError);
  EXPECT_EQ(sampled, 0);
  ctx.joint_prior = nullptr;
  spec.kind = ForwardKind::channel_selection;
  spec.values = {"standard"};
  EXPECT_THROW(run_sweep(spec, ctx, progress), ConfigError);
  EXPECT_EQ(sampled, 0);
}

TEST_F(SweepHarness, EveryForwardModelRuns) {
  const auto ctx = context(1);
  for (auto kind : {ForwardKind::direct_selection, ForwardKind::channel_selection, ForwardKind::surrogate}) {
    auto spec = base_spec();
    spec.kind = kind;
    const auto rows = run_sweep(spec, ctx);
    EXPECT_TRUE(std::isfinite(rows.back().mean_wmape_pct)) << to_string(kind);
    EXPECT_EQ(rows.back().forward_model, to_string(kind));
  }
}

TEST_F(SweepHarness, DirectSelectionRejectsStrainSensors) {
  const auto ctx = context(1);
  ReconstructionRequest req;
  req.kind = ForwardKind::direct_selection;
  req.layout = SensorLayout{10, 7, kStrainTag, {{1, 1}}};
  req.steps = 3;
  EXPECT_THROW(reconstruct(ctx, *ctx.test[0], req), LayoutError);
}

TEST(SweepCsv, HeaderAndRows) {
  std::vector<SweepRow> rows{{"T", "100", "DS", 0, 12.5, 1.25, 3.14159, 7}, {"placement", "a,b", "NN", -1, 1, 0, 0, 8}};
  std::ostringstream out;
  write_sweep_csv(out, rows);
  EXPECT_EQ(out.str(),
            "axis,value,forward_model,repeat,mean_wmape_pct,std_wmape_pct,wall_ms,seed\n"
            "T,100,DS,0,12.5,1.25,3.142,7\n"
            "placement,\"a,b\",NN,-1,1,0,0.000,8\n");
}
