#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fieldrecon/analytic_scores.hpp"
#include "fieldrecon/dps.hpp"
#include "fieldrecon/unet.hpp"
#include "test_util.hpp"

using namespace fieldrecon;

namespace {

NoiseSchedule single_step(double alpha_bar) {
  NoiseSchedule s;
  s.steps = 1;
  s.beta = {1.0 - alpha_bar};
  s.alpha = {alpha_bar};
  s.alpha_bar = {alpha_bar};
  return s;
}

UNetConfig tiny_net_config() {
  UNetConfig c;
  c.base_channels = 4;
  c.depth = 1;
  c.channel_multipliers = {1, 2};
  c.time_dim = 8;
  c.groups = 2;
  return c;
}

template <typename T>
UNet<T> tiny_net(std::uint64_t seed) {
  UNet<T> net(tiny_net_config(), seed);
  Rng rng(seed + 17);
  for (auto& p : net.mutable_parameters()) p = static_cast<T>(p + 0.05 * rng.normal());
  return net;
}

SensorLayout sensors(int h, int w, std::vector<GridPoint> pts) { return SensorLayout{h, w, kStressTag, std::move(pts)}; }

template <typename T>
MeasurementChannel<T> ds_channel(const SensorLayout& layout, std::vector<T> y, double zeta, std::string name = "ds") {
  MeasurementChannel<T> ch;
  ch.y = std::move(y);
  ch.op = make_direct_selection<T>(layout, kStressTag);
  ch.zeta = zeta;
  ch.name = std::move(name);
  return ch;
}

// ||y - A(x0_hat(x_t))||^2 for a single sample.
template <typename T>
double residual_norm(const ScoreFunction<T>& f, const Tensor<T>& x, const MeasurementChannel<T>& ch, int t,
                     const NoiseSchedule& sched) {
  const auto eval = f.evaluate_at(x, t, sched, false);
  const auto x0 = estimate_x0_hat(x, eval.score, t, sched);
  const auto pred = ch.op->apply(std::span<const T>(x0.data));
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) s += (static_cast<double>(pred[k]) - ch.y[k]) * (pred[k] - ch.y[k]);
  return s;
}

// Returns NaN from step `bad` downwards, -x otherwise.
class PoisonedScore final : public ScoreFunction<double> {
 public:
  explicit PoisonedScore(int bad) : bad_(bad) {}
  int channels() const override { return 0; }
  ScoreEvaluation<double> evaluate(const Tensor<double>& x, std::span<const int> steps, const NoiseSchedule&,
                                   bool) const override {
    ScoreEvaluation<double> e;
    e.score = Tensor<double>(x.batch, x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      e.score.data[i] = steps[0] <= bad_ ? std::numeric_limits<double>::quiet_NaN() : -x.data[i];
    }
    return e;
  }
  Tensor<double> input_vjp(const ScoreTape&, const Tensor<double>& g) const override { return g; }

 private:
  int bad_;
};

}  // namespace

TEST(Tweedie, IdentityWhenAlphaBarIsOne) {
  const auto s = single_step(1.0);
  const std::vector<double> x{0.3, -2.0, 5.0}, score{1.0, 2.0, 3.0};
  std::vector<double> out(3);
  estimate_x0_hat<double>(x, score, 1, s, out);
  EXPECT_EQ(out, x);
}

TEST(Tweedie, HandExample) {
  const auto s = single_step(0.25);
  const std::vector<double> x{1.0}, score{-1.0};
  std::vector<double> out(1);
  estimate_x0_hat<double>(x, score, 1, s, out);
  EXPECT_NEAR(out[0], 0.5, 1e-15);
}

TEST(Tweedie, MatchesGaussianConditionalMeanAtEveryStep) {
  const Shape shape{1, 3, 2};
  const std::vector<double> mu{0.5, -1.0, 2.0, 0.0, 1.5, -0.3};
  const GaussianPriorScore<double> prior(shape, mu);
  const auto sched = make_linear_schedule(500);
  double worst = 0.0;
  for (int t = 1; t <= sched.steps; ++t) {
    Tensor<double> x(1, shape);
    Rng(static_cast<std::uint64_t>(t)).fill_normal<double>(x.data);
    const auto eval = prior.evaluate_at(x, t, sched, false);
    const auto x0 = estimate_x0_hat(x, eval.score, t, sched);
    const double ab = sched.alpha_bar_at(t);
    for (std::size_t i = 0; i < mu.size(); ++i) {
      // x_t = sqrt(ab) x0 + sqrt(1-ab) eps with x0 ~ N(mu, I): E[x0|x_t] = mu + sqrt(ab) (x_t - sqrt(ab) mu).
      const double exact = mu[i] + std::sqrt(ab) * (x.data[i] - std::sqrt(ab) * mu[i]);
      worst = std::max(worst, std::abs(x0.data[i] - exact));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Guidance, FullModeMatchesFiniteDifferencesAt64Bit) {
  const auto net = tiny_net<double>(3);
  const auto sched = make_linear_schedule(100);
  const Shape shape{1, 6, 5};
  const auto layout = sensors(6, 5, {{0, 0}, {2, 3}, {5, 4}, {3, 1}});
  const auto ch = ds_channel<double>(layout, {0.5, -1.0, 0.2, 1.3}, 1.0);
  for (int t : {3, 40, 90}) {
    Tensor<double> x(1, shape);
    Rng(static_cast<std::uint64_t>(t)).fill_normal<double>(x.data);
    const auto g = likelihood_guidance<double>(net, x, ch, t, sched, GuidanceMode::full);
    auto f = [&](std::span<const double> v) {
      Tensor<double> xx(1, shape);
      std::copy(v.begin(), v.end(), xx.data.begin());
      return residual_norm<double>(net, xx, ch, t, sched);
    };
    EXPECT_LT(check::relative_error(g.data, check::numeric_gradient(f, x.data, 1e-5)), 1e-4) << "t=" << t;
  }
}

TEST(Guidance, FullModeMatchesFiniteDifferencesAt32Bit) {
  const auto net = tiny_net<float>(4);
  const auto ref = net.cast<double>();
  const auto sched = make_linear_schedule(100);
  const Shape shape{1, 6, 5};
  const auto layout = sensors(6, 5, {{1, 1}, {4, 2}, {0, 4}});
  const auto ch = ds_channel<float>(layout, {0.1f, 0.9f, -0.4f}, 1.0);
  const auto ch64 = ds_channel<double>(layout, {0.1, 0.9, -0.4}, 1.0);
  for (int t : {5, 50}) {
    Tensor<float> x(1, shape);
    Rng(static_cast<std::uint64_t>(t + 7)).fill_normal<float>(x.data);
    const auto g = likelihood_guidance<float>(net, x, ch, t, sched, GuidanceMode::full);
    auto f = [&](std::span<const double> v) {
      Tensor<double> xx(1, shape);
      std::copy(v.begin(), v.end(), xx.data.begin());
      return residual_norm<double>(ref, xx, ch64, t, sched);
    };
    const std::vector<double> x64(x.data.begin(), x.data.end()), g64(g.data.begin(), g.data.end());
    EXPECT_LT(check::relative_error(g64, check::numeric_gradient(f, x64, 1e-5)), 1e-2) << "t=" << t;
  }
}

TEST(Guidance, DetachedModeIgnoresScoreJacobian) {
  const GaussianPriorScore<double> prior(Shape{1, 2, 2});
  const auto sched = make_linear_schedule(50);
  const auto ch = ds_channel<double>(sensors(2, 2, {{0, 0}, {1, 1}}), {1.0, -1.0}, 1.0);
  Tensor<double> x(1, Shape{1, 2, 2});
  Rng(1).fill_normal<double>(x.data);
  const int t = 20;
  const double ab = sched.alpha_bar_at(t);
  const auto full = likelihood_guidance<double>(prior, x, ch, t, sched, GuidanceMode::full);
  const auto det = likelihood_guidance<double>(prior, x, ch, t, sched, GuidanceMode::detached);
  // With score -x_t: d x0_hat / d x_t = ab / sqrt(ab) in full mode, 1 / sqrt(ab) detached.
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(full.data[i], det.data[i] * ab, 1e-12);
}

TEST(Guidance, ZeroResidualGivesZeroGradient) {
  const auto net = tiny_net<double>(5);
  const auto sched = make_linear_schedule(100);
  const Shape shape{1, 6, 5};
  const auto layout = sensors(6, 5, {{0, 1}, {3, 3}});
  Tensor<double> x(1, shape);
  Rng(2).fill_normal<double>(x.data);
  const int t = 30;
  const auto eval = net.evaluate_at(x, t, sched, false);
  const auto x0 = estimate_x0_hat(x, eval.score, t, sched);
  auto ch = ds_channel<double>(layout, {}, 1.0);
  ch.y = ch.op->apply(std::span<const double>(x0.data));
  const auto g = likelihood_guidance<double>(net, x, ch, t, sched);
  for (double v : g.data) EXPECT_EQ(v, 0.0);
}

TEST(Guidance, PointsTowardReadings) {
  const Shape shape{1, 4, 4};
  const GaussianPriorScore<double> prior(shape);
  const auto sched = make_linear_schedule(100);
  SensorLayout all{4, 4, kStressTag, {}};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) all.positions.push_back({r, c});
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    Tensor<double> x(1, shape);
    Rng(trial).fill_normal<double>(x.data);
    const auto y = check::random_vector(16, 50 + trial, 2.0);
    const auto ch = ds_channel<double>(all, y, 1.0);
    const int t = 10 + static_cast<int>(trial) * 9;
    const auto eval = prior.evaluate_at(x, t, sched, false);
    const auto x0 = estimate_x0_hat(x, eval.score, t, sched);
    const auto g = likelihood_guidance<double>(prior, x, ch, t, sched);
    double inner = 0.0;
    for (std::size_t i = 0; i < 16; ++i) inner += -g.data[i] * (y[i] - x0.data[i]);
    EXPECT_GT(inner, 0.0);
  }
}

TEST(Guidance, HeterogeneousChannelsAdd) {
  const auto net = tiny_net<double>(8);
  const auto sched = make_linear_schedule(100);
  const Shape shape{1, 6, 5};
  const auto a = ds_channel<double>(sensors(6, 5, {{0, 0}, {1, 2}}), {0.3, -0.2}, 2.0, "a");
  const auto b = ds_channel<double>(sensors(6, 5, {{5, 4}, {2, 2}, {1, 2}}), {1.0, 0.0, -0.5}, 0.7, "b");
  Tensor<double> x(2, shape);
  Rng(9).fill_normal<double>(x.data);
  const int t = 25;
  const auto eval = net.evaluate_at(x, t, sched, true);
  const std::vector<MeasurementChannel<double>> both{a, b}, only_a{a}, only_b{b};
  const auto gab = guidance_from_score<double>(net, eval, x, t, sched, both, GuidanceMode::full);
  const auto ga = guidance_from_score<double>(net, eval, x, t, sched, only_a, GuidanceMode::full);
  const auto gb = guidance_from_score<double>(net, eval, x, t, sched, only_b, GuidanceMode::full);
  for (std::size_t i = 0; i < gab.grad.data.size(); ++i) {
    EXPECT_NEAR(gab.grad.data[i], ga.grad.data[i] + gb.grad.data[i], 1e-12);
  }
  for (int n = 0; n < 2; ++n) EXPECT_NEAR(gab.residual[n], ga.residual[n] + gb.residual[n], 1e-12);
}

TEST(Channel, ValidatesOperatorReadingsAndWeight) {
  const Shape shape{1, 3, 3};
  auto ch = ds_channel<float>(sensors(3, 3, {{0, 0}}), {1.0f}, 1.0);
  EXPECT_NO_THROW(ch.validate(shape));
  EXPECT_THROW(ch.validate(Shape{1, 4, 3}), ShapeError);
  ch.y = {1.0f, 2.0f};
  EXPECT_THROW(ch.validate(shape), ShapeError);
  ch.y = {1.0f};
  ch.zeta = -1.0;
  EXPECT_THROW(ch.validate(shape), ParameterError);
  ch.zeta = std::numeric_limits<double>::infinity();
  EXPECT_THROW(ch.validate(shape), ParameterError);
  MeasurementChannel<float> empty;
  EXPECT_THROW(empty.validate(shape), ConfigError);
  ch.zeta = 1.0;
  ch.sigma = 0.5;
  EXPECT_DOUBLE_EQ(ch.precision(), 4.0);
}

TEST(Channel, ZetaRules) {
  EXPECT_DOUBLE_EQ(channel_zeta(5.0, 0.5, ZetaRule::identical), 5.0);
  EXPECT_DOUBLE_EQ(channel_zeta(5.0, 0.5, ZetaRule::precision), 20.0);
  EXPECT_DOUBLE_EQ(channel_zeta(5.0, 0.5, ZetaRule::noise_level), 1.25);
  EXPECT_THROW(channel_zeta(5.0, 0.0, ZetaRule::precision), ParameterError);
  EXPECT_EQ(parse_zeta_rule("precision"), ZetaRule::precision);
  EXPECT_THROW(parse_zeta_rule("loud"), ConfigError);
  EXPECT_EQ(parse_guidance_mode("detached"), GuidanceMode::detached);
  EXPECT_EQ(parse_guidance_step("direct"), GuidanceStep::direct);
  EXPECT_THROW(parse_guidance_step("sideways"), ConfigError);
}

TEST(Sampler, EmptyChannelsEqualUnconditionalChains) {
  const auto net = tiny_net<float>(11);
  const auto sched = make_linear_schedule(20);
  const Shape shape{1, 6, 5};
  DpsOptions opt;
  opt.chains = 3;
  opt.seed = 40;
  const auto res = dps_sample<float>(net, sched, {}, shape, opt);
  ASSERT_EQ(res.samples.size(), 3u);
  for (int c = 0; c < 3; ++c) {
    Rng rng(opt.seed + static_cast<std::uint64_t>(c));
    Tensor<float> x(1, shape), next(1, shape);
    std::vector<float> z(shape.size());
    rng.fill_normal<float>(x.data);
    for (int t = sched.steps; t >= 1; --t) {
      const auto s = net.evaluate_at(x, t, sched, false);
      if (t > 1) {
        rng.fill_normal<float>(z);
        reverse_step_unconditional<float>(x.data, s.score.data, sched.beta_at(t), z, next.data);
      } else {
        reverse_step_unconditional<float>(x.data, s.score.data, sched.beta_at(t), next.data);
      }
      std::swap(x, next);
    }
    EXPECT_EQ(res.samples[c].data, x.data) << "chain " << c;
  }
}

TEST(Sampler, ZeroWeightChannelHasNoEffect) {
  const auto net = tiny_net<float>(12);
  const auto sched = make_linear_schedule(20);
  const Shape shape{1, 6, 5};
  const auto used = ds_channel<float>(sensors(6, 5, {{1, 1}, {4, 3}}), {0.8f, -0.6f}, 3.0, "used");
  const auto idle = ds_channel<float>(sensors(6, 5, {{0, 0}, {2, 2}, {5, 4}}), {9.0f, 9.0f, 9.0f}, 0.0, "idle");
  DpsOptions opt;
  opt.chains = 2;
  opt.seed = 3;
  const std::vector<MeasurementChannel<float>> one{used}, two{used, idle}, idle_only{idle};
  const auto a = dps_sample<float>(net, sched, one, shape, opt);
  const auto b = dps_sample<float>(net, sched, two, shape, opt);
  for (int c = 0; c < 2; ++c) EXPECT_EQ(a.samples[c].data, b.samples[c].data);
  const auto u = dps_sample<float>(net, sched, {}, shape, opt);
  const auto v = dps_sample<float>(net, sched, idle_only, shape, opt);
  for (int c = 0; c < 2; ++c) EXPECT_EQ(u.samples[c].data, v.samples[c].data);
  EXPECT_NE(a.samples[0].data, u.samples[0].data);
}

TEST(Sampler, BatchSizeDoesNotChangeChains) {
  const auto net = tiny_net<float>(13);
  const auto sched = make_linear_schedule(15);
  const Shape shape{1, 6, 5};
  const std::vector<MeasurementChannel<float>> chans{ds_channel<float>(sensors(6, 5, {{2, 2}}), {1.0f}, 2.0)};
  DpsOptions opt;
  opt.chains = 4;
  opt.seed = 100;
  const auto all = dps_sample<float>(net, sched, chans, shape, opt);
  opt.batch = 1;
  const auto single = dps_sample<float>(net, sched, chans, shape, opt);
  opt.batch = 3;
  const auto uneven = dps_sample<float>(net, sched, chans, shape, opt);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(all.samples[c].data, single.samples[c].data);
    EXPECT_EQ(all.samples[c].data, uneven.samples[c].data);
  }
}

TEST(Sampler, SameSeedSameResult) {
  const auto net = tiny_net<float>(14);
  const auto sched = make_linear_schedule(15);
  const Shape shape{1, 6, 5};
  const std::vector<MeasurementChannel<float>> chans{ds_channel<float>(sensors(6, 5, {{2, 2}, {0, 3}}), {1.0f, 0.0f}, 5.0)};
  DpsOptions opt;
  opt.chains = 3;
  opt.seed = 77;
  const auto a = dps_sample<float>(net, sched, chans, shape, opt);
  const auto b = dps_sample<float>(net, sched, chans, shape, opt);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(a.samples[c].data, b.samples[c].data);
  EXPECT_EQ(a.mean.data, b.mean.data);
  EXPECT_EQ(a.std.data, b.std.data);
  EXPECT_EQ(a.metadata.steps, 15);
  EXPECT_EQ(a.metadata.chains, 3);
  ASSERT_EQ(a.metadata.zeta.size(), 1u);
  EXPECT_EQ(a.metadata.zeta[0], 5.0);
}

TEST(Sampler, NonFiniteStateReportsStepAndChain) {
  const PoisonedScore score(7);
  const auto sched = make_linear_schedule(20);
  DpsOptions opt;
  opt.chains = 2;
  try {
    dps_sample<double>(score, sched, {}, Shape{1, 2, 2}, opt);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.step(), 7);
    EXPECT_EQ(e.chain(), 0);
  }
}

TEST(Sampler, RejectsMismatchedChannels) {
  const GaussianPriorScore<float> prior(Shape{2, 3, 3});
  const auto sched = make_linear_schedule(10);
  DpsOptions opt;
  EXPECT_THROW(dps_sample<float>(prior, sched, {}, Shape{1, 3, 3}, opt), ShapeError);
  opt.chains = 0;
  EXPECT_THROW(dps_sample<float>(prior, sched, {}, Shape{2, 3, 3}, opt), ParameterError);
}

TEST(Sampler, WeakGuidanceKeepsSpreadAwayFromSensors) {
  const Shape shape{1, 8, 6};
  const GaussianPriorScore<float> prior(shape);
  const auto sched = make_linear_schedule(100);
  const auto layout = sensors(8, 6, {{3, 2}, {3, 3}, {4, 2}, {4, 3}});
  const std::vector<MeasurementChannel<float>> chans{ds_channel<float>(layout, {1.0f, 1.0f, 1.0f, 1.0f}, 0.5)};
  DpsOptions opt;
  opt.chains = 100;
  opt.seed = 5;
  const auto res = dps_sample<float>(prior, sched, chans, shape, opt);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 6; ++c) {
      const bool sensor = (r == 3 || r == 4) && (c == 2 || c == 3);
      if (!sensor) EXPECT_GT(res.std.at(0, r, c), 0.0f) << r << "," << c;
    }
}

TEST(Sampler, LinearGaussianMeanMovesTowardReading) {
  // Prior N(0, I) in 2-D, reading y = 2 of the first coordinate with sigma = 1:
  // the posterior mean is (1, 0). The sampled mean must lie strictly between the
  // prior mean and the reading on the observed coordinate and stay near 0 on the other.
  const Shape shape{1, 1, 2};
  const GaussianPriorScore<double> prior(shape);
  const auto sched = make_linear_schedule(200);
  MeasurementChannel<double> ch;
  ch.y = {2.0};
  ch.op = make_direct_selection<double>(SensorLayout{1, 2, kStressTag, {{0, 0}}}, kStressTag);
  ch.sigma = 1.0;
  ch.zeta = 0.5;  // 1 / (2 sigma^2)
  DpsOptions opt;
  opt.chains = 1000;
  opt.seed = 21;
  const std::vector<MeasurementChannel<double>> chans{ch};
  const auto res = dps_sample<double>(prior, sched, chans, shape, opt);
  EXPECT_GT(res.mean.data[0], 0.5);
  EXPECT_LT(res.mean.data[0], 2.0);
  EXPECT_LT(std::abs(res.mean.data[1]), 0.1);
}
