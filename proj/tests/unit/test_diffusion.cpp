#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "fieldrecon/diffusion.hpp"
#include "fieldrecon/rng.hpp"
#include "fieldrecon/training.hpp"
#include "test_util.hpp"

using namespace fieldrecon;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(42), d(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(Rng, SubstreamsDiffer) {
  EXPECT_NE(Rng::derive_seed(1, 0), Rng::derive_seed(1, 1));
  EXPECT_NE(Rng::derive_seed(1, 0), Rng::derive_seed(2, 0));
  Rng a = Rng::substream(7, 3), b = Rng::substream(7, 3);
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, NormalMoments) {
  Rng rng(5);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, UniformIntCoversRangeInclusive) {
  Rng rng(9);
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto v = rng.uniform_int(2, 6);
    ASSERT_GE(v, 2);
    ASSERT_LE(v, 6);
    ++hits[static_cast<std::size_t>(v - 2)];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Schedule, SingleStepClamps) {
  const auto s = make_linear_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.steps, 1);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 0.999);
  EXPECT_NEAR(s.alpha_bar_at(1), 0.001, 1e-12);
}

TEST(Schedule, TerminalAlphaBarAt1000) {
  const auto s = make_linear_schedule(1000);
  // Independent product over the linearly spaced betas.
  double ab = 1.0;
  for (int i = 0; i < 1000; ++i) ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
  EXPECT_NEAR(s.alpha_bar_at(1000), ab, 1e-12);
  EXPECT_NEAR(s.alpha_bar_at(1000), 4.0e-5, 0.1e-5);
}

TEST(Schedule, RescalingPreservesTerminalAlphaBar) {
  const double ref = make_linear_schedule(1000).alpha_bar_at(1000);
  const double ab500 = make_linear_schedule(500).alpha_bar_at(500);
  EXPECT_LT(ab500, 2.0 * ref);
  EXPECT_GT(ab500, 0.5 * ref);
}

TEST(Schedule, InvariantsForManyStepCounts) {
  for (int T : {1, 2, 10, 100, 300, 500, 700, 900, 1000, 1100}) {
    const auto s = make_linear_schedule(T);
    for (int t = 1; t <= T; ++t) {
      ASSERT_GT(s.beta_at(t), 0.0);
      ASSERT_LT(s.beta_at(t), 1.0);
      ASSERT_EQ(s.alpha_at(t), 1.0 - s.beta_at(t));
      ASSERT_GT(s.alpha_bar_at(t), 0.0);
      ASSERT_LT(s.alpha_bar_at(t), 1.0);
      if (t > 1) {
        ASSERT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
        ASSERT_NEAR(s.alpha_bar_at(t), s.alpha_bar_at(t - 1) * s.alpha_at(t), 1e-15);
      }
    }
    if (T >= 100) EXPECT_LT(s.alpha_bar_at(T), 1e-3) << "T=" << T;
  }
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_linear_schedule(0), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.03, 0.02), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), ParameterError);
  const auto s = make_linear_schedule(10);
  EXPECT_THROW(s.beta_at(0), ParameterError);
  EXPECT_THROW(s.beta_at(11), ParameterError);
}

TEST(ForwardStep, Examples) {
  const Shape sh{1, 2, 2};
  {
    const Field out = forward_diffuse_step(Field(sh, 0.0f), 0.25, Field(sh, 1.0f));
    for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.5f);
  }
  {
    const Field out = forward_diffuse_step(Field(sh, 2.0f), 0.19, Field(sh, 1.0f));
    for (float v : out.data) EXPECT_NEAR(v, std::sqrt(0.81) * 2 + std::sqrt(0.19), 1e-6);
  }
  {
    const Field out = forward_diffuse_step(Field(sh, 3.0f), 1e-12, Field(sh, -7.0f));
    for (float v : out.data) EXPECT_NEAR(v, 3.0f, 1e-5);
  }
  EXPECT_THROW(forward_diffuse_step(Field(sh), 0.1, Field(Shape{1, 2, 3})), ShapeError);
}

TEST(ClosedForm, Examples) {
  NoiseSchedule s;
  s.steps = 2;
  s.beta = {1e-16, 0.75};
  s.alpha = {1.0 - 1e-16, 0.25};
  s.alpha_bar = {1.0 - 1e-16, 0.25};
  const Shape sh{1, 1, 3};
  const Field x0(sh, 2.0f);
  const Field z(sh, 1.0f);
  for (float v : sample_xt_given_x0(x0, 1, s, z).data) EXPECT_NEAR(v, 2.0f, 1e-6);
  for (float v : sample_xt_given_x0(x0, 2, s, z).data) EXPECT_NEAR(v, 0.5 * 2 + std::sqrt(0.75), 1e-6);
  EXPECT_THROW(sample_xt_given_x0(x0, 3, s, z), ParameterError);
}

TEST(ClosedForm, MatchesIteratedForwardSteps) {
  const int T = 100;
  const auto s = make_linear_schedule(T);
  const int n = 10000;
  for (int t : {1, T / 2, T}) {
    Rng rng(static_cast<std::uint64_t>(t));
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      double x = 1.5;
      for (int k = 1; k <= t; ++k) x = std::sqrt(1.0 - s.beta_at(k)) * x + std::sqrt(s.beta_at(k)) * rng.normal();
      sum += x;
      sq += x * x;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    const double ab = s.alpha_bar_at(t);
    EXPECT_NEAR(mean, std::sqrt(ab) * 1.5, 3.0 * std::sqrt((1 - ab) / n)) << "t=" << t;
    EXPECT_NEAR(var, 1 - ab, 3.0 * (1 - ab) * std::sqrt(2.0 / n)) << "t=" << t;
  }
}

TEST(ReverseStep, ScoreZeroIsRescale) {
  const Shape sh{1, 1, 4};
  Field x(sh);
  for (int i = 0; i < 4; ++i) x.data[i] = static_cast<float>(i - 1.5);
  for (auto rule : {ReverseRule::sde, ReverseRule::half_drift}) {
    const Field out = reverse_step_unconditional(x, Field(sh), 0.3, Field(sh), rule);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(out.data[i], x.data[i] / std::sqrt(0.7), 1e-6);
  }
}

TEST(ReverseStep, HalfDriftExample) {
  const Shape sh{1, 1, 1};
  const Field out = reverse_step_unconditional(Field(sh, 1.0f), Field(sh, -1.0f), 0.19, Field(sh), ReverseRule::half_drift);
  EXPECT_NEAR(out.data[0], 1.00556, 1e-5);
  EXPECT_NEAR(out.data[0], (1 - 0.095) / 0.9, 1e-6);
}

TEST(ReverseStep, SdeRuleUsesFullBeta) {
  const Shape sh{1, 1, 1};
  const Field out = reverse_step_unconditional(Field(sh, 1.0f), Field(sh, -1.0f), 0.19, Field(sh, 2.0f));
  EXPECT_NEAR(out.data[0], (1 - 0.19) / 0.9 + std::sqrt(0.19) * 2.0, 1e-6);
  EXPECT_DOUBLE_EQ(score_coefficient(0.2, ReverseRule::sde), 0.2);
  EXPECT_DOUBLE_EQ(score_coefficient(0.2, ReverseRule::half_drift), 0.1);
}

TEST(ReverseStep, ShapeMismatchThrows) {
  EXPECT_THROW(reverse_step_unconditional(Field(Shape{1, 2, 2}), Field(Shape{1, 2, 3}), 0.1, Field(Shape{1, 2, 2})),
               ShapeError);
}

TEST(ReverseStep, RuleNamesRoundTrip) {
  for (auto r : {ReverseRule::sde, ReverseRule::half_drift}) EXPECT_EQ(parse_reverse_rule(to_string(r)), r);
  EXPECT_THROW(parse_reverse_rule("euler"), ConfigError);
}

namespace {

// Chains of a 2-D state under score(x) = -x; returns (mean, std) over all elements.
std::pair<double, double> gaussian_chain_moments(int T, ReverseRule rule, int chains) {
  const auto s = make_linear_schedule(T);
  Rng rng(11);
  double sum = 0, sq = 0;
  for (int c = 0; c < chains; ++c) {
    std::vector<double> x(2), score(2), z(2), out(2);
    rng.fill_normal<double>(x);
    for (int t = T; t >= 1; --t) {
      for (int k = 0; k < 2; ++k) score[k] = -x[k];
      if (t > 1) {
        rng.fill_normal<double>(z);
        reverse_step_unconditional<double>(x, score, s.beta_at(t), z, out, rule);
      } else {
        reverse_step_unconditional<double>(x, score, s.beta_at(t), out, rule);
      }
      x = out;
    }
    for (double v : x) {
      sum += v;
      sq += v * v;
    }
  }
  const double n = 2.0 * chains, mean = sum / n;
  return {mean, std::sqrt(sq / n - mean * mean)};
}

}  // namespace

TEST(ReverseStep, GaussianPriorChainsRecoverStandardNormal) {
  const auto [mean, sd] = gaussian_chain_moments(500, ReverseRule::sde, 10000);
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sd, 1.0, 0.05);
}

TEST(ReverseStep, HalfDriftRuleInflatesVariance) {
  // With score weight beta/2 each step is a near-identity map plus fresh noise.
  const auto [mean, sd] = gaussian_chain_moments(500, ReverseRule::half_drift, 2000);
  EXPECT_GT(sd, 2.0);
  EXPECT_NEAR(mean, 0.0, 0.3);
}

namespace {

// s(x, t) = a x + b + c t/T per element; enough to exercise dsm_loss.
class AffineScore final : public TrainableScore<double> {
 public:
  explicit AffineScore(std::vector<double> p) : p_(std::move(p)) {}
  int channels() const override { return 0; }
  std::span<const double> parameters() const override { return p_; }
  std::span<double> mutable_parameters() override { return p_; }

  struct Tape final : ScoreTape {
    Tensor<double> x;
    std::vector<double> frac;
  };

  ScoreEvaluation<double> evaluate(const Tensor<double>& x, std::span<const int> steps, const NoiseSchedule& sched,
                                   bool record) const override {
    ScoreEvaluation<double> e;
    e.score = Tensor<double>(x.batch, x.shape);
    auto tape = std::make_unique<Tape>();
    tape->x = x;
    for (int i = 0; i < x.batch; ++i) {
      const double f = static_cast<double>(steps[i]) / sched.steps;
      tape->frac.push_back(f);
      for (std::size_t k = 0; k < x.sample_size(); ++k) e.score.sample(i)[k] = p_[0] * x.sample(i)[k] + p_[1] + p_[2] * f;
    }
    if (record) e.tape = std::move(tape);
    return e;
  }
  Tensor<double> input_vjp(const ScoreTape&, const Tensor<double>& g) const override {
    Tensor<double> out = g;
    for (auto& v : out.data) v *= p_[0];
    return out;
  }
  void backward(const ScoreTape& tape, const Tensor<double>& g, std::span<double> gp, Tensor<double>* gi) const override {
    const auto& tp = dynamic_cast<const Tape&>(tape);
    for (int i = 0; i < g.batch; ++i)
      for (std::size_t k = 0; k < g.sample_size(); ++k) {
        const double gv = g.sample(i)[k];
        gp[0] += gv * tp.x.sample(i)[k];
        gp[1] += gv;
        gp[2] += gv * tp.frac[i];
      }
    if (gi) *gi = input_vjp(tape, g);
  }

 private:
  std::vector<double> p_;
};

// Emits the exact conditional score for a known x0 batch, plus a constant offset.
class ConditionalScore final : public TrainableScore<double> {
 public:
  ConditionalScore(Tensor<double> x0, double offset) : x0_(std::move(x0)), offset_(offset) {}
  int channels() const override { return 0; }
  std::span<const double> parameters() const override { return {}; }
  std::span<double> mutable_parameters() override { return {}; }
  ScoreEvaluation<double> evaluate(const Tensor<double>& x, std::span<const int> steps, const NoiseSchedule& sched,
                                   bool record) const override {
    ScoreEvaluation<double> e;
    e.score = Tensor<double>(x.batch, x.shape);
    for (int i = 0; i < x.batch; ++i) {
      const double ab = sched.alpha_bar_at(steps[i]);
      for (std::size_t k = 0; k < x.sample_size(); ++k) {
        e.score.sample(i)[k] = -(x.sample(i)[k] - std::sqrt(ab) * x0_.sample(i)[k]) / (1.0 - ab) + offset_;
      }
    }
    if (record) e.tape = std::make_unique<ScoreTape>();
    return e;
  }
  Tensor<double> input_vjp(const ScoreTape&, const Tensor<double>& g) const override { return g; }
  void backward(const ScoreTape&, const Tensor<double>&, std::span<double>, Tensor<double>*) const override {}

 private:
  Tensor<double> x0_;
  double offset_;
};

Tensor<double> random_batch(int n, Shape s, std::uint64_t seed) {
  Tensor<double> t(n, s);
  Rng(seed).fill_normal<double>(t.data);
  return t;
}

}  // namespace

TEST(DsmLoss, PerfectFitGivesZero) {
  const auto x0 = random_batch(4, Shape{1, 3, 3}, 1);
  const auto sched = make_linear_schedule(50);
  ConditionalScore net(x0, 0.0);
  Rng rng(3);
  EXPECT_NEAR(dsm_loss<double>(net, x0, sched, rng).loss, 0.0, 1e-18);
}

TEST(DsmLoss, ConstantOffsetGivesSquare) {
  const auto x0 = random_batch(4, Shape{1, 3, 3}, 1);
  const auto sched = make_linear_schedule(50);
  ConditionalScore net(x0, 0.7);
  Rng rng(3);
  EXPECT_NEAR(dsm_loss<double>(net, x0, sched, rng).loss, 0.49, 1e-9);
}

TEST(DsmLoss, EmptyBatchThrows) {
  AffineScore net({-1, 0, 0});
  Rng rng(1);
  EXPECT_THROW(dsm_loss<double>(net, Tensor<double>(0, Shape{1, 2, 2}), make_linear_schedule(10), rng), ParameterError);
}

TEST(DsmLoss, ParameterGradientMatchesFiniteDifferences) {
  const auto x0 = random_batch(5, Shape{1, 2, 3}, 2);
  const auto sched = make_linear_schedule(40);
  for (auto weighting : {LossWeighting::none, LossWeighting::noise_variance}) {
    const std::vector<double> p{-0.8, 0.1, 0.3};
    AffineScore net(p);
    Rng rng(17);
    const auto res = dsm_loss<double>(net, x0, sched, rng, weighting);
    const auto fd = check::numeric_gradient(
        [&](std::span<const double> q) {
          AffineScore probe(std::vector<double>(q.begin(), q.end()));
          Rng r(17);
          return dsm_loss<double>(probe, x0, sched, r, weighting).loss;
        },
        p);
    EXPECT_LT(check::relative_error(res.grad, fd), 1e-4);
  }
}
