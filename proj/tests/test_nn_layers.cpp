#include <gtest/gtest.h>

#include <set>

#include "spexplus/model.hpp"
#include "support.hpp"

using namespace spexplus;
using testing_support::rand_tensor;

namespace {

template <typename T>
std::vector<double> channel_stats(const Tensor<T>& y, std::size_t c, double* var) {
  double m = 0, v = 0;
  const std::size_t n = y.cols();
  for (std::size_t k = 0; k < n; ++k) m += y(c, k);
  m /= double(n);
  for (std::size_t k = 0; k < n; ++k) v += (y(c, k) - m) * (y(c, k) - m);
  *var = v / double(n);
  return {m};
}

}  // namespace

TEST(GlobalLayerNorm, ConstantInputGivesZeros) {
  GlobalLayerNorm<double> ln(3);
  Tape<double> tape;
  auto y = ln.forward(tape, tape.constant(Tensor<double>({3, 5}, 4.2)));
  for (double v : y.value().values()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(GlobalLayerNorm, UnitVarianceExample) {
  GlobalLayerNorm<double> ln(1, 1e-12);
  Tape<double> tape;
  auto y = ln.forward(tape, tape.constant(Tensor<double>({1, 2}, std::vector<double>{1, -1})));
  EXPECT_NEAR(y.value()[0], 1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-9);
}

TEST(GlobalLayerNorm, StatisticsFollowGainAndBias) {
  GlobalLayerNorm<double> ln(1);
  ln.gain()[0] = 2.5;
  ln.bias()[0] = -0.75;
  Tape<double> tape;
  auto y = ln.forward(tape, tape.constant(rand_tensor<double>({1, 10000}, 5, -3, 7)));
  double var = 0;
  const double mean = channel_stats(y.value(), 0, &var)[0];
  EXPECT_NEAR(mean, -0.75, 1e-4);
  EXPECT_NEAR(var, 2.5 * 2.5, 1e-4);
}

TEST(GlobalLayerNorm, StatisticsPoolChannelsAndTime) {
  GlobalLayerNorm<double> ln(2);
  Tape<double> tape;
  // Channel 0 is all 1, channel 1 all -1: global mean 0, variance 1.
  auto y = ln.forward(tape, tape.constant(Tensor<double>({2, 4}, std::vector<double>{1, 1, 1, 1, -1, -1, -1, -1})));
  EXPECT_NEAR(y.value()(0, 0), 1.0, 1e-7);
  EXPECT_NEAR(y.value()(1, 3), -1.0, 1e-7);
}

TEST(GlobalLayerNorm, InvariantToGlobalOffset) {
  GlobalLayerNorm<double> ln(4);
  const auto x = rand_tensor<double>({4, 30}, 9);
  Tensor<double> shifted = x;
  for (auto& v : shifted.values()) v += 3.7;
  Tape<double> t1, t2;
  auto a = ln.forward(t1, t1.constant(x));
  auto b = ln.forward(t2, t2.constant(shifted));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-5);
}

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  BatchNorm1d<double> bn(3);
  Tape<double> tape;
  auto x = rand_tensor<double>({3, 500}, 4, -2, 6);
  for (std::size_t k = 0; k < 500; ++k) x(1, k) = 10 + 3 * x(1, k);
  auto y = bn.forward(tape, tape.constant(x));
  for (std::size_t c = 0; c < 3; ++c) {
    double var = 0;
    EXPECT_NEAR(channel_stats(y.value(), c, &var)[0], 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm, EvalWithInitialStatisticsIsIdentity) {
  BatchNorm1d<double> bn(2);
  bn.set_training(false);
  const auto x = rand_tensor<double>({2, 7}, 3);
  Tape<double> tape;
  auto y = bn.forward(tape, tape.constant(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-7);
}

TEST(BatchNorm, MomentumUpdate) {
  BatchNorm1d<double> bn(1);
  bn.running_mean()[0] = 2.0;
  bn.running_var()[0] = 3.0;
  const Tensor<double> x({1, 4}, std::vector<double>{1, 2, 3, 6});
  Tape<double> tape;
  bn.forward(tape, tape.constant(x));
  const double m = 3.0, v_unbiased = (4 + 1 + 0 + 9) / 3.0;
  EXPECT_NEAR(bn.running_mean()[0], 0.9 * 2.0 + 0.1 * m, 1e-12);
  EXPECT_NEAR(bn.running_var()[0], 0.9 * 3.0 + 0.1 * v_unbiased, 1e-12);
  EXPECT_GE(bn.running_var()[0], 0.0);
}

TEST(BatchNorm, EvalUsesRunningStatisticsOnly) {
  BatchNorm1d<double> bn(1);
  bn.running_mean()[0] = 1.0;
  bn.running_var()[0] = 4.0;
  bn.set_training(false);
  Tape<double> tape;
  auto y = bn.forward(tape, tape.constant(Tensor<double>({1, 3}, std::vector<double>{1, 3, 5})));
  EXPECT_NEAR(y.value()[0], 0.0, 1e-7);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-7);
  EXPECT_NEAR(y.value()[2], 2.0, 1e-7);
  EXPECT_EQ(bn.running_mean()[0], 1.0);
}

TEST(BatchNorm, TrainEvalConsistencyOnStationaryInput) {
  BatchNorm1d<double> bn(2);
  std::mt19937 gen(1);
  std::normal_distribution<double> d0(1.5, 2.0), d1(-4.0, 0.5);
  auto draw = [&] {
    Tensor<double> x({2, 20000});
    for (std::size_t k = 0; k < 20000; ++k) {
      x(0, k) = d0(gen);
      x(1, k) = d1(gen);
    }
    return x;
  };
  for (int i = 0; i < 100; ++i) {
    Tape<double> tape;
    bn.forward(tape, tape.constant(draw()));
  }
  const auto x = draw();
  Tape<double> t1, t2;
  auto train_out = bn.forward(t1, t1.constant(x));
  bn.set_training(false);
  auto eval_out = bn.forward(t2, t2.constant(x));
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(train_out.value()[i] - eval_out.value()[i]));
  EXPECT_LT(worst, 5e-2);
  double mean_dev = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mean_dev += std::abs(train_out.value()[i] - eval_out.value()[i]);
  EXPECT_LT(mean_dev / double(x.size()), 1e-2);
}

TEST(BatchNorm, TrainingNeedsTwoSteps) {
  BatchNorm1d<float> bn(1);
  Tape<float> tape;
  EXPECT_THROW(bn.forward(tape, tape.constant(Tensor<float>({1, 1}, 1.f))), ShapeError);
}

TEST(PReLU, SlopeStartsAtQuarter) {
  PReLU<float> p;
  EXPECT_EQ(p.slope()[0], 0.25f);
  EXPECT_TRUE(p.slope().requires_grad());
  Tape<float> tape;
  auto y = p.forward(tape, tape.constant(Tensor<float>({1, 2}, std::vector<float>{-4, 2})));
  EXPECT_EQ(y.value()[0], -1.f);
  EXPECT_EQ(y.value()[1], 2.f);
}

TEST(Linear, OutputMatchesClassCount) {
  Rng rng(1);
  Linear<double> lin(6, 4, true, rng);
  EXPECT_EQ(lin.out_features(), 4u);
  Tape<double> tape;
  auto y = lin.forward(tape, tape.constant(rand_tensor<double>({6, 1}, 2)));
  EXPECT_EQ(y.shape(), (Shape{4, 1}));
}

TEST(Initialization, KaimingUniformBoundAndZeroBias) {
  Rng rng(3);
  Conv1dLayer<float> conv(4, 16, 5, {}, true, rng);
  const double bound = 1.0 / std::sqrt(20.0);
  for (float w : conv.weight().values()) EXPECT_LE(std::abs(w), bound);
  std::size_t n = 0;
  conv.visit("c", [&](const std::string& name, Tensor<float>& t, TensorRole) {
    if (name == "c.bias") {
      for (float b : t.values()) EXPECT_EQ(b, 0.f);
    }
    ++n;
  });
  EXPECT_EQ(n, 2u);
  EXPECT_EQ(conv.weight().shape(), (Shape{16, 4, 5}));
  ConvOptions g;
  g.groups = 4;
  Conv1dLayer<float> dw(4, 4, 3, g, false, rng);
  EXPECT_EQ(dw.weight().shape(), (Shape{4, 1, 3}));
}

TEST(NamedParameters, UniqueHierarchicalAndStable) {
  auto cfg = tiny_preset();
  SpexPlusModel<float> a(cfg), b(cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  std::set<std::string> seen;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(seen.insert(pa[i].name).second) << pa[i].name;
    EXPECT_NE(pa[i].name.find('.'), std::string::npos);
  }
  EXPECT_TRUE(seen.count("encoder.conv_short.weight"));
}

TEST(NamedParameters, TiedEncoderAppearsOnce) {
  auto cfg = tiny_preset();
  SpexPlusModel<float> tied(cfg);
  std::size_t encoders = 0;
  for (const auto& p : tied.parameters()) {
    encoders += p.name.rfind("encoder.", 0) == 0;
    EXPECT_NE(p.name.rfind("reference_encoder.", 0), 0u);
  }
  EXPECT_EQ(encoders, 6u);  // three convs, weight + bias
  cfg.tied = false;
  SpexPlusModel<float> untied(cfg);
  std::size_t refs = 0;
  for (const auto& p : untied.parameters()) refs += p.name.rfind("reference_encoder.", 0) == 0;
  EXPECT_EQ(refs, 6u);
}

TEST(NamedParameters, FullSizeCountNearElevenMillion) {
  SpexPlusModel<float> m(paper_preset());
  const double n = double(m.parameter_count());
  EXPECT_NEAR(n / 11.1e6, 1.0, 0.05) << n;
}
