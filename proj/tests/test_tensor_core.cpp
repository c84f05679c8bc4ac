#include <gtest/gtest.h>

#include "spexplus/ops.hpp"
#include "support.hpp"

using namespace spexplus;
using testing_support::inner;
using testing_support::rand_tensor;

namespace {

Tensor<double> row(std::vector<double> v) { return Tensor<double>::row(std::move(v)); }

std::vector<double> values(Var<double> v) { return v.value().storage(); }

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, GradientShapeMatchesValue) {
  Tensor<float> t({2, 2}, 0.f);
  EXPECT_THROW(t.accumulate_grad(std::vector<float>(3)), ShapeError);
  t.accumulate_grad(std::vector<float>{1, 2, 3, 4});
  t.accumulate_grad(std::vector<float>{1, 1, 1, 1});
  EXPECT_EQ(std::vector<float>(t.grad().begin(), t.grad().end()), (std::vector<float>{2, 3, 4, 5}));
}

TEST(Elementwise, MulByHand) {
  Tape<double> tape;
  auto y = mul(tape.constant(row({1, 2, 3})), tape.constant(row({4, 5, 6})));
  EXPECT_EQ(values(y), (std::vector<double>{4, 10, 18}));
}

TEST(Elementwise, ZeroMaskGivesZero) {
  Tape<double> tape;
  auto y = mul(tape.constant(Tensor<double>({3, 4}, 0.0)), tape.constant(rand_tensor<double>({3, 4}, 1)));
  for (double v : values(y)) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, MulGradientIsOtherOperand) {
  Tape<double> tape;
  auto a = tape.variable(row({1, 1}));
  auto b = tape.constant(row({2, 3}));
  tape.backward(sum(mul(a, b)));
  EXPECT_EQ(tape.grad(a), (std::vector<double>{2, 3}));
}

TEST(Elementwise, BroadcastAlongTimeOnly) {
  Tape<double> tape;
  auto a = tape.variable(Tensor<double>({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  auto b = tape.variable(Tensor<double>({2, 1}, std::vector<double>{10, 20}));
  auto y = add(a, b);
  EXPECT_EQ(values(y), (std::vector<double>{11, 12, 13, 24, 25, 26}));
  tape.backward(sum(mul(y, tape.constant(Tensor<double>({2, 3}, 1.0)))));
  EXPECT_EQ(tape.grad(b), (std::vector<double>{3, 3}));

  Tape<double> t2;
  EXPECT_THROW(add(t2.constant(Tensor<double>({2, 3})), t2.constant(Tensor<double>({3, 1}))), ShapeError);
  EXPECT_THROW(mul(t2.constant(Tensor<double>({2, 3})), t2.constant(Tensor<double>({2, 2}))), ShapeError);
  EXPECT_THROW(sub(t2.constant(Tensor<double>({1, 3})), t2.constant(Tensor<double>({1, 4}))), ShapeError);
}

TEST(Conv1d, HandExamples) {
  Tape<double> tape;
  auto x = tape.constant(row({1, 2, 3, 4, 5}));
  auto w = tape.constant(Tensor<double>({1, 1, 2}, std::vector<double>{1, 1}));
  EXPECT_EQ(values(conv1d(x, w)), (std::vector<double>{3, 5, 7, 9}));
  ConvOptions dil;
  dil.dilation = 2;
  EXPECT_EQ(values(conv1d(x, w, dil)), (std::vector<double>{4, 6, 8}));
}

TEST(Conv1d, FrameFormula) {
  ConvOptions o;
  o.stride = 10;
  EXPECT_EQ(conv_output_length(32000, 20, o), 3199u);
  for (std::size_t t : {7u, 20u, 33u, 100u})
    for (std::size_t l : {1u, 2u, 3u, 5u})
      for (std::size_t s : {1u, 2u, 3u})
        for (std::size_t d : {1u, 2u})
          for (std::size_t pl : {0u, 2u}) {
            ConvOptions c{s, d, 1, pl, 1};
            const std::size_t span = (l - 1) * d + 1;
            if (span > t + pl + 1) continue;
            Tape<float> tape;
            auto y = conv1d(tape.constant(Tensor<float>({1, t}, 1.f)), tape.constant(Tensor<float>({2, 1, l}, 1.f)), c);
            EXPECT_EQ(y.cols(), (t + pl + 1 - span) / s + 1);
            EXPECT_EQ(y.rows(), 2u);
          }
}

TEST(Conv1d, Errors) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 5}));
  EXPECT_THROW(conv1d(x, tape.constant(Tensor<float>({1, 1, 6}))), ShapeError);
  ConvOptions zero_stride;
  zero_stride.stride = 0;
  EXPECT_THROW(conv1d(x, tape.constant(Tensor<float>({1, 1, 2})), zero_stride), ShapeError);
  ConvOptions zero_dil;
  zero_dil.dilation = 0;
  EXPECT_THROW(conv1d(x, tape.constant(Tensor<float>({1, 1, 2})), zero_dil), ShapeError);
  ConvOptions groups;
  groups.groups = 2;
  EXPECT_THROW(conv1d(tape.constant(Tensor<float>({3, 5})), tape.constant(Tensor<float>({2, 1, 2})), groups),
               ShapeError);
}

TEST(Conv1d, DepthwiseMatchesPerChannelConvolution) {
  const auto x = rand_tensor<double>({3, 12}, 7);
  const auto w = rand_tensor<double>({3, 1, 3}, 8);
  Tape<double> tape;
  ConvOptions o;
  o.groups = 3;
  o.dilation = 2;
  o.pad_left = o.pad_right = 2;
  auto y = conv1d(tape.constant(x), tape.constant(w), o);
  ASSERT_EQ(y.cols(), 12u);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 12; ++t) {
      double ref = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        const long idx = long(t) + long(j * 2) - 2;
        if (idx >= 0 && idx < 12) ref += w(c, j) * x(c, std::size_t(idx));
      }
      EXPECT_NEAR(y.value()(c, t), ref, 1e-12);
    }
}

TEST(ConvTranspose, OverlapAdd) {
  Tape<double> tape;
  auto y = conv1d_transpose(tape.constant(row({1, 1})), tape.constant(Tensor<double>({1, 1, 2}, 1.0)), 1);
  EXPECT_EQ(values(y), (std::vector<double>{1, 2, 1}));
  auto z = conv1d_transpose(tape.constant(Tensor<double>({4, 6}, 0.0)), tape.constant(rand_tensor<double>({4, 1, 5}, 3)), 2);
  for (double v : values(z)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(conv_transpose_output_length(3199, 20, 10), 32000u);
}

TEST(ConvTranspose, IsAdjointOfConv) {
  for (unsigned seed = 0; seed < 12; ++seed) {
    const std::size_t c = 1 + seed % 3, l = 2 + seed % 5, s = 1 + seed % 4, t = 30 + seed;
    ConvOptions o;
    o.stride = s;
    const auto x = rand_tensor<double>({1, t}, seed);
    const auto w = rand_tensor<double>({c, 1, l}, 100 + seed);
    Tape<double> tape;
    auto cx = conv1d(tape.constant(x), tape.constant(w), o);
    const auto y = rand_tensor<double>({c, cx.cols()}, 200 + seed);
    auto ty = conv1d_transpose(tape.constant(y), tape.constant(w), s);
    ASSERT_GE(ty.cols(), t - s + 1);
    // conv1d drops the samples past the last full window; the adjoint output
    // covers exactly the used prefix.
    const Tensor<double> x_used({1, ty.cols()}, std::vector<double>(x.storage().begin(), x.storage().begin() + long(ty.cols())));
    const double lhs = inner(cx.value(), y), rhs = inner(x_used, ty.value());
    EXPECT_NEAR(lhs, rhs, 1e-5 * std::max(1.0, std::abs(lhs))) << "seed " << seed;
  }
}

TEST(Activations, ReluMaxPoolSoftmax) {
  Tape<double> tape;
  EXPECT_EQ(values(relu(tape.constant(row({-1, 0, 2})))), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(values(max_pool1d(tape.constant(row({1, 9, 2, 3, 1, 1})))), (std::vector<double>{9, 3}));
  EXPECT_EQ(max_pool1d(tape.constant(row({1, 2, 3, 4, 5, 6, 7, 8}))).cols(), 2u);
  EXPECT_THROW(max_pool1d(tape.constant(row({1, 2}))), ShapeError);
  for (double p : values(softmax(tape.constant(Tensor<double>({4, 1}, 0.0))))) EXPECT_DOUBLE_EQ(p, 0.25);
  double total = 0;
  for (double p : values(softmax(tape.constant(Tensor<double>({5, 1}, std::vector<double>{3, -1, 0, 8, 2})))))
    total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Activations, PreluPerChannelSlope) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2, 2}, std::vector<double>{-2, 1, -4, 3}));
  auto s = tape.constant(Tensor<double>({2, 1}, std::vector<double>{0.5, 0.25}));
  EXPECT_EQ(values(prelu(x, s)), (std::vector<double>{-1, 1, -1, 3}));
}

TEST(Reshaping, MeanConcatSlicePadRepeat) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(values(mean_time(a)), (std::vector<double>{2, 5}));
  auto b = tape.constant(Tensor<double>({1, 3}, std::vector<double>{7, 8, 9}));
  auto c = concat_channels({a, b});
  EXPECT_EQ(c.rows(), 3u);
  EXPECT_EQ(values(c), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(values(slice_time(a, 1, 2)), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_EQ(values(pad_time(b, 1, 2)), (std::vector<double>{0, 7, 8, 9, 0, 0}));
  EXPECT_EQ(values(fit_time(b, 2)), (std::vector<double>{7, 8}));
  EXPECT_EQ(values(fit_time(b, 4)), (std::vector<double>{7, 8, 9, 0}));
  EXPECT_EQ(values(repeat_time(tape.constant(Tensor<double>({2, 1}, std::vector<double>{1, 2})), 3)),
            (std::vector<double>{1, 1, 1, 2, 2, 2}));
  EXPECT_THROW(slice_time(a, 2, 2), ShapeError);
  EXPECT_THROW(concat_channels({a, tape.constant(Tensor<double>({1, 4}))}), ShapeError);
}

TEST(Backward, LinearCaseGradientIsInput) {
  Tape<double> tape;
  Tensor<double> w({1, 4}, std::vector<double>{0.5, -1, 2, 3});
  w.set_requires_grad(true);
  const auto x = row({1, -2, 3, 0.5});
  tape.backward(sum(mul(tape.parameter(w), tape.constant(x))));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), x.storage());
}

TEST(Backward, SharedParameterGradientsSum) {
  Tape<double> tape;
  Tensor<double> w({1, 2}, std::vector<double>{1, 2});
  w.set_requires_grad(true);
  auto a = tape.parameter(w);
  auto b = tape.parameter(w);
  EXPECT_EQ(a.id, b.id);
  tape.backward(sum(add(mul(a, tape.constant(row({3, 4}))), mul(b, tape.constant(row({5, 6}))))));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{8, 10}));
}

TEST(Backward, Contracts) {
  Tape<double> tape;
  auto x = tape.variable(row({1, 2}));
  EXPECT_THROW(tape.backward(x), TapeError);  // not scalar
  auto l = sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), TapeError);
  EXPECT_THROW(relu(x), TapeError);
  Tape<double> other;
  EXPECT_THROW(other.grad(other.variable(row({1}))), TapeError);
  Tape<double> t3;
  auto y = t3.variable(row({1}));
  EXPECT_THROW(add(y, other.constant(row({1}))), TapeError);
}

TEST(Backward, ConstantsNeedNoBackwardPass) {
  Tape<double> tape;
  auto l = sum(relu(tape.constant(row({1, -1}))));
  EXPECT_FALSE(l.requires_grad());
  EXPECT_NO_THROW(tape.backward(l));
}

TEST(Determinism, IdenticalInputsGiveIdenticalOutputs) {
  auto run = [] {
    const auto x = rand_tensor<float>({4, 50}, 11);
    auto w = rand_tensor<float>({6, 4, 3}, 12);
    Tape<float> tape;
    ConvOptions o;
    o.dilation = 2;
    auto y = relu(conv1d(tape.constant(x), tape.parameter(w), o));
    return y.value().storage();
  };
  EXPECT_EQ(run(), run());
}
