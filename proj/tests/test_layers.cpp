#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssm/gradcheck.hpp"
#include "ssm/layers.hpp"

using namespace ssm;

namespace {

void randomize(const TensorPtr<double>& t, SplitMix64& rng, double scale = 1.0) {
  for (Index i = 0; i < t->numel(); ++i) t->data[i] = rng.normal() * scale;
}

}  // namespace

TEST_CASE("linear identity and constant") {
  LinearLayer<double> layer(2, 2);
  layer.weight->mat().setIdentity();
  Tape<double> tape;
  auto x = make_tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6});
  auto y = linear_forward(tape, layer, x);
  CHECK(y->data == x->data);

  layer.weight->data.setZero();
  layer.bias->data << 7, 7;
  auto z = linear_forward(tape, layer, x);
  for (Index i = 0; i < z->numel(); ++i) CHECK(z->data[i] == 7.0);

  auto bad = make_tensor<double>({3, 5});
  CHECK_THROWS_AS(linear_forward(tape, layer, bad), ShapeError);
}

TEST_CASE("linear grad check") {
  SplitMix64 rng(5);
  LinearLayer<double> layer(4, 3);
  layer.init(rng);
  randomize(layer.bias, rng);
  auto x = make_tensor<double>({2, 4}, true);
  randomize(x, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) {
        return reduce_all(t, Reduce::kMean, mul(t, linear_forward(t, layer, x),
                                                linear_forward(t, layer, x)));
      },
      {x, layer.weight, layer.bias});
  CHECK(err < 1e-6);
}

TEST_CASE("batchnorm train mode on standardized batch") {
  BatchNormLayer<double> bn(2);
  Tape<double> tape;
  // columns already zero-mean, unit (biased) variance
  auto x = make_tensor<double>({2, 2}, {1, -1, -1, 1});
  auto y = batchnorm_forward(tape, bn, x);
  for (Index i = 0; i < 4; ++i) CHECK(y->data[i] == doctest::Approx(x->data[i]).epsilon(1e-4));

  auto single = make_tensor<double>({1, 2});
  CHECK_THROWS_AS(batchnorm_forward(tape, bn, single), ShapeError);
}

TEST_CASE("batchnorm eval mode is a fixed affine map") {
  BatchNormLayer<double> bn(3);
  bn.mode = Mode::kEval;
  Tape<double> tape;
  auto x = make_tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = batchnorm_forward(tape, bn, x);
  // running_mean = 0, running_var = 1, gamma = 1, beta = 0 -> x / sqrt(1 + eps)
  double f = 1.0 / std::sqrt(1.0 + 1e-5);
  for (Index i = 0; i < 6; ++i) CHECK(y->data[i] == doctest::Approx(x->data[i] * f).epsilon(1e-12));

  // affinity: f(x1) + f(x2) - f(0) == f(x1 + x2), arbitrary gamma/beta
  SplitMix64 rng(3);
  randomize(bn.gamma, rng);
  randomize(bn.beta, rng);
  randomize(bn.running_mean, rng);
  bn.running_var->data << 0.5, 2.0, 1.3;
  auto x1 = make_tensor<double>({2, 3});
  auto x2 = make_tensor<double>({2, 3});
  randomize(x1, rng);
  randomize(x2, rng);
  auto x12 = make_tensor<double>({2, 3});
  x12->data = x1->data + x2->data;
  auto zero = make_tensor<double>({2, 3});
  auto f1 = batchnorm_forward(tape, bn, x1);
  auto f2 = batchnorm_forward(tape, bn, x2);
  auto f0 = batchnorm_forward(tape, bn, zero);
  auto f12 = batchnorm_forward(tape, bn, x12);
  for (Index i = 0; i < 6; ++i)
    CHECK(f1->data[i] + f2->data[i] - f0->data[i] == doctest::Approx(f12->data[i]).epsilon(1e-10));
}

TEST_CASE("batchnorm running statistics update") {
  BatchNormLayer<double> bn(1);
  Tape<double> tape;
  auto x = make_tensor<double>({4, 1}, {0, 2, 4, 6});  // mean 3, unbiased var 20/3
  batchnorm_forward(tape, bn, x);
  CHECK(bn.running_mean->data[0] == doctest::Approx(0.9 * 0 + 0.1 * 3));
  CHECK(bn.running_var->data[0] == doctest::Approx(0.9 * 1 + 0.1 * (20.0 / 3)));
}

TEST_CASE("batchnorm train-mode grad check over x, gamma, beta") {
  SplitMix64 rng(17);
  BatchNormLayer<double> bn(3);
  randomize(bn.gamma, rng);
  bn.gamma->data.array() += 1.5;
  randomize(bn.beta, rng);
  auto x = make_tensor<double>({4, 3}, true);
  randomize(x, rng);
  // per-element weights keep the loss sensitive to x (a plain sum of squares
  // is nearly invariant under the batch normalization itself)
  auto c = make_tensor<double>({4, 3});
  randomize(c, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) {
        auto rm = bn.running_mean->data;
        auto rv = bn.running_var->data;
        auto y = batchnorm_forward(t, bn, x);
        auto out = reduce_all(t, Reduce::kSum, mul(t, mul(t, y, y), c));
        // forward mutates running stats; restore so repeated calls agree
        bn.running_mean->data = rm;
        bn.running_var->data = rv;
        return out;
      },
      {x, bn.gamma, bn.beta});
  CHECK(err < 1e-5);
}

TEST_CASE("batchnorm2d grad check") {
  SplitMix64 rng(29);
  BatchNormLayer<double> bn(2);
  randomize(bn.gamma, rng);
  bn.gamma->data.array() += 1.5;
  randomize(bn.beta, rng);
  auto x = make_tensor<double>({2, 2, 3, 3}, true);
  randomize(x, rng);
  auto c = make_tensor<double>({2, 2, 3, 3});
  randomize(c, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) {
        auto rm = bn.running_mean->data;
        auto rv = bn.running_var->data;
        auto y = batchnorm2d_forward(t, bn, x);
        auto out = reduce_all(t, Reduce::kSum, mul(t, mul(t, y, y), c));
        bn.running_mean->data = rm;
        bn.running_var->data = rv;
        return out;
      },
      {x, bn.gamma, bn.beta});
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d identity and averaging kernels") {
  Tape<double> tape;
  Conv2dLayer<double> one_by_one(1, 1, 1);
  one_by_one.weight->data[0] = 1.0;
  auto x = make_tensor<double>({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = conv2d_forward(tape, one_by_one, x);
  CHECK(y->shape == Shape{1, 1, 3, 3});
  CHECK(y->data == x->data);

  Conv2dLayer<double> avg(1, 1, 3);
  avg.weight->data.setConstant(1.0 / 9.0);
  auto flat = make_tensor<double>({1, 1, 5, 5});
  flat->data.setConstant(4.2);
  auto z = conv2d_forward(tape, avg, flat);  // valid conv, interior only
  CHECK(z->shape == Shape{1, 1, 3, 3});
  for (Index i = 0; i < z->numel(); ++i) CHECK(z->data[i] == doctest::Approx(4.2).epsilon(1e-12));

  auto wrong_c = make_tensor<double>({1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d_forward(tape, avg, wrong_c), ShapeError);
  auto tiny = make_tensor<double>({1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d_forward(tape, avg, tiny), ShapeError);
}

TEST_CASE("conv2d grad check with stride and padding") {
  SplitMix64 rng(41);
  Conv2dLayer<double> conv(3, 2, 3, 1, 1);
  conv.init(rng);
  randomize(conv.bias, rng);
  auto x = make_tensor<double>({2, 3, 5, 5}, true);
  randomize(x, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) {
        auto y = conv2d_forward(t, conv, x);
        return reduce_all(t, Reduce::kMean, mul(t, y, y));
      },
      {x, conv.weight, conv.bias});
  CHECK(err < 1e-5);
}

TEST_CASE("max_pool2 forward and backward routing") {
  Tape<double> tape;
  auto x = make_tensor<double>({1, 1, 4, 4},
                               {1, 2, 3, 4,
                                5, 6, 7, 8,
                                9, 10, 11, 12,
                                13, 14, 15, 16},
                               true);
  auto y = max_pool2(tape, x);
  CHECK(y->shape == Shape{1, 1, 2, 2});
  CHECK(y->data[0] == 6);
  CHECK(y->data[3] == 16);
  tape.backward(reduce_all(tape, Reduce::kSum, y));
  CHECK(x->grad[5] == 1.0);   // element 6
  CHECK(x->grad[0] == 0.0);
  CHECK(x->grad[15] == 1.0);  // element 16
}

TEST_CASE("global_avg_pool") {
  Tape<double> tape;
  auto x = make_tensor<double>({1, 2, 2, 2}, {3, 3, 3, 3, 1, 2, 3, 4}, true);
  auto y = global_avg_pool(tape, x);
  CHECK(y->shape == Shape{1, 2});
  CHECK(y->data[0] == 3.0);
  CHECK(y->data[1] == 2.5);
  tape.backward(reduce_all(tape, Reduce::kSum, y));
  for (Index i = 0; i < 8; ++i) CHECK(x->grad[i] == doctest::Approx(0.25));

  Tape<double> t2;
  auto squeeze = make_tensor<double>({2, 3, 1, 1});
  squeeze->data << 1, 2, 3, 4, 5, 6;
  auto s = global_avg_pool(t2, squeeze);
  CHECK(s->shape == Shape{2, 3});
  CHECK(s->data == squeeze->data);
}

TEST_CASE("he_init statistics and determinism") {
  SplitMix64 rng(123);
  auto big = he_init<double>({1000, 1000}, 50, rng);
  double mean = big->data.mean();
  double var = (big->data.array() - mean).square().mean();
  CHECK(var == doctest::Approx(0.04).epsilon(0.02));

  SplitMix64 r1(7), r2(7);
  auto a = he_init<double>({10}, 2, r1);
  auto b = he_init<double>({10}, 2, r2);
  CHECK(a->data == b->data);
  // fan_in = 2 -> std exactly 1 per element before sampling
  SplitMix64 r3(7);
  auto base = he_init<double>({10}, 2, r3);
  CHECK(base->data == a->data);
}

TEST_CASE("batchnorm train output mean/var track beta and gamma") {
  SplitMix64 rng(55);
  BatchNormLayer<double> bn(4);
  bn.gamma->data << 1.5, 0.5, 2.0, 1.0;
  bn.beta->data << 0.3, -0.2, 0.0, 1.0;
  auto x = make_tensor<double>({16, 4});
  randomize(x, rng);
  Tape<double> tape;
  auto y = batchnorm_forward(tape, bn, x);
  for (Index c = 0; c < 4; ++c) {
    double m = 0, v = 0;
    for (Index b = 0; b < 16; ++b) m += y->mat()(b, c);
    m /= 16;
    for (Index b = 0; b < 16; ++b) v += (y->mat()(b, c) - m) * (y->mat()(b, c) - m);
    v /= 16;
    CHECK(m == doctest::Approx(bn.beta->data[c]).epsilon(1e-6));
    CHECK(v == doctest::Approx(bn.gamma->data[c] * bn.gamma->data[c]).epsilon(1e-3));
  }
}
