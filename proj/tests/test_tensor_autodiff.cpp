#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssm/gradcheck.hpp"
#include "ssm/rng.hpp"
#include "ssm/tensor.hpp"

using namespace ssm;

namespace {

TensorPtr<double> random_tensor(Shape shape, SplitMix64& rng, bool rg = true) {
  auto t = make_tensor<double>(std::move(shape), rg);
  for (Index i = 0; i < t->numel(); ++i) t->data[i] = rng.normal();
  return t;
}

// Random values bounded away from 0 so ReLU kinks never interfere with
// finite differences.
TensorPtr<double> random_tensor_away_from_zero(Shape shape, SplitMix64& rng) {
  auto t = random_tensor(std::move(shape), rng);
  for (Index i = 0; i < t->numel(); ++i) {
    if (std::abs(t->data[i]) < 1e-1) t->data[i] = t->data[i] < 0 ? -0.5 : 0.5;
  }
  return t;
}

}  // namespace

TEST_CASE("matmul identity and selector") {
  Tape<double> tape;
  auto eye = make_tensor<double>({2, 2}, {1, 0, 0, 1});
  auto m = make_tensor<double>({2, 2}, {1, 2, 3, 4});
  auto out = matmul(tape, eye, m);
  CHECK(out->data[0] == 1);
  CHECK(out->data[1] == 2);
  CHECK(out->data[2] == 3);
  CHECK(out->data[3] == 4);

  auto row = make_tensor<double>({1, 2}, {1, 0});
  auto col = make_tensor<double>({2, 1}, {5, 7});
  CHECK(matmul(tape, row, col)->data[0] == 5);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  auto a = make_tensor<double>({3, 4});
  auto b = make_tensor<double>({5, 2});
  CHECK_THROWS_WITH_AS(matmul(tape, a, b), doctest::Contains("[3x4]"), ShapeError);
}

TEST_CASE("matmul backward matches finite differences") {
  SplitMix64 rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) { return reduce_all(t, Reduce::kSum, mul(t, matmul(t, a, b), matmul(t, a, b))); },
      {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise basics") {
  Tape<double> tape;
  auto x = make_tensor<double>({3}, {-1, 0, 2});
  auto r = relu(tape, x);
  CHECK(r->data[0] == 0);
  CHECK(r->data[1] == 0);
  CHECK(r->data[2] == 2);

  auto zero = make_tensor<double>({3});
  auto same = add(tape, x, zero);
  CHECK(same->data == x->data);

  auto bad = make_tensor<double>({2});
  CHECK_THROWS_AS(add(tape, x, bad), ShapeError);
  auto nonpos = make_tensor<double>({2}, {1.0, -2.0});
  CHECK_THROWS_AS(log_op(tape, nonpos), DomainError);
}

TEST_CASE("mul/exp/log/scale backward match finite differences") {
  SplitMix64 rng(7);
  auto a = random_tensor({5}, rng);
  auto b = random_tensor({5}, rng);
  auto err = grad_check<double>(
      [&](Tape<double>& t) { return reduce_all(t, Reduce::kSum, mul(t, a, b)); }, {a, b});
  CHECK(err < 1e-6);

  auto c = random_tensor({4}, rng);
  err = grad_check<double>(
      [&](Tape<double>& t) {
        return reduce_all(t, Reduce::kSum, log_op(t, exp_op(t, scale(t, c, 0.3))));
      },
      {c});
  CHECK(err < 1e-6);
}

TEST_CASE("slice_channels prefix semantics") {
  Tape<double> tape;
  auto x = make_tensor<double>({1, 4}, {1, 2, 3, 4});
  auto s = slice_channels(tape, x, 2);
  CHECK(s->shape == Shape{1, 2});
  CHECK(s->data[0] == 1);
  CHECK(s->data[1] == 2);

  auto full = slice_channels(tape, x, 4);
  CHECK(full->data == x->data);

  CHECK_THROWS_AS(slice_channels(tape, x, 5), ShapeError);
  CHECK_THROWS_AS(slice_channels(tape, x, 0), ShapeError);
}

TEST_CASE("nested slices accumulate and keep exact zeros past the prefix") {
  // Four prefix heads of width n, 2n, 3n, 4n over C=8; the gradient past 3n
  // must equal head 4's contribution alone, and any index past a head's
  // prefix gets a bitwise-zero contribution from that head.
  const Index C = 8, n = 2;
  SplitMix64 rng(3);
  auto x = random_tensor({2, C}, rng);
  std::vector<TensorPtr<double>> weights;
  for (int i = 1; i <= 4; ++i) weights.push_back(random_tensor({i * n, 1}, rng));

  Tape<double> tape;
  TensorPtr<double> total;
  for (int i = 1; i <= 4; ++i) {
    auto term = reduce_all(tape, Reduce::kSum, matmul(tape, slice_channels(tape, x, i * n), weights[i - 1]));
    total = total ? add(tape, total, term) : term;
  }
  tape.backward(total);
  auto combined_grad = x->grad;

  // per-head gradients, summed by hand
  Vec<double> manual = Vec<double>::Zero(x->numel());
  for (int i = 1; i <= 4; ++i) {
    x->zero_grad();
    Tape<double> t2;
    auto loss = reduce_all(t2, Reduce::kSum, matmul(t2, slice_channels(t2, x, i * n), weights[i - 1]));
    t2.backward(loss);
    manual += x->grad;
  }
  for (Index i = 0; i < x->numel(); ++i) CHECK(combined_grad[i] == doctest::Approx(manual[i]).epsilon(1e-12));

  // head-4-only region of the combined gradient equals head 4's alone
  x->zero_grad();
  Tape<double> t4;
  auto l4 = reduce_all(t4, Reduce::kSum, matmul(t4, slice_channels(t4, x, 4 * n), weights[3]));
  t4.backward(l4);
  for (Index b = 0; b < 2; ++b)
    for (Index j = 3 * n; j < C; ++j)
      CHECK(combined_grad[b * C + j] == x->grad[b * C + j]);

  // zero-structure: a head-1-only backward leaves indices >= n at exactly 0.0
  x->zero_grad();
  Tape<double> t1;
  auto l1 = reduce_all(t1, Reduce::kSum, matmul(t1, slice_channels(t1, x, n), weights[0]));
  t1.backward(l1);
  for (Index b = 0; b < 2; ++b)
    for (Index j = n; j < C; ++j)
      CHECK(x->grad[b * C + j] == 0.0);
}

TEST_CASE("reduce forward and backward") {
  Tape<double> tape;
  auto x = make_tensor<double>({4}, {1, 2, 3, 4}, true);
  auto m = reduce_all(tape, Reduce::kMean, x);
  CHECK(m->data[0] == doctest::Approx(2.5));
  tape.backward(m);
  for (Index i = 0; i < 4; ++i) CHECK(x->grad[i] == doctest::Approx(0.25));

  Tape<double> t2;
  auto z = make_tensor<double>({3});
  CHECK(reduce_all(t2, Reduce::kSum, z)->data[0] == 0.0);

  Tape<double> t3;
  auto y = make_tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto colsum = reduce_axis(t3, Reduce::kSum, y, 0);
  CHECK(colsum->shape == Shape{3});
  CHECK(colsum->data[0] == 5);
  CHECK(colsum->data[2] == 9);
  CHECK_THROWS_AS(reduce_axis(t3, Reduce::kSum, y, 2), ShapeError);
}

TEST_CASE("backward basics and contract errors") {
  Tape<double> tape;
  auto x = make_tensor<double>({3}, {1, 2, 3}, true);
  auto loss = reduce_all(tape, Reduce::kSum, x);
  tape.backward(loss);
  for (Index i = 0; i < 3; ++i) CHECK(x->grad[i] == 1.0);

  Tape<double> t2;
  auto y = make_tensor<double>({2, 2}, true);
  CHECK_THROWS_AS(t2.backward(y), ContractError);

  // dead ReLU: loss = sum(relu(-|x|)) has zero gradient everywhere
  Tape<double> t3;
  auto z = make_tensor<double>({3}, {1, -2, 3}, true);
  auto neg = make_tensor<double>({3}, {-1, -2, -3});  // -|z|
  auto l = reduce_all(t3, Reduce::kSum, relu(t3, neg));
  (void)z;
  t3.backward(l);
  CHECK(l->data[0] == 0.0);
}

TEST_CASE("no grad allocation without requires_grad") {
  Tape<double> tape;
  auto x = make_tensor<double>({2, 2}, {1, 2, 3, 4}, false);
  auto w = make_tensor<double>({2, 1}, {1, 1}, true);
  auto loss = reduce_all(tape, Reduce::kSum, matmul(tape, x, w));
  tape.backward(loss);
  CHECK_FALSE(x->has_grad());
  CHECK(w->has_grad());
}

TEST_CASE("gradient accumulation across consumers") {
  // x feeds two consumers; grad must equal the sum of the two explicit
  // single-consumer graphs.
  SplitMix64 rng(21);
  auto x = random_tensor({4}, rng);
  auto a = random_tensor({4}, rng, false);
  auto b = random_tensor({4}, rng, false);

  Tape<double> tape;
  auto both = add(tape, mul(tape, x, a), mul(tape, x, b));
  tape.backward(reduce_all(tape, Reduce::kSum, both));
  auto joint = x->grad;

  x->zero_grad();
  Tape<double> ta;
  ta.backward(reduce_all(ta, Reduce::kSum, mul(ta, x, a)));
  auto ga = x->grad;
  x->zero_grad();
  Tape<double> tb;
  tb.backward(reduce_all(tb, Reduce::kSum, mul(tb, x, b)));
  auto gb = x->grad;

  for (Index i = 0; i < 4; ++i) CHECK(joint[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
}

TEST_CASE("grad_check on a quadratic") {
  auto w = make_tensor<double>({1}, {3.0}, true);
  auto err = grad_check<double>(
      [&](Tape<double>& t) { return mul(t, w, w); }, {w});
  CHECK(err < 1e-9);
}

TEST_CASE("pick selects one element and routes gradient there") {
  Tape<double> tape;
  auto x = make_tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto p = pick(tape, x, 1, 2);
  CHECK(p->data[0] == 6);
  tape.backward(p);
  for (Index i = 0; i < 6; ++i) CHECK(x->grad[i] == (i == 5 ? 1.0 : 0.0));
  CHECK_THROWS_AS(pick(tape, x, 2, 0), ShapeError);
}

TEST_CASE("random ops pass grad_check away from kinks") {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor_away_from_zero({3, 4}, rng);
    auto w = random_tensor({4, 2}, rng);
    auto err = grad_check<double>(
        [&](Tape<double>& t) {
          return reduce_all(t, Reduce::kMean, relu(t, matmul(t, x, w)));
        },
        {x, w});
    CHECK(err < 1e-5);
  }
}
