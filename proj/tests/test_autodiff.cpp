#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "testutil.hpp"
#include "voicemoe/rng.hpp"
#include "voicemoe/tensor.hpp"

using voicemoe::IndexError;
using voicemoe::NumericError;
using voicemoe::Rng;
using voicemoe::ShapeError;
using voicemoe::TapeError;
using voicemoe::ad::Shape;
using voicemoe::ad::Tape;
using voicemoe::ad::Tensor;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and 1x2 times 2x1") {
  Tape tape;
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  const Tensor prod = tape.matmul(eye, m);
  CHECK(prod.data()[0] == 3);
  CHECK(prod.data()[1] == 4);
  CHECK(prod.data()[2] == 5);
  CHECK(prod.data()[3] == 6);

  const Tensor row = Tensor::from_data({1, 2}, {1, 2});
  const Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(tape.matmul(row, col).item() == 11.0);

  CHECK_THROWS_AS(tape.matmul(row, row), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences on random 3x3 inputs") {
  Rng rng(11);
  Tensor a = random_tensor(rng, {3, 3}, true);
  Tensor b = random_tensor(rng, {3, 3}, true);
  std::vector<Tensor> params{a, b};
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        Tensor loss = t.sum(t.matmul(a, b));
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return t.sum(t.matmul(a, b)).item();
      });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax basics") {
  Tape tape;
  const Tensor flat = tape.softmax(Tensor::from_data({1, 2}, {0, 0}));
  CHECK(flat.data()[0] == 0.5);
  CHECK(flat.data()[1] == 0.5);

  // max-subtraction keeps huge logits finite
  const Tensor big = tape.softmax(Tensor::from_data({1, 2}, {1000, 1000}));
  CHECK(big.data()[0] == 0.5);
  CHECK(big.data()[1] == 0.5);

  const Tensor s = tape.softmax(Tensor::from_data({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(s.data()[static_cast<std::size_t>(i)] - std::exp(1.0 + i) / z) < 1e-12);
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tape.softmax(Tensor::from_data({1, 2}, {nan, 0.0})), NumericError);
}

TEST_CASE("softmax rows are a probability simplex on random inputs") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    const auto rows = static_cast<std::int64_t>(1 + rng.uniform_int(6));
    const auto cols = static_cast<std::int64_t>(1 + rng.uniform_int(8));
    const Tensor y = tape.softmax(random_tensor(rng, {rows, cols}, false, -30.0, 30.0));
    for (std::int64_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const double v = y.data()[static_cast<std::size_t>(r * cols + c)];
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("log_softmax agrees with log of softmax and has a correct backward") {
  Rng rng(13);
  Tensor x = random_tensor(rng, {3, 4}, true, -3.0, 3.0);
  {
    Tape t(false);
    const Tensor a = t.log_softmax(x);
    const Tensor b = t.log(t.softmax(x));
    for (std::size_t i = 0; i < a.data().size(); ++i)
      CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }
  std::vector<Tensor> params{x};
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        // weight the entries so the pullback is not uniform
        Tensor w = Tensor::from_data({3, 4}, {1, -2, 3, -4, 5, -6, 7, -8, 9, -10, 11, -12});
        Tensor loss = t.mean(t.mul(t.log_softmax(x), w));
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        Tensor w = Tensor::from_data({3, 4}, {1, -2, 3, -4, 5, -6, 7, -8, 9, -10, 11, -12});
        return t.mean(t.mul(t.log_softmax(x), w)).item();
      });
  CHECK(err < 1e-4);
}

TEST_CASE("layer_norm values") {
  Tape tape;
  const Tensor gain = Tensor::full({4}, 1.0);
  const Tensor bias = Tensor::zeros({4});

  // constant row: zero variance is absorbed by eps
  const Tensor c = tape.layer_norm(Tensor::full({1, 4}, 3.0), gain, bias, 1e-5);
  for (const double v : c.data()) CHECK(v == 0.0);

  const Tensor two = tape.layer_norm(Tensor::from_data({1, 2}, {1, -1}),
                                     Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-5);
  CHECK(two.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(two.data()[1] == doctest::Approx(-1.0).epsilon(1e-5));

  // random 4-vector against the direct formula
  Rng rng(14);
  Tensor x = random_tensor(rng, {1, 4}, false, -2.0, 2.0);
  const Tensor y = tape.layer_norm(x, gain, bias, 1e-5);
  double mu = 0.0;
  for (const double v : x.data()) mu += v;
  mu /= 4.0;
  double var = 0.0;
  for (const double v : x.data()) var += (v - mu) * (v - mu);
  var /= 4.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double want = (x.data()[i] - mu) / std::sqrt(var + 1e-5);
    CHECK(std::abs(y.data()[i] - want) < 1e-10);
  }
}

TEST_CASE("layer_norm backward matches finite differences") {
  Rng rng(15);
  Tensor x = random_tensor(rng, {3, 5}, true);
  Tensor gain = random_tensor(rng, {5}, true, 0.5, 1.5);
  Tensor bias = random_tensor(rng, {5}, true);
  const Tensor w = random_tensor(rng, {3, 5}, false);
  std::vector<Tensor> params{x, gain, bias};
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        Tensor loss = t.mean(t.mul(t.layer_norm(x, gain, bias, 1e-5), w));
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return t.mean(t.mul(t.layer_norm(x, gain, bias, 1e-5), w)).item();
      });
  CHECK(err < 1e-4);
}

TEST_CASE("clip and minimum edge behavior") {
  Tape tape;
  Tensor x = Tensor::from_data({1}, {0.5}, true);
  const Tensor clipped = tape.clip(x, 0.8, 1.2);
  CHECK(clipped.item() == 0.8);
  tape.backward(clipped);
  CHECK(x.grad()[0] == 0.0);  // outside the interval, zero gradient

  Tape tape2;
  Tensor a = Tensor::from_data({1}, {2.0}, true);
  Tensor b = Tensor::from_data({1}, {3.0}, true);
  const Tensor m = tape2.minimum(a, b);
  CHECK(m.item() == 2.0);
  tape2.backward(m);
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 0.0);

  // tie: gradient goes to the first argument
  Tape tape3;
  Tensor c = Tensor::from_data({1}, {5.0}, true);
  Tensor d = Tensor::from_data({1}, {5.0}, true);
  const Tensor m2 = tape3.minimum(c, d);
  tape3.backward(m2);
  CHECK(c.grad()[0] == 1.0);
  CHECK(d.grad()[0] == 0.0);
}

TEST_CASE("mean(relu(x)) gradient matches finite differences away from the kink") {
  Rng rng(16);
  Tensor x = Tensor::zeros({4, 4}, true);
  for (auto& v : x.mutable_data()) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < 0.05);  // keep clear of the kink
  }
  std::vector<Tensor> params{x};
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        Tensor loss = t.mean(t.relu(x));
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return t.mean(t.relu(x)).item();
      });
  CHECK(err < 1e-6);
}

TEST_CASE("log and div reject invalid operands") {
  Tape tape;
  CHECK_THROWS_AS(tape.log(Tensor::from_data({2}, {1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(tape.log(Tensor::from_data({1}, {-2.0})), NumericError);
  CHECK_THROWS_AS(tape.div(Tensor::from_data({1}, {1.0}), Tensor::from_data({1}, {0.0})),
                  NumericError);
  CHECK_THROWS_AS(tape.add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("gather_log_prob selects and scatters per row") {
  Tape tape;
  const double l3 = std::log(0.3), l7 = std::log(0.7);
  const Tensor logp = Tensor::from_data({2, 2}, {l3, l7, l7, l3});
  const Tensor picked = tape.gather_log_prob(logp, {1, 0}, {2});
  CHECK(picked.data()[0] == l7);
  CHECK(picked.data()[1] == l7);

  // all-zero action column selects the first column
  const Tensor first = tape.gather_log_prob(logp, {0, 0}, {2});
  CHECK(first.data()[0] == l3);
  CHECK(first.data()[1] == l7);

  CHECK_THROWS_AS(tape.gather_log_prob(logp, {0, 2}, {2}), IndexError);
}

TEST_CASE("gather_log_prob backward sums duplicate selections within a group") {
  Rng rng(17);
  Tensor logits = random_tensor(rng, {2, 3}, true);
  const std::vector<std::int64_t> actions{0, 2, 0, 0, 1, 1};  // [2 x 3] with duplicates

  Tape tape;
  const Tensor picked = tape.gather_log_prob(logits, actions, {2, 3});
  const Tensor loss = tape.sum(picked);
  tape.backward(loss);

  // loop-based oracle: count how often each entry was selected
  std::vector<double> want(6, 0.0);
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t j = 0; j < 3; ++j)
      want[static_cast<std::size_t>(i * 3 + actions[static_cast<std::size_t>(i * 3 + j)])] += 1.0;
  for (std::size_t i = 0; i < 6; ++i) CHECK(logits.grad()[i] == want[i]);
}

TEST_CASE("detach copies values bit-identically and never accumulates gradient") {
  Rng rng(18);
  Tensor x = random_tensor(rng, {3, 3}, true);
  const Tensor d = x.detach();
  CHECK(d.data().size() == x.data().size());
  for (std::size_t i = 0; i < d.data().size(); ++i) CHECK(d.data()[i] == x.data()[i]);
  CHECK_FALSE(d.requires_grad());

  Tape tape;
  Tensor dd = x.detach();
  const Tensor loss = tape.mean(tape.mul(tape.mul(x, dd), dd));
  tape.backward(loss);
  CHECK(x.grad().size() == 9);
  CHECK_THROWS_AS((void)dd.grad(), TapeError);
}

TEST_CASE("tape misuse") {
  Rng rng(19);
  Tensor x = random_tensor(rng, {2}, true);
  Tape tape;
  const Tensor loss = tape.mean(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);  // double backward

  // no requires_grad anywhere -> backward is a no-op, repeatable
  Tape t2;
  const Tensor c = t2.mean(Tensor::from_data({2}, {1.0, 2.0}));
  t2.backward(c);
  t2.backward(c);
  CHECK(c.item() == 1.5);

  Tape t3;
  CHECK_THROWS_AS(t3.backward(random_tensor(rng, {2}, true)), TapeError);  // non-scalar root
}

TEST_CASE("structural ops: reshape, heads, rows, columns, embedding") {
  Rng rng(20);
  const std::int64_t b = 2, tks = 3, h = 2, d = 4;
  Tensor x = random_tensor(rng, {b * tks, d}, true);
  Tensor s = random_tensor(rng, {b}, true);
  Tensor g = random_tensor(rng, {b, 3}, true);
  Tensor feats = random_tensor(rng, {b, tks}, false);
  Tensor scale = random_tensor(rng, {tks, d}, true);
  Tensor shift = random_tensor(rng, {tks, d}, true);
  Tensor pos = random_tensor(rng, {tks, d}, true);
  Tensor v3 = random_tensor(rng, {b * h, tks, d / h}, true);

  // split/merge are mutually inverse permutations
  {
    Tape t(false);
    const Tensor split = t.split_heads(x, b, tks, h);
    const Tensor merged = t.merge_heads(split, b, tks, h);
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(merged.data()[i] == x.data()[i]);
  }

  std::vector<Tensor> params{x, s, g, scale, shift, pos, v3};
  const auto build = [&](Tape& t) {
    Tensor tokens = t.embed_tokens(feats, scale, shift, pos);       // [b,tks,d]
    Tensor pooled = t.mean_axis1(tokens);                           // [b,d]
    Tensor heads = t.split_heads(x, b, tks, h);                     // [b*h,tks,d/h]
    Tensor attn = t.softmax(t.bmm_nt(heads, v3));                   // [b*h,tks,tks]
    Tensor ctx = t.merge_heads(t.bmm_nn(attn, v3), b, tks, h);      // [b*tks,d]
    Tensor picked = t.scale_rows(pooled, s);                        // [b,d]
    Tensor col = t.select_column(g, 1);                             // [b]
    Tensor total = t.add(t.mean(ctx), t.add(t.mean(t.scale_rows(picked, col)),
                                            t.mean(t.reshape(tokens, {b * tks, d}))));
    return total;
  };
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        Tensor loss = build(t);
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return build(t).item();
      });
  CHECK(err < 1e-4);
}

TEST_CASE("scalar ops, exp, sub, div compose with correct gradients") {
  Rng rng(21);
  Tensor a = random_tensor(rng, {4}, true, 0.5, 2.0);
  Tensor b = random_tensor(rng, {4}, true, 0.5, 2.0);
  std::vector<Tensor> params{a, b};
  const auto build = [&](Tape& t) {
    Tensor r = t.div(t.exp(t.mul_scalar(a, 0.3)), t.add_scalar(b, 1.0));
    Tensor u = t.sub(r, t.log(b));
    return t.mean(t.mul(u, u));
  };
  const double err = testutil::max_grad_fd_error(
      params,
      [&] {
        Tape t;
        Tensor loss = build(t);
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return build(t).item();
      });
  CHECK(err < 1e-4);
}
