#include <catch_amalgamated.hpp>

#include <random>

#include "mixprune/autodiff.hpp"
#include "mixprune/ops.hpp"
#include "test_util.hpp"

using namespace mixprune;
using Catch::Approx;

using mixprune::testing::contract;
using mixprune::testing::random_array;

TEST_CASE("square derivative at three") {
  Tape<double> t;
  auto x = t.variable(Array<double>::Constant(1, 3.0), Shape{});
  auto y = square(x);
  t.backward(y);
  CHECK(x.grad()(0) == 6.0);
}

TEST_CASE("backward on a non-scalar output is a contract error") {
  Tape<double> t;
  auto x = t.variable(Array<double>::Ones(3), Shape{3});
  try {
    t.backward(x);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contract);
  }
}

TEST_CASE("forward values of basic ops") {
  Tape<double> t;
  Array<double> av(2), bv(2);
  av << 1, 2;
  bv << 3, 4;
  auto a = t.constant(av, Shape{2});
  auto b = t.constant(bv, Shape{2});
  CHECK((a + b).value()(1) == 6.0);
  CHECK((a * b).value()(0) == 3.0);
  Array<double> r(2);
  r << -1, 2;
  auto rl = relu(t.constant(r, Shape{2}));
  CHECK(rl.value()(0) == 0.0);
  CHECK(rl.value()(1) == 2.0);
}

TEST_CASE("identity 1x1 convolution returns its input") {
  Tape<double> t;
  const Index c = 3;
  auto x = t.constant(random_array<double>(2 * c * 4 * 4, 1), Shape{2, c, 4, 4});
  Array<double> w = Array<double>::Zero(c * c);
  for (Index k = 0; k < c; ++k) w(k * c + k) = 1.0;
  auto y = conv2d(x, t.constant(w, Shape{c, c, 1, 1}), t.constant(Array<double>::Zero(c), Shape{c}), 1, 0);
  CHECK(y.shape() == x.shape());
  CHECK((y.value() - x.value()).abs().maxCoeff() == 0.0);
}

TEST_CASE("linear matches a naive triple loop") {
  Tape<double> t;
  const auto xv = random_array<double>(9, 2), wv = random_array<double>(9, 3), bv = random_array<double>(3, 4);
  auto y = linear(t.constant(xv, Shape{3, 3}), t.constant(wv, Shape{3, 3}), t.constant(bv, Shape{3}));
  for (int n = 0; n < 3; ++n)
    for (int o = 0; o < 3; ++o) {
      double acc = bv(o);
      for (int i = 0; i < 3; ++i) acc += xv(n * 3 + i) * wv(o * 3 + i);
      CHECK(std::abs(y.value()(n * 3 + o) - acc) < 1e-7);
    }
}

TEST_CASE("convolution matches a direct loop with stride and padding") {
  Tape<double> t;
  const Index n = 2, ci = 3, co = 4, h = 5, w = 6, k = 3, stride = 2, pad = 1;
  const auto xv = random_array<double>(n * ci * h * w, 5), wv = random_array<double>(co * ci * k * k, 6);
  const auto bv = random_array<double>(co, 7);
  auto y = conv2d(t.constant(xv, Shape{n, ci, h, w}), t.constant(wv, Shape{co, ci, k, k}), t.constant(bv, Shape{co}),
                  stride, pad);
  const Index ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  REQUIRE(y.shape() == Shape{n, co, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < co; ++o)
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          double acc = bv(o);
          for (Index c = 0; c < ci; ++c)
            for (Index u = 0; u < k; ++u)
              for (Index v = 0; v < k; ++v) {
                const Index yy = i * stride - pad + u, xx = j * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                acc += xv(((b * ci + c) * h + yy) * w + xx) * wv(((o * ci + c) * k + u) * k + v);
              }
          CHECK(std::abs(y.value()(((b * co + o) * ho + i) * wo + j) - acc) < 1e-12);
        }
}

TEST_CASE("sum of squares gradient check in double precision") {
  const auto x = random_array<double>(8, 11);
  ScalarFunction<double> f = [](Tape<double>&, Var<double> v) { return sum(square(v)); };
  CHECK(check_gradient(f, x, Shape{8}, 1e-5) < 1e-6);
}

TEST_CASE("constant function has zero gradient error") {
  ScalarFunction<double> f = [](Tape<double>& t, Var<double>) { return t.scalar_constant(2.0); };
  CHECK(check_gradient(f, random_array<double>(4, 1), Shape{4}, 1e-4) == 0.0);
}

TEST_CASE("softmax cross entropy gradient in single precision") {
  const std::vector<int> labels{1, 4};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_array<float>(10, seed, -2, 2);
    ScalarFunction<float> f = [&](Tape<float>&, Var<float> v) {
      return softmax_cross_entropy<float>(v, labels, {});
    };
    auto oracle = [&](const Eigen::ArrayXd& p) {
      Tape<double> t;
      auto v = t.constant(p, Shape{2, 5});
      return softmax_cross_entropy<double>(v, labels, {}).item();
    };
    CHECK(check_gradient(f, x, Shape{2, 5}, 1e-3, {}, oracle) < 1e-4);
  }
}

TEST_CASE("weighted cross entropy is a weighted mean") {
  Tape<double> t;
  Array<double> l(4);
  l << 1, 0, 0, 1;
  auto logits = t.constant(l, Shape{2, 2});
  const std::vector<int> labels{0, 0};
  const std::vector<double> cw{2.0, 1.0};
  const double expected = (std::log(1 + std::exp(-1.0)) + std::log(1 + std::exp(1.0))) / 2;
  CHECK(softmax_cross_entropy<double>(logits, labels, cw).item() == Approx(expected).epsilon(1e-12));
}

TEST_CASE("layer ops pass double precision gradient checks on 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index n = 2, ci = 3, co = 4, h = 5, w = 5;
    const auto xv = random_array<double>(n * ci * h * w, seed + 100);
    const auto wv = random_array<double>(co * ci * 9, seed + 200);
    const auto dwv = random_array<double>(ci * 9, seed + 300);
    const auto bv = random_array<double>(co, seed + 400);

    ScalarFunction<double> conv_x = [&](Tape<double>& t, Var<double> x) {
      return contract(conv2d(x, t.constant(wv, Shape{co, ci, 3, 3}), t.constant(bv, Shape{co}), 2, 1), seed);
    };
    CHECK(check_gradient(conv_x, xv, Shape{n, ci, h, w}, 1e-5) < 1e-6);

    ScalarFunction<double> conv_w = [&](Tape<double>& t, Var<double> wt) {
      return contract(conv2d(t.constant(xv, Shape{n, ci, h, w}), wt, t.constant(bv, Shape{co}), 1, 1), seed);
    };
    CHECK(check_gradient(conv_w, wv, Shape{co, ci, 3, 3}, 1e-5) < 1e-6);

    ScalarFunction<double> conv_b = [&](Tape<double>& t, Var<double> b) {
      return contract(conv2d(t.constant(xv, Shape{n, ci, h, w}), t.constant(wv, Shape{co, ci, 3, 3}), b, 1, 0), seed);
    };
    CHECK(check_gradient(conv_b, bv, Shape{co}, 1e-5) < 1e-6);

    ScalarFunction<double> dw_x = [&](Tape<double>& t, Var<double> x) {
      return contract(depthwise2d(x, t.constant(dwv, Shape{ci, 1, 3, 3}), t.constant(Array<double>(bv.head(ci)), Shape{ci}), 2, 1), seed);
    };
    CHECK(check_gradient(dw_x, xv, Shape{n, ci, h, w}, 1e-5) < 1e-6);

    ScalarFunction<double> dw_w = [&](Tape<double>& t, Var<double> wt) {
      return contract(depthwise2d(t.constant(xv, Shape{n, ci, h, w}), wt, t.constant(Array<double>(bv.head(ci)), Shape{ci}), 1, 1), seed);
    };
    CHECK(check_gradient(dw_w, dwv, Shape{ci, 1, 3, 3}, 1e-5) < 1e-6);

    const auto lw = random_array<double>(4 * 6, seed + 500);
    const auto lx = random_array<double>(3 * 6, seed + 600);
    ScalarFunction<double> lin_x = [&](Tape<double>& t, Var<double> x) {
      return contract(linear(x, t.constant(lw, Shape{4, 6}), t.constant(bv, Shape{4})), seed);
    };
    CHECK(check_gradient(lin_x, lx, Shape{3, 6}, 1e-5) < 1e-6);
    ScalarFunction<double> lin_w = [&](Tape<double>& t, Var<double> wt) {
      return contract(linear(t.constant(lx, Shape{3, 6}), wt, t.constant(bv, Shape{4})), seed);
    };
    CHECK(check_gradient(lin_w, lw, Shape{4, 6}, 1e-5) < 1e-6);

    ScalarFunction<double> pool = [&](Tape<double>&, Var<double> x) { return contract(global_avg_pool(x), seed); };
    CHECK(check_gradient(pool, xv, Shape{n, ci, h, w}, 1e-5) < 1e-6);

    ScalarFunction<double> cat = [&](Tape<double>& t, Var<double> x) {
      auto other = t.constant(random_array<double>(n * 2 * h * w, seed), Shape{n, 2, h, w});
      return contract(concat_channels<double>({other, x, square(other)}), seed);
    };
    CHECK(check_gradient(cat, xv, Shape{n, ci, h, w}, 1e-5) < 1e-6);

    ScalarFunction<double> rows = [&](Tape<double>& t, Var<double> m) {
      auto f = t.constant(random_array<double>(3, seed, 0.5, 1.5), Shape{3});
      return contract(scale_rows(m, f) + scale_rows(m, col_sums(m)), seed) + sum(square(column(m, 1)));
    };
    CHECK(check_gradient(rows, random_array<double>(9, seed), Shape{3, 3}, 1e-5) < 1e-6);
  }
}

TEST_CASE("single precision convolution gradients against a double oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto xv = random_array<double>(1 * 2 * 4 * 4, seed);
    const auto wv = random_array<double>(3 * 2 * 9, seed + 1);
    ScalarFunction<float> f = [&](Tape<float>& t, Var<float> wt) {
      return contract(conv2d(t.constant(xv.cast<float>(), Shape{1, 2, 4, 4}), wt,
                             t.constant(Array<float>::Zero(3), Shape{3}), 1, 1), seed);
    };
    auto oracle = [&](const Eigen::ArrayXd& p) {
      Tape<double> t;
      return contract(conv2d(t.constant(xv, Shape{1, 2, 4, 4}), t.constant(p, Shape{3, 2, 3, 3}),
                             t.constant(Array<double>::Zero(3), Shape{3}), 1, 1), seed).item();
    };
    CHECK(check_gradient(f, Array<float>(wv.cast<float>()), Shape{3, 2, 3, 3}, 1e-3, {}, oracle) < 1e-4);
  }
}
