#include <catch_amalgamated.hpp>

#include <random>

#include "mixprune/quant.hpp"
#include "test_util.hpp"

using namespace mixprune;
using mixprune::testing::random_array;

TEST_CASE("affine quantization of a hand example") {
  Eigen::ArrayXd t(3);
  t << 0.0, 0.5, 1.0;
  const auto q = affine_quantize(t, {0.0, 1.0, 2});
  CHECK(q(0) == 0);
  CHECK(q(1) == 2);  // 1.5 rounds away from zero
  CHECK(q(2) == 3);
}

TEST_CASE("affine quantization clamps and keeps zeros") {
  Eigen::ArrayXd neg(1);
  neg << -5.0;
  CHECK(affine_quantize(neg, {0.0, 1.0, 8})(0) == 0);
  for (int n = 1; n <= 8; ++n) CHECK((affine_quantize(Eigen::ArrayXd::Zero(5), {0.0, 1.0, n}) == 0).all());
}

TEST_CASE("affine quantization rejects zero bits") {
  try {
    affine_quantize(Eigen::ArrayXd::Zero(2), {0.0, 1.0, 0});
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contract);
  }
}

TEST_CASE("affine codes stay in range for random tensors") {
  const auto t = random_array<double>(200, 3, -3, 3);
  for (int n = 1; n <= 8; ++n) {
    const auto q = affine_quantize(t, {-1.0, 2.0, n});
    CHECK(q.minCoeff() >= 0);
    CHECK(q.maxCoeff() <= (1 << n) - 1);
  }
}

TEST_CASE("symmetric two-bit weights use three levels") {
  Eigen::ArrayXd w(3);
  w << -1.0, 0.5, 1.0;
  const auto y = fake_quantize_weights<double>(w, 2);
  CHECK(y(0) == -1.0);
  CHECK(y(1) == 1.0);
  CHECK(y(2) == 1.0);
}

TEST_CASE("zero-bit quantizer outputs zeros") {
  const auto w = random_array<double>(10, 1);
  CHECK((fake_quantize_weights<double>(w, 0) == 0.0).all());
}

TEST_CASE("representable weights are a fixed point") {
  for (int n : {2, 4, 8}) {
    const int qmax = symmetric_qmax(n);
    Eigen::ArrayXd w(2 * qmax + 1);
    for (int k = -qmax; k <= qmax; ++k) w(k + qmax) = 0.7 * (static_cast<double>(k) / qmax);
    CHECK((fake_quantize_weights<double>(w, n) == w).all());
  }
}

TEST_CASE("weight quantization is idempotent and monotone") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto w = random_array<double>(64, seed, -2, 2);
    std::sort(w.data(), w.data() + w.size());
    for (int n : {2, 3, 4, 8}) {
      const auto once = fake_quantize_weights<double>(w, n);
      CHECK((fake_quantize_weights<double>(once, n) == once).all());
      for (Index i = 1; i < once.size(); ++i) CHECK(once(i) >= once(i - 1));
    }
  }
}

TEST_CASE("per-channel quantization never mixes channels") {
  const auto w = random_array<double>(4 * 6, 9);
  const std::vector<int> bits{8, 0, 2, 4};
  const auto full = fake_quantize_channels<double>(w, 4, bits);
  for (Index r = 0; r < 4; ++r) {
    Eigen::ArrayXd alone = w.segment(r * 6, 6);
    CHECK((full.segment(r * 6, 6) == fake_quantize_weights<double>(alone, bits[static_cast<std::size_t>(r)])).all());
  }
}

TEST_CASE("PACT hand example and error bound") {
  Eigen::ArrayXd x(3);
  x << -1.0, 0.5, 9.0;
  const auto y = fake_quantize_activations<double>(x, 8, 1.0);
  CHECK(y(0) == 0.0);
  CHECK(std::abs(y(1) - 128.0 / 255.0) < 1e-15);
  CHECK(y(2) == 1.0);

  const auto in = random_array<double>(500, 4, 0, 1);
  const auto q = fake_quantize_activations<double>(in, 8, 1.0);
  CHECK((q - in).abs().maxCoeff() <= 1.0 / (2 * 255.0) + 1e-15);
}

TEST_CASE("PACT is idempotent and monotone") {
  auto x = random_array<double>(100, 5, -1, 8);
  std::sort(x.data(), x.data() + x.size());
  for (int n : {2, 4, 8}) {
    const auto once = fake_quantize_activations<double>(x, n, 6.0);
    CHECK((fake_quantize_activations<double>(once, n, 6.0) == once).all());
    for (Index i = 1; i < once.size(); ++i) CHECK(once(i) >= once(i - 1));
  }
}

TEST_CASE("PACT clip gradient counts saturated elements") {
  Tape<double> t;
  auto x = t.constant(Eigen::ArrayXd::Constant(7, 3.0), Shape{7});
  auto clip = t.variable(Eigen::ArrayXd::Constant(1, 1.0), Shape{});
  t.backward(sum(pact(x, clip, 4)));
  CHECK(clip.grad()(0) == 7.0);
}

TEST_CASE("straight-through weight gradient is identity, zero for pruned") {
  Tape<double> t;
  auto w = t.variable(random_array<double>(3 * 4, 2), Shape{3, 4});
  const std::vector<int> bits{4, 0, 8};
  t.backward(sum(fake_quant_weights(w, std::span<const int>(bits))));
  for (Index k = 0; k < 12; ++k) CHECK(w.grad()(k) == (k / 4 == 1 ? 0.0 : 1.0));

  Tape<double> t0;
  auto w0 = t0.variable(random_array<double>(6, 3), Shape{2, 3});
  auto y0 = fake_quant_weights(w0, 0);
  CHECK((y0.value() == 0.0).all());
  t0.backward(sum(y0));
  CHECK((w0.grad() == 0.0).all());
}

TEST_CASE("quantizer surrogates pass gradient checks on 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const GradientCheckOptions surrogate{true};
    const auto xv = random_array<double>(24, seed, -1, 7);
    const Eigen::ArrayXd clipv = Eigen::ArrayXd::Constant(1, 4.5);
    ScalarFunction<double> fx = [&](Tape<double>& t, Var<double> x) {
      return mixprune::testing::contract(pact(x, t.variable(clipv, Shape{}), 4), seed);
    };
    CHECK(check_gradient(fx, xv, Shape{24}, 1e-6, surrogate) < 1e-6);
    ScalarFunction<double> fc = [&](Tape<double>& t, Var<double> c) {
      return mixprune::testing::contract(pact(t.constant(xv, Shape{24}), c, 4), seed);
    };
    CHECK(check_gradient(fc, clipv, Shape{}, 1e-6, surrogate) < 1e-6);

    const std::vector<int> bits{2, 0, 8};
    ScalarFunction<double> fw = [&](Tape<double>&, Var<double> w) {
      return mixprune::testing::contract(fake_quant_weights(w, std::span<const int>(bits)), seed);
    };
    CHECK(check_gradient(fw, random_array<double>(12, seed), Shape{3, 4}, 1e-6, surrogate) < 1e-6);

    ScalarFunction<float> ff = [&](Tape<float>& t, Var<float> x) {
      return mixprune::testing::contract(pact(x, t.scalar_constant(4.5f), 8), seed);
    };
    auto oracle = [&](const Eigen::ArrayXd& p) {
      Tape<double> t;
      t.surrogate_forward = true;
      return mixprune::testing::contract(pact(t.constant(p, Shape{24}), t.scalar_constant(4.5), 8), seed).item();
    };
    CHECK(check_gradient(ff, Array<float>(xv.cast<float>()), Shape{24}, 1e-3, surrogate, oracle) < 1e-4);
  }
}

TEST_CASE("precision sets validate their bit-widths") {
  CHECK_THROWS_AS(PrecisionSet::weights({2, 4, 8}), Error);
  CHECK_THROWS_AS(PrecisionSet::weights({0, 4, 2}), Error);
  CHECK_THROWS_AS(PrecisionSet::activations({0, 8}), Error);
  CHECK_THROWS_AS(PrecisionSet::activations({}), Error);
  const auto pw = PrecisionSet::weights({0, 2, 4, 8});
  CHECK(pw.index_of(4) == 2);
  CHECK(pw.max() == 8);
}
