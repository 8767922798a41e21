#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "mixprune/cost.hpp"
#include "test_util.hpp"

using namespace mixprune;
using mixprune::testing::random_array;

namespace {

NetworkGraph single_conv(int cin, int cout, int hw, int kernel = 3) {
  return NetworkGraph::build({cin, hw, hw}, {{"conv", LayerKind::conv2d, {}, cout, kernel, 1, kernel / 2}});
}

CostLUT full_lut(const SearchSpace& space, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 16.0);
  CostLUT lut;
  for (int px : space.activations.bits())
    for (int pw : space.weights.bits())
      if (pw) lut.set(px, pw, u(rng));
  return lut;
}

Assignment random_assignment(const NetworkGraph& g, const SearchSpace& space, std::mt19937_64& rng) {
  Assignment a = Assignment::uniform(g, 8, space.activations.max());
  std::uniform_int_distribution<int> wp(0, space.weights.size() - 1), ap(0, space.activations.size() - 1);
  for (auto& bits : a.group_bits)
    for (auto& b : bits) b = space.weights[wp(rng)];
  for (int q : g.quantizable_layers()) a.act_bits[static_cast<std::size_t>(q)] = space.activations[ap(rng)];
  return a;
}

// Surviving input features per output channel, counted from the assignment.
double surviving_inputs(const NetworkGraph& g, const Assignment& a, int q) {
  const auto& s = g.layer(q);
  if (s.kind == LayerKind::depthwise2d) return 1;
  const int ig = g.input_group(q);
  if (ig < 0) return s.c_in;
  double alive = 0;
  for (int b : a.group_bits[static_cast<std::size_t>(ig)]) alive += b != 0;
  return alive * g.input_channel_stride(q);
}

double bits_oracle(const NetworkGraph& g, const Assignment& a) {
  double total = 0;
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    for (int b : a.channel_bits(g, q)) total += surviving_inputs(g, a, q) * s.k_x * s.k_y * b;
  }
  return total;
}

double mpic_oracle(const NetworkGraph& g, const Assignment& a, const CostLUT& lut) {
  double cycles = 0;
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    const int px = a.act_bits[static_cast<std::size_t>(q)];
    for (int pw : a.channel_bits(g, q)) {
      if (pw == 0) continue;
      const double macs = static_cast<double>(s.k_x) * s.k_y * s.h_out * s.w_out * surviving_inputs(g, a, q);
      cycles += macs / lut.at(px, pw);
    }
  }
  return cycles;
}

template <typename Scalar>
SampledSelectors<Scalar> softmax_selectors(Tape<Scalar>& t, const NetworkGraph& g, const SearchSpace& space,
                                           const Array<Scalar>& gamma_flat, const Array<Scalar>& delta_flat,
                                           bool gamma_var, bool delta_var) {
  SampledSelectors<Scalar> s;
  const Index pw = space.weights.size(), px = space.activations.size();
  Index off = 0;
  for (int k = 0; k < g.group_count(); ++k) {
    const Index rows = g.group_channels(k);
    Array<Scalar> raw = gamma_flat.segment(off, rows * pw);
    off += rows * pw;
    auto v = gamma_var ? t.variable(raw, Shape{rows, pw}) : t.constant(raw, Shape{rows, pw});
    s.gamma_hat.push_back(sample_rows(v, SamplingMethod::softmax, Scalar(1)));
  }
  s.delta_hat.resize(static_cast<std::size_t>(g.size()));
  off = 0;
  for (int q : g.quantizable_layers()) {
    Array<Scalar> raw = delta_flat.segment(off, px);
    off += px;
    auto v = delta_var ? t.variable(raw, Shape{px}) : t.constant(raw, Shape{px});
    s.delta_hat[static_cast<std::size_t>(q)] = sample_rows(v, SamplingMethod::softmax, Scalar(1));
  }
  return s;
}

Index gamma_size(const NetworkGraph& g, const SearchSpace& space) {
  Index n = 0;
  for (int k = 0; k < g.group_count(); ++k) n += g.group_channels(k) * space.weights.size();
  return n;
}

}  // namespace

TEST_CASE("effective input channels hand example") {
  const auto g = NetworkGraph::build(
      {1, 4, 4}, {{"a", LayerKind::conv2d, {}, 4, 3, 1, 1}, {"b", LayerKind::conv2d, {}, 2, 3, 1, 1}});
  const SearchSpace space;
  Tape<double> t;
  Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(16);
  const double p0[4] = {0.5, 0, 1, 0.25};
  for (int i = 0; i < 4; ++i) {
    ga(i * 4) = p0[i];
    ga(i * 4 + 3) = 1 - p0[i];
  }
  std::vector<Var<double>> gh{t.constant(ga, Shape{4, 4}), t.constant(Eigen::ArrayXd::Zero(8), Shape{2, 4})};
  CHECK(effective_input_channels(t, g, g.index_of("b"), gh, space).item() == 2.25);
  CHECK(effective_input_channels(t, g, g.index_of("a"), gh, space).item() == 1.0);
}

TEST_CASE("size cost hand examples") {
  const auto g = single_conv(3, 2, 5);
  const SearchSpace space;
  Assignment a = Assignment::uniform(g, 8, 8);
  a.group_bits[0] = {8, 4};
  CHECK(evaluate_cost(g, a, space, {CostKind::size}) == 324.0);
  CHECK(evaluate_cost(g, Assignment::uniform(g, 0, 8), space, {CostKind::size}) == 0.0);
}

TEST_CASE("uniform precision sizes are in ratio 4:2:1") {
  const auto g = build_toy_convnet({});
  const SearchSpace space;
  const double s8 = evaluate_cost(g, Assignment::uniform(g, 8, 8), space, {CostKind::size});
  const double s4 = evaluate_cost(g, Assignment::uniform(g, 4, 8), space, {CostKind::size});
  const double s2 = evaluate_cost(g, Assignment::uniform(g, 2, 8), space, {CostKind::size});
  CHECK(s8 == 2 * s4);
  CHECK(s4 == 2 * s2);
  CHECK(s8 > 0);
}

TEST_CASE("bitops hand examples") {
  const auto g = single_conv(3, 2, 5);
  const double macs = 9.0 * 25 * 3 * 2;
  const SearchSpace space;
  CHECK(evaluate_cost(g, Assignment::uniform(g, 8, 8), space, {CostKind::bitops}) == 64 * macs);
  CHECK(evaluate_cost(g, Assignment::uniform(g, 0, 8), space, {CostKind::bitops}) == 0.0);

  SearchSpace four_eight;
  four_eight.activations = PrecisionSet::activations({4, 8});
  Tape<double> t;
  auto s = one_hot_selectors<double>(t, g, Assignment::uniform(g, 4, 8), four_eight);
  Eigen::ArrayXd half = Eigen::ArrayXd::Constant(2, 0.5);
  s.delta_hat[static_cast<std::size_t>(g.index_of("conv"))] = t.constant(half, Shape{2});
  CHECK(bitops_cost(t, g, s.delta_hat, s.gamma_hat, four_eight).item() == 24 * macs);
}

TEST_CASE("mpic hand examples") {
  const auto g = NetworkGraph::build({1000, 1, 1}, {{"flat", LayerKind::flatten}, {"fc", LayerKind::linear, {}, 1}});
  const SearchSpace space;
  CostLUT lut = full_lut(space, 1);
  lut.set(8, 8, 4.0);
  CostModel model{CostKind::mpic, lut, std::nullopt};
  CHECK(evaluate_cost(g, Assignment::uniform(g, 8, 8), space, model) == 250.0);
  CHECK(evaluate_cost(g, Assignment::uniform(g, 0, 8), space, model) == 0.0);

  // Moving activation mass from 8 to 4 bits with a faster 4-bit entry lowers the cost.
  lut.set(4, 8, 8.0);
  Tape<double> t;
  auto s = one_hot_selectors<double>(t, g, Assignment::uniform(g, 8, 8), space);
  const auto fc = static_cast<std::size_t>(g.index_of("fc"));
  const double before = mpic_cost(t, g, s.delta_hat, s.gamma_hat, space, lut).item();
  Eigen::ArrayXd shifted(3);
  shifted << 0, 0.5, 0.5;
  s.delta_hat[fc] = t.constant(shifted, Shape{3});
  CHECK(mpic_cost(t, g, s.delta_hat, s.gamma_hat, space, lut).item() < before);
}

TEST_CASE("one-hot costs match independent oracles on random assignments") {
  const SearchSpace space;
  std::mt19937_64 rng(7);
  for (int depth : {1, 3, 5}) {
    const auto g = build_toy_convnet({.depth = depth, .width = 6, .separable_width = 10});
    const auto lut = full_lut(space, static_cast<std::uint64_t>(depth));
    for (int trial = 0; trial < 50; ++trial) {
      const auto a = random_assignment(g, space, rng);
      const double size = evaluate_cost(g, a, space, {CostKind::size});
      CHECK(size == bits_oracle(g, a));
      CHECK(size == static_cast<double>(exact_weight_bits(g, a)));
      const double mpic = evaluate_cost(g, a, space, {CostKind::mpic, lut, std::nullopt});
      const double oracle = mpic_oracle(g, a, lut);
      CHECK(std::abs(mpic - oracle) <= 1e-9 * std::max(1.0, oracle));
    }
  }
}

TEST_CASE("costs are non-negative and multi-affine in each selector row") {
  const SearchSpace space;
  const auto g = build_toy_convnet({.width = 4, .separable_width = 6});
  const auto lut = full_lut(space, 3);
  const Index gsz = gamma_size(g, space);
  const Index dsz = static_cast<Index>(g.quantizable_layers().size()) * space.activations.size();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto gamma = random_array<double>(gsz, seed, -2, 2);
    const auto delta = random_array<double>(dsz, seed + 50, -2, 2);
    for (auto kind : {CostKind::size, CostKind::bitops, CostKind::mpic}) {
      const CostModel model{kind, lut, std::nullopt};
      auto eval = [&](const Eigen::ArrayXd& gm) {
        Tape<double> t;
        auto s = softmax_selectors<double>(t, g, space, gm, delta, false, false);
        return regularizer(t, g, s, space, model).item();
      };
      CHECK(eval(gamma) >= 0.0);
      // Replace one row of gamma_hat by a convex mix of two distributions:
      // the cost must mix in the same proportion.
      std::mt19937_64 rng(seed);
      const int k = static_cast<int>(rng() % static_cast<unsigned>(g.group_count()));
      const Index row = static_cast<Index>(rng() % static_cast<unsigned>(g.group_channels(k)));
      auto with_row = [&](const Eigen::ArrayXd& dist) {
        Tape<double> t;
        auto s = softmax_selectors<double>(t, g, space, gamma, delta, false, false);
        Eigen::ArrayXd m = s.gamma_hat[static_cast<std::size_t>(k)].value();
        m.segment(row * 4, 4) = dist;
        s.gamma_hat[static_cast<std::size_t>(k)] = t.constant(m, s.gamma_hat[static_cast<std::size_t>(k)].shape());
        return regularizer(t, g, s, space, model).item();
      };
      Eigen::ArrayXd r1 = random_array<double>(4, seed + 1, 0, 1), r2 = random_array<double>(4, seed + 2, 0, 1);
      r1 /= r1.sum();
      r2 /= r2.sum();
      const double mix = 0.3;
      const double lhs = with_row(mix * r1 + (1 - mix) * r2);
      const double rhs = mix * with_row(r1) + (1 - mix) * with_row(r2);
      CHECK(std::abs(lhs - rhs) <= 1e-10 * std::abs(rhs));
    }
  }
}

TEST_CASE("every cost is zero on a fully pruned network") {
  const SearchSpace space;
  const auto g = build_toy_convnet({});
  const auto none = Assignment::uniform(g, 0, 8);
  CHECK(evaluate_cost(g, none, space, {CostKind::size}) == 0.0);
  CHECK(evaluate_cost(g, none, space, {CostKind::bitops}) == 0.0);
  CHECK(evaluate_cost(g, none, space, {CostKind::mpic, full_lut(space, 2), std::nullopt}) == 0.0);
  SearchSpace ne16_space;
  ne16_space.activations = PrecisionSet::activations({8});
  CHECK(evaluate_cost(g, Assignment::uniform(g, 0, 8), ne16_space, {CostKind::ne16, std::nullopt, Ne16Params{}}) == 0.0);
}

namespace {

// Sampled selectors taken directly from flat value vectors (no sampling op),
// so the checks below isolate the cost ops.
template <typename Scalar>
SampledSelectors<Scalar> selectors_from(Tape<Scalar>& t, const NetworkGraph& g, const SearchSpace& space,
                                        const Var<Scalar>& gamma_hat, const Var<Scalar>& delta_hat) {
  SampledSelectors<Scalar> s;
  const Index pw = space.weights.size(), px = space.activations.size();
  Index off = 0;
  for (int k = 0; k < g.group_count(); ++k) {
    const Index rows = g.group_channels(k);
    s.gamma_hat.push_back(reshape(slice(gamma_hat, off, rows * pw), Shape{rows, pw}));
    off += rows * pw;
  }
  s.delta_hat.resize(static_cast<std::size_t>(g.size()));
  off = 0;
  for (int q : g.quantizable_layers()) {
    s.delta_hat[static_cast<std::size_t>(q)] = slice(delta_hat, off, px);
    off += px;
  }
  (void)t;
  return s;
}

}  // namespace

TEST_CASE("cost gradients pass finite-difference checks on 10 seeds") {
  const SearchSpace space;
  const auto g = build_toy_convnet({.width = 3, .separable_width = 4, .height = 6, .width_px = 6, .classes = 3});
  const auto lut = full_lut(space, 5);
  const Index gsz = gamma_size(g, space);
  const Index dsz = static_cast<Index>(g.quantizable_layers().size()) * space.activations.size();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto gamma_hat = random_array<double>(gsz, seed, 0.05, 1);
    const auto delta_hat = random_array<double>(dsz, seed + 100, 0.05, 1);
    for (auto kind : {CostKind::size, CostKind::bitops, CostKind::mpic, CostKind::ne16}) {
      const CostModel model{kind, lut, Ne16Params{}};
      ScalarFunction<double> by_gamma = [&](Tape<double>& t, Var<double> gm) {
        return regularizer(t, g, selectors_from(t, g, space, gm, t.constant(delta_hat, Shape{dsz})), space, model);
      };
      CHECK(check_gradient(by_gamma, gamma_hat, Shape{gsz}, 1e-4) < 1e-6);

      ScalarFunction<double> by_delta = [&](Tape<double>& t, Var<double> dv) {
        return regularizer(t, g, selectors_from(t, g, space, t.constant(gamma_hat, Shape{gsz}), dv), space, model);
      };
      CHECK(check_gradient(by_delta, delta_hat, Shape{dsz}, 1e-4) < 1e-6);

      ScalarFunction<float> by_gamma_f = [&](Tape<float>& t, Var<float> gm) {
        auto d = t.constant(delta_hat.cast<float>(), Shape{dsz});
        return regularizer(t, g, selectors_from(t, g, space, gm, d), space, model);
      };
      auto oracle = [&](const Eigen::ArrayXd& gm) {
        Tape<double> t;
        auto d = t.constant(Eigen::ArrayXd(delta_hat.cast<float>().cast<double>()), Shape{dsz});
        return regularizer(t, g, selectors_from(t, g, space, t.constant(gm, Shape{gsz}), d), space, model).item();
      };
      CHECK(check_gradient(by_gamma_f, Array<float>(gamma_hat.cast<float>()), Shape{gsz}, 1e-3, {}, oracle) < 1e-4);
    }
  }
}

TEST_CASE("cost gradients through softmax sampling of raw selectors") {
  const SearchSpace space;
  const auto g = build_toy_convnet({.width = 3, .separable_width = 4, .height = 6, .width_px = 6, .classes = 3});
  const Index gsz = gamma_size(g, space);
  const Index dsz = static_cast<Index>(g.quantizable_layers().size()) * space.activations.size();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto gamma = random_array<double>(gsz, seed, -1, 1);
    const auto delta = random_array<double>(dsz, seed + 100, -1, 1);
    for (auto kind : {CostKind::size, CostKind::ne16}) {
      const CostModel model{kind, std::nullopt, Ne16Params{}};
      // The linear term keeps every coordinate's gradient away from zero, where
      // the relative metric would only measure difference-quotient noise.
      ScalarFunction<double> f = [&](Tape<double>& t, Var<double> gm) {
        auto s = softmax_selectors<double>(t, g, space, gamma, delta, false, false);
        Index off = 0;
        for (int k = 0; k < g.group_count(); ++k) {
          const Index rows = g.group_channels(k);
          s.gamma_hat[static_cast<std::size_t>(k)] =
              sample_rows(reshape(slice(gm, off, rows * 4), Shape{rows, 4}), SamplingMethod::softmax, 1.0);
          off += rows * 4;
        }
        return regularizer(t, g, s, space, model) + sum(gm);
      };
      CHECK(check_gradient(f, gamma, Shape{gsz}, 1e-4) < 1e-6);
    }
  }
}

TEST_CASE("cycles to latency") {
  CHECK(std::abs(cycles_to_latency(5.953e6, {250e6}) * 1e3 - 23.81) <= 0.01);
  CHECK(std::abs(cycles_to_latency(155.241e3, {370e6}) * 1e3 - 0.42) <= 0.005);
  CHECK(cycles_to_latency(0, {250e6}) == 0.0);
  CHECK_THROWS_AS(cycles_to_latency(-1, {250e6}), Error);
  CHECK_THROWS_AS(cycles_to_latency(1, {0.0}), Error);
}

TEST_CASE("LUT loading") {
  SearchSpace space;
  space.weights = PrecisionSet::weights({0, 2, 4, 8});
  std::string full = "# comment\np_x,p_w,macs_per_cycle\n";
  for (int px : {2, 4, 8})
    for (int pw : {2, 4, 8}) full += std::to_string(px) + "," + std::to_string(pw) + ",3.5\n";
  std::istringstream ok(full);
  CHECK(CostLUT::parse(ok, space).at(4, 8) == 3.5);

  auto load_error = [&](const std::string& text) -> std::string {
    std::istringstream in(text);
    try {
      CostLUT::parse(in, space);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::load);
      return e.what();
    }
    return "";
  };
  std::string missing = full;
  missing.erase(missing.find("2,8,3.5\n"), 8);
  CHECK(load_error(missing) == "missing LUT entry (2,8)");
  std::string zero = full;
  zero.replace(zero.find("8,8,3.5"), 7, "8,8,0");
  CHECK(load_error(zero) == "non-positive LUT entry (8,8)");
  CHECK(load_error(full + "4,4\n").find("malformed") != std::string::npos);
  CHECK(load_error(full + "x,4,1\n").find("malformed") != std::string::npos);
  CHECK(load_error("p,q,r\n").find("header") != std::string::npos);
}

TEST_CASE("shipped illustrative LUT is complete") {
  const SearchSpace space;
  const auto lut = CostLUT::load(MIXPRUNE_SOURCE_DIR "/data/mpic_lut_illustrative.csv", space);
  CHECK(lut.entries().size() == 9);
  const auto hw = HardwareConfig::load(MIXPRUNE_SOURCE_DIR "/data/hardware.json");
  REQUIRE(hw.ne16);
  CHECK(hw.ne16->streamer_bits_per_cycle == 288);
  CHECK(hw.mpic->frequency_hz == 250e6);
}

TEST_CASE("NE16 model hand examples") {
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  const Ne16Params p;
  const auto g = single_conv(16, 32, 6);
  const auto c8 = ne16_breakdown(g, Assignment::uniform(g, 8, 8), space, p).at(0);
  const auto c4 = ne16_breakdown(g, Assignment::uniform(g, 4, 8), space, p).at(0);
  CHECK(c4.load == c8.load / 2);
  CHECK(c4.compute == c8.compute / 2);
  CHECK(c4.store == c8.store);
  CHECK_FALSE(c8.fallback);
  // 3x3 conv: 4 tiles, 1 output group, 1 input group, 32 cycles per bit.
  CHECK(c8.compute == 4 * 1 * 8 * 1 * 32.0);
  CHECK(c8.load == 32.0 * 8 * 16 * 9 / 288);
  CHECK(c8.store == 36.0 * 32 * 8 / 64);

  const auto g33 = single_conv(16, 33, 6), g64 = single_conv(16, 64, 6);
  CHECK(ne16_breakdown(g33, Assignment::uniform(g33, 8, 8), space, p).at(0).compute ==
        ne16_breakdown(g64, Assignment::uniform(g64, 8, 8), space, p).at(0).compute);
  CHECK(ne16_breakdown(g, Assignment::uniform(g, 0, 8), space, p).at(0).total() == 0.0);
}

TEST_CASE("NE16 tape cost agrees with the per-layer breakdown") {
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  std::mt19937_64 rng(11);
  const auto g = build_toy_convnet({.width = 40, .separable_width = 70, .height = 8, .width_px = 8});
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = random_assignment(g, space, rng);
    double total = 0;
    for (const auto& c : ne16_breakdown(g, a, space, Ne16Params{})) total += c.total();
    const double tape = evaluate_cost(g, a, space, {CostKind::ne16, std::nullopt, Ne16Params{}});
    CHECK(std::abs(tape - total) <= 1e-9 * total);
  }
}

TEST_CASE("NE16 discrete cost is invariant to channel permutations") {
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  std::mt19937_64 rng(12);
  const auto g = build_toy_convnet({.width = 36, .separable_width = 40, .height = 6, .width_px = 6});
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_assignment(g, space, rng);
    const double before = evaluate_cost(g, a, space, {CostKind::ne16, std::nullopt, Ne16Params{}});
    for (auto& bits : a.group_bits) std::shuffle(bits.begin(), bits.end(), rng);
    CHECK(evaluate_cost(g, a, space, {CostKind::ne16, std::nullopt, Ne16Params{}}) == before);
  }
}

TEST_CASE("NE16 components are monotone in channel bit-widths") {
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  std::mt19937_64 rng(13);
  const auto g = build_toy_convnet({.width = 34, .separable_width = 40, .height = 6, .width_px = 6});
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_assignment(g, space, rng);
    auto k = static_cast<std::size_t>(rng() % static_cast<unsigned>(g.group_count()));
    auto& bits = a.group_bits[k];
    const auto ch = static_cast<std::size_t>(rng() % bits.size());
    if (bits[ch] == 8) continue;
    const auto before = ne16_breakdown(g, a, space, Ne16Params{});
    bits[ch] = space.weights[space.weights.index_of(bits[ch]) + 1];
    const auto after = ne16_breakdown(g, a, space, Ne16Params{});
    for (std::size_t l = 0; l < before.size(); ++l) {
      CHECK(after[l].load >= before[l].load);
      CHECK(after[l].store >= before[l].store);
    }
  }
  // Raising every channel of a layer together never lowers its cycles.
  for (int b = 0; b + 1 < space.weights.size(); ++b) {
    const double lo = evaluate_cost(g, Assignment::uniform(g, space.weights[b], 8), space,
                                    {CostKind::ne16, std::nullopt, Ne16Params{}});
    const double hi = evaluate_cost(g, Assignment::uniform(g, space.weights[b + 1], 8), space,
                                    {CostKind::ne16, std::nullopt, Ne16Params{}});
    CHECK(hi >= lo);
  }
}

TEST_CASE("promoting one channel can free an NE16 channel group") {
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  const auto g = single_conv(32, 64, 9);
  Assignment a = Assignment::uniform(g, 8, 8);
  for (int i = 31; i < 64; ++i) a.group_bits[0][static_cast<std::size_t>(i)] = 4;
  const CostModel model{CostKind::ne16, std::nullopt, Ne16Params{}};
  const double before = evaluate_cost(g, a, space, model);
  a.group_bits[0][31] = 8;
  CHECK(evaluate_cost(g, a, space, model) < before);
}

TEST_CASE("smooth group count tracks the exact count at multiples of the group size") {
  Tape<double> t;
  Eigen::ArrayXd x(4);
  x << 0, 32, 64, 96;
  auto v = t.constant(x, Shape{4});
  const auto smooth = cost_detail::group_count(v, 32, GroupCounting::smooth, 0.1).value();
  const auto exact = cost_detail::group_count(v, 32, GroupCounting::exact, 0.1).value();
  CHECK((smooth - exact).abs().maxCoeff() < 1e-12);
}
