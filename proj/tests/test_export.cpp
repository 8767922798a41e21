#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "mixprune/error.hpp"
#include "mixprune/export.hpp"
#include "test_util.hpp"

using namespace mixprune;
using mixprune::testing::random_array;

namespace {

NetworkGraph toy(int width = 8) {
  ToyConfig c;
  c.width = width;
  c.height = 8;
  c.width_px = 8;
  return build_toy_convnet(c);
}

// Random assignment; prunable groups lose at least one channel when `prune`.
Assignment random_assignment(const NetworkGraph& g, const SearchSpace& space, std::mt19937_64& rng, bool prune) {
  Assignment a = Assignment::uniform(g, 8, 8);
  std::uniform_int_distribution<int> wpick(prune ? 0 : 1, space.weights.size() - 1);
  std::uniform_int_distribution<int> apick(0, space.activations.size() - 1);
  for (int k = 0; k < g.group_count(); ++k) {
    auto& bits = a.group_bits[static_cast<std::size_t>(k)];
    const bool out = g.is_output_group(k);
    for (auto& b : bits) b = out ? space.weights[std::max(1, wpick(rng))] : space.weights[wpick(rng)];
    if (prune && !out) {
      std::uniform_int_distribution<std::size_t> ch(0, bits.size() - 1);
      bits[ch(rng)] = 0;
      // keep at least one channel alive
      bits[(ch(rng) + 1) % bits.size()] = space.weights[space.weights.size() - 1];
    }
  }
  for (int q : g.quantizable_layers()) a.act_bits[static_cast<std::size_t>(q)] = space.activations[apick(rng)];
  return a;
}

SelectorState<float> random_clips(const NetworkGraph& g, const SearchSpace& space, std::uint64_t seed) {
  auto s = SelectorState<float>::init(g, space);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(1.0f, 3.0f);
  for (auto& c : s.clip) c = u(rng);
  return s;
}

Array<float> random_input(const NetworkGraph& g, Index batch, std::uint64_t seed) {
  const auto& in = g.layer(0);
  return random_array<float>(batch * in.c_out * in.h_out * in.w_out, seed, 0.0, 1.0);
}

double max_rel_err(const Array<double>& got, const Array<double>& ref) {
  return (got - ref).abs().maxCoeff() / std::max(ref.abs().maxCoeff(), 1e-12);
}

// One 3x3 conv with `channels` outputs on a 16x16 map, then a classifier.
NetworkGraph single_conv(int channels) {
  std::vector<LayerDecl> d;
  d.push_back({"conv", LayerKind::conv2d, {}, channels, 3, 1, 1});
  d.push_back({"relu", LayerKind::relu});
  d.push_back({"pool", LayerKind::pool});
  d.push_back({"flatten", LayerKind::flatten});
  d.push_back({"classifier", LayerKind::linear, {}, 4});
  return NetworkGraph::build({16, 16, 16}, d);
}

}  // namespace

TEST_CASE("reorder permutation is a stable descending sort") {
  CHECK(reorder_permutation({8, 2, 8, 4}) == std::vector<int>{0, 2, 3, 1});
  CHECK(reorder_permutation({4, 4, 4}) == std::vector<int>{0, 1, 2});
  CHECK(reorder_permutation({2, 8, 0, 8, 4, 2}) == std::vector<int>{1, 3, 4, 0, 5, 2});
  CHECK(reorder_permutation({}).empty());
}

TEST_CASE("ne16 refinement of a 31/33 split matches the exhaustive oracle") {
  const auto g = single_conv(64);
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  const Ne16Params p;
  const int conv = g.index_of("conv");
  auto a = Assignment::uniform(g, 8, 8);
  auto& bits = a.group_bits[static_cast<std::size_t>(g.group_of(conv))];
  for (std::size_t c = 31; c < 64; ++c) bits[c] = 4;

  // Oracle: every reachable composition (4-bit channels may go to 8 bits).
  double oracle = 1e300;
  int oracle_n8 = -1;
  for (int n8 = 31; n8 <= 64; ++n8) {
    auto t = a;
    auto& tb = t.group_bits[static_cast<std::size_t>(g.group_of(conv))];
    for (int c = 0; c < 64; ++c) tb[static_cast<std::size_t>(c)] = c < n8 ? 8 : 4;
    const double cyc = evaluate_cost(g, t, space, {CostKind::ne16, {}, p});
    if (cyc < oracle) oracle = cyc, oracle_n8 = n8;
  }
  REQUIRE(oracle_n8 == 32);

  const auto r = ne16_refine(g, a, space, p);
  const auto& rb = r.group_bits[static_cast<std::size_t>(g.group_of(conv))];
  CHECK(std::count(rb.begin(), rb.end(), 8) == 32);
  CHECK(std::count(rb.begin(), rb.end(), 4) == 32);
  CHECK(evaluate_cost(g, r, space, {CostKind::ne16, {}, p}) == Catch::Approx(oracle).epsilon(1e-12));

  // Already aligned: unchanged.
  CHECK(ne16_refine(g, r, space, p) == r);
}

TEST_CASE("ne16 refinement properties on random assignments") {
  const auto g = toy(20);
  SearchSpace space;
  space.activations = PrecisionSet::activations({8});
  const Ne16Params p;
  const CostModel model{CostKind::ne16, {}, p};
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_assignment(g, space, rng, trial % 2 == 0);
    const auto r = ne16_refine(g, a, space, p);
    CHECK(evaluate_cost(g, r, space, model) <= evaluate_cost(g, a, space, model));
    for (std::size_t k = 0; k < a.group_bits.size(); ++k)
      for (std::size_t c = 0; c < a.group_bits[k].size(); ++c) {
        CHECK(r.group_bits[k][c] >= a.group_bits[k][c]);
        if (a.group_bits[k][c] == 0) CHECK(r.group_bits[k][c] == 0);
      }
    CHECK(r.act_bits == a.act_bits);
    CHECK(ne16_refine(g, r, space, p) == r);
  }
}

TEST_CASE("quantized model reproduces fixed-mode forward") {
  const auto g = toy();
  const SearchSpace space;
  std::mt19937_64 rng(3);
  const auto a = random_assignment(g, space, rng, true);
  const auto params = Parameters<float>::init(g, 9);
  const auto sel = random_clips(g, space, 4);
  const auto qm = quantize_model(g, params, sel, a);

  const Index n = 8;
  const auto x = random_input(g, n, 21);
  Tape<double> t;
  const auto pd = params.cast<double>();
  auto b = bind_weights(t, g, pd, false);
  SelectorState<double> seld;
  seld.clip.assign(sel.clip.begin(), sel.clip.end());
  bind_clips(t, g, seld, false, b);
  const auto& in = g.layer(0);
  auto logits = forward(g, ForwardMode::fixed, b, space, t.constant(x.cast<double>(), {n, in.c_out, in.h_out, in.w_out}),
                        &a);
  CHECK(max_rel_err(run_quantized(qm, x, n), logits.value()) < 1e-6);
}

TEST_CASE("pruning and reordering preserve the masked network") {
  const SearchSpace space;
  const auto g = toy();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = random_assignment(g, space, rng, true);
    const auto params = Parameters<float>::init(g, 100 + static_cast<std::uint64_t>(trial));
    const auto sel = random_clips(g, space, 200 + static_cast<std::uint64_t>(trial));
    const auto masked = quantize_model(g, params, sel, a);
    const auto compact = prune_zero_channels(masked);
    Permutation perm;
    const auto ordered = reorder_channels(compact, &perm);
    const auto deploy = split_sublayers(ordered);

    // Compact graph lost exactly the 0-bit channels of every group.
    for (int k = 0; k < g.group_count(); ++k) {
      const auto& bits = a.group_bits[static_cast<std::size_t>(k)];
      const auto alive = std::count_if(bits.begin(), bits.end(), [](int v) { return v != 0; });
      CHECK(compact.graph.group_channels(k) == alive);
      CHECK(std::is_sorted(ordered.layers[static_cast<std::size_t>(g.group_members(k).front())].bits.rbegin(),
                           ordered.layers[static_cast<std::size_t>(g.group_members(k).front())].bits.rend()));
    }
    for (int q : g.quantizable_layers()) {
      const auto& l = ordered.layers[static_cast<std::size_t>(q)];
      std::vector<int> distinct(l.bits.begin(), l.bits.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      CHECK(deploy.layers[static_cast<std::size_t>(std::find(g.quantizable_layers().begin(),
                                                              g.quantizable_layers().end(), q) -
                                                    g.quantizable_layers().begin())]
                .sublayers.size() == distinct.size());
    }

    for (int s = 0; s < 100; s += 25) {
      const auto x = random_input(g, 25, 1000 + static_cast<std::uint64_t>(trial * 100 + s));
      const auto ref = run_quantized(masked, x, 25);
      CHECK(max_rel_err(run_quantized(compact, x, 25), ref) < 1e-6);
      CHECK(max_rel_err(run_quantized(ordered, x, 25), ref) < 1e-6);
      CHECK(max_rel_err(run_deploy(deploy, x, 25), ref) < 1e-6);
    }
  }
}

TEST_CASE("residual pruning removes the channel from both branches and the consumer") {
  const auto g = toy();
  const SearchSpace space;
  auto a = Assignment::uniform(g, 8, 8);
  const int stem = g.index_of("conv0"), branch = g.index_of("block1_conv_b");
  REQUIRE(g.group_of(stem) == g.group_of(branch));
  a.group_bits[static_cast<std::size_t>(g.group_of(stem))][3] = 0;
  const auto params = Parameters<float>::init(g, 1);
  const auto m = prune_zero_channels(quantize_model(g, params, random_clips(g, space, 2), a));
  CHECK(m.graph.layer(stem).c_out == 7);
  CHECK(m.graph.layer(branch).c_out == 7);
  CHECK(m.graph.layer(g.index_of("block1_conv_a")).c_in == 7);
  CHECK(m.graph.layer(g.index_of("sep_pw")).c_in == 7);

  // conv_a input slice 3 is gone: its remaining codes match the original minus that slice.
  const auto orig = quantize_model(g, params, random_clips(g, space, 2), a);
  const auto& before = orig.layers[static_cast<std::size_t>(g.index_of("block1_conv_a"))];
  const auto& after = m.layers[static_cast<std::size_t>(g.index_of("block1_conv_a"))];
  CHECK(after.codes.size() == before.codes.size() / 8 * 7);
  CHECK(std::equal(after.codes.begin(), after.codes.begin() + 27, before.codes.begin()));
  CHECK(std::equal(after.codes.begin() + 27, after.codes.begin() + 63, before.codes.begin() + 36));
}

TEST_CASE("no pruned channels leaves the graph unchanged") {
  const auto g = toy();
  const SearchSpace space;
  const auto a = Assignment::uniform(g, 4, 8);
  const auto m = quantize_model(g, Parameters<float>::init(g, 1), random_clips(g, space, 2), a);
  const auto p = prune_zero_channels(m);
  CHECK(p.graph.to_json() == g.to_json());
  for (std::size_t i = 0; i < m.layers.size(); ++i) CHECK(p.layers[i] == m.layers[i]);
  const auto r = reorder_channels(p);
  for (std::size_t i = 0; i < m.layers.size(); ++i) CHECK(r.layers[i] == m.layers[i]);
}

TEST_CASE("a fully pruned layer is a structural error") {
  const auto g = toy();
  const SearchSpace space;
  auto a = Assignment::uniform(g, 8, 8);
  auto& bits = a.group_bits[static_cast<std::size_t>(g.group_of(g.index_of("sep_pw")))];
  std::fill(bits.begin(), bits.end(), 0);
  const auto m = quantize_model(g, Parameters<float>::init(g, 1), random_clips(g, space, 2), a);
  try {
    prune_zero_channels(m);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate);
  }
}

TEST_CASE("code packing") {
  std::mt19937_64 rng(1);
  for (int bits = 2; bits <= 8; ++bits) {
    const int lim = (1 << (bits - 1)) - 1;
    std::uniform_int_distribution<int> u(-lim - 1, lim);
    std::vector<std::int32_t> codes(37);
    for (auto& c : codes) c = u(rng);
    const auto packed = pack_codes(codes, bits);
    CHECK(packed.size() == (37 * static_cast<std::size_t>(bits) + 7) / 8);
    CHECK(unpack_codes(packed.data(), codes.size(), bits) == codes);
  }
  // 4-bit -1, 3 -> 0x3F; 2-bit {1, -2, 0} -> 0b001001 = 0x09 with zero padding
  CHECK(pack_codes({-1, 3}, 4) == std::vector<std::uint8_t>{0x3F});
  CHECK(pack_codes({1, -2, 0}, 2) == std::vector<std::uint8_t>{0x09});
  CHECK_THROWS_AS(pack_codes({8}, 4), Error);
}

TEST_CASE("deploy file round trip and integrity") {
  const auto g = toy();
  const SearchSpace space;
  std::mt19937_64 rng(8);
  const auto a = random_assignment(g, space, rng, true);
  const auto d = build_deploy_model(g, Parameters<float>::init(g, 3), random_clips(g, space, 3), a);
  const auto bytes = serialize(d);
  CHECK(deserialize(bytes) == d);
  CHECK(serialize(deserialize(bytes)) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "mixprune_test_model.mxpr";
  save_deploy(d, path);
  CHECK(load_deploy(path) == d);
  std::filesystem::remove(path);

  auto expect_load_error = [](std::vector<std::uint8_t> b) {
    try {
      deserialize(b);
      FAIL("expected a load error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::load);
    }
  };
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  expect_load_error(flipped);
  auto bad_crc = bytes;
  bad_crc.back() ^= 0xFF;
  expect_load_error(bad_crc);
  expect_load_error(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 9));
  auto bad_version = bytes;
  bad_version[4] = 9;
  expect_load_error(bad_version);
  auto bad_magic = bytes;
  bad_magic[0] = 'Z';
  expect_load_error(bad_magic);
}

TEST_CASE("all-8-bit deploy file is one byte per weight plus overhead") {
  const auto g = toy();
  const SearchSpace space;
  const auto a = Assignment::uniform(g, 8, 8);
  const auto d = build_deploy_model(g, Parameters<float>::init(g, 3), random_clips(g, space, 3), a);
  const auto bytes = serialize(d);
  std::uint32_t manifest_len;
  std::memcpy(&manifest_len, bytes.data() + 6, 4);
  std::int64_t weights = 0, channels = 0;
  for (int q : g.quantizable_layers()) {
    weights += g.layer(q).weight_count();
    channels += g.layer(q).c_out;
  }
  REQUIRE(weights == 1560);
  // header + manifest + codes + (range, bias) per channel + crc
  CHECK(static_cast<std::int64_t>(bytes.size()) == 10 + manifest_len + weights + 8 * channels + 4);
}

TEST_CASE("cost report") {
  CHECK(cycles_to_latency(5.953e6, HwClock{250e6}) * 1e3 == Catch::Approx(23.81).margin(0.01));
  CHECK(cycles_to_latency(155.241e3, HwClock{370e6}) * 1e3 == Catch::Approx(0.42).margin(0.005));

  const auto g = toy();
  const SearchSpace space;
  const HardwareConfig none;
  const auto r8 = cost_report(g, Assignment::uniform(g, 8, 8), space, std::nullopt, none);
  const auto r4 = cost_report(g, Assignment::uniform(g, 4, 8), space, std::nullopt, none);
  const auto r2 = cost_report(g, Assignment::uniform(g, 2, 8), space, std::nullopt, none);
  CHECK(r8.weight_bits == 1560 * 8);
  CHECK(r8.size_bytes == 1560);
  CHECK(r8.size_bytes == 2 * r4.size_bytes);
  CHECK(r4.size_bytes == 2 * r2.size_bytes);
  CHECK_FALSE(r8.ne16_cycles);
  CHECK_FALSE(r8.mpic_cycles);
  CHECK(r8.notes.size() == 2);
  CHECK_FALSE(r8.to_json().contains("ne16_cycles"));

  HardwareConfig hw;
  hw.ne16 = Ne16Params{};
  hw.mpic = HwClock{250e6};
  CostLUT lut;
  for (int px : space.activations.bits())
    for (int pw : space.weights.bits())
      if (pw) lut.set(px, pw, 1.0);
  const auto full = cost_report(g, Assignment::uniform(g, 8, 8), space, lut, hw);
  REQUIRE(full.ne16_cycles);
  REQUIRE(full.mpic_cycles);
  CHECK(*full.ne16_latency_s == Catch::Approx(*full.ne16_cycles / 370e6));
  CHECK(*full.mpic_latency_s == Catch::Approx(*full.mpic_cycles / 250e6));
  CHECK(full.notes.empty());
  CHECK(full.to_text().find("ne16 cycles") != std::string::npos);

  auto dead = Assignment::uniform(g, 8, 8);
  for (int k = 0; k < g.group_count(); ++k)
    if (!g.is_output_group(k)) std::fill(dead.group_bits[static_cast<std::size_t>(k)].begin(),
                                         dead.group_bits[static_cast<std::size_t>(k)].end(), 0);
  const auto rd = cost_report(g, dead, space, std::nullopt, hw);
  CHECK(rd.degenerate);
}
