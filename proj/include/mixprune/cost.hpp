#pragma once

// Differentiable cost regularizers over sampled selectors, plus their
// deterministic evaluation at a discrete assignment.
//
// Per quantizable layer n with selector group g:
//   n_p      = sum_i gamma_hat_g[i, p]          expected channels at precision p
//   cin_eff  = C - sum_i gamma_hat_in[i, 0]     expected surviving input channels
//   M(px,pw) = Kx Ky H W cin_eff delta_hat[px] n_pw
// Depthwise layers read one input channel per filter, so cin_eff = 1 there;
// their pruning is carried by the selectors they share with their producer.

#include <cmath>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mixprune/autodiff.hpp"
#include "mixprune/graph.hpp"
#include "mixprune/network.hpp"
#include "mixprune/ops.hpp"

namespace mixprune {

enum class CostKind { size, bitops, mpic, ne16 };

const char* to_string(CostKind k);
CostKind parse_cost_kind(const std::string& s);

/// MACs-per-cycle table indexed by (activation bits, weight bits).
class CostLUT {
 public:
  CostLUT() = default;

  /// Parses `p_x,p_w,macs_per_cycle` CSV and checks completeness over
  /// P_X x (P_W \ {0}). Lines starting with '#' are comments.
  static CostLUT parse(std::istream& in, const SearchSpace& space);
  static CostLUT load(const std::string& path, const SearchSpace& space);

  double at(int px, int pw) const;
  void set(int px, int pw, double macs_per_cycle) { table_[{px, pw}] = macs_per_cycle; }
  const std::map<std::pair<int, int>, double>& entries() const { return table_; }

 private:
  std::map<std::pair<int, int>, double> table_;
};

struct HwClock {
  double frequency_hz = 250e6;
};

struct Ne16Params {
  double streamer_bits_per_cycle = 288.0;
  double store_bits_per_cycle = 64.0;
  int pe_rows = 3;
  int pe_cols = 3;
  int pe_macs = 3 * 3 * 32;  // parallel MACs per PE per weight bit
  int channel_group = 32;
  int act_bits = 8;
  double smooth_c = 0.1;      // amplitude of the smooth channel-group overestimate
  double frequency_hz = 370e6;

  void validate() const;
};

struct HardwareConfig {
  std::optional<HwClock> mpic;
  std::optional<double> mpic_power_w;
  std::optional<Ne16Params> ne16;
  std::optional<double> ne16_power_w;

  static HardwareConfig parse(const nlohmann::json& j);
  static HardwareConfig load(const std::string& path);
};

inline double cycles_to_latency(double cycles, const HwClock& clock) {
  if (cycles < 0) fail(ErrorKind::contract, "cycles must be non-negative");
  if (!(clock.frequency_hz > 0)) fail(ErrorKind::config, "clock frequency must be positive");
  return cycles / clock.frequency_hz;
}

/// Everything a regularizer needs besides the selectors.
struct CostModel {
  CostKind kind = CostKind::size;
  std::optional<CostLUT> lut;
  std::optional<Ne16Params> ne16;
};

enum class GroupCounting { smooth, exact };

// ---------------------------------------------------------------------------

namespace cost_detail {

template <typename Scalar>
Array<Scalar> bits_vector(const PrecisionSet& set) {
  Array<Scalar> v(set.size());
  for (int i = 0; i < set.size(); ++i) v(i) = static_cast<Scalar>(set[i]);
  return v;
}

/// Channel groups occupied by x channels: ceil(x / group) when exact,
/// x / group + c (1 - cos(2 pi x / group)) when smooth.
template <typename Scalar>
Var<Scalar> group_count(const Var<Scalar>& x, int group, GroupCounting mode, double c) {
  const Scalar gsz = static_cast<Scalar>(group);
  const Scalar w = static_cast<Scalar>(2.0 * M_PI) / gsz;
  Array<Scalar> out(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar v = x.value()(i);
    out(i) = mode == GroupCounting::exact ? std::ceil(v / gsz - Scalar(1e-9))
                                          : v / gsz + static_cast<Scalar>(c) * (Scalar(1) - std::cos(w * v));
  }
  return x.tape->record(std::move(out), x.shape(), {x},
                        [xid = x.id, gsz, w, c, mode](Tape<Scalar>& t, std::size_t self) {
                          auto* g = t.grad_target(xid);
                          if (!g || mode == GroupCounting::exact) return;
                          const auto& xv = t.value(xid);
                          *g += t.grad(self) * (Scalar(1) / gsz + static_cast<Scalar>(c) * w * (w * xv).sin());
                        });
}

}  // namespace cost_detail

/// Expected number of surviving input channels of quantizable layer `layer`,
/// times the features per channel (H*W after a flatten).
template <typename Scalar>
Var<Scalar> effective_input_channels(Tape<Scalar>& tape, const NetworkGraph& g, int layer,
                                     const std::vector<Var<Scalar>>& gamma_hat, const SearchSpace& space) {
  const auto& s = g.layer(layer);
  if (s.kind == LayerKind::depthwise2d) return tape.scalar_constant(Scalar(1));
  const int ig = g.input_group(layer);
  if (ig < 0 || space.weights[0] != 0) return tape.scalar_constant(static_cast<Scalar>(s.c_in));
  const Scalar stride = static_cast<Scalar>(g.input_channel_stride(layer));
  const Scalar channels = static_cast<Scalar>(g.group_channels(ig));
  auto pruned = sum(column(gamma_hat[static_cast<std::size_t>(ig)], 0));
  return scale(add_scalar(scale(pruned, Scalar(-1)), channels), stride);
}

/// Expected channels per weight precision, [|P_W|].
template <typename Scalar>
Var<Scalar> precision_counts(const NetworkGraph& g, int layer, const std::vector<Var<Scalar>>& gamma_hat) {
  return col_sums(gamma_hat[static_cast<std::size_t>(g.group_of(layer))]);
}

/// Expected weight bits: sum_n cin_eff Kx Ky sum_i sum_p gamma_hat[i, p] p.
template <typename Scalar>
Var<Scalar> size_cost(Tape<Scalar>& tape, const NetworkGraph& g, const std::vector<Var<Scalar>>& gamma_hat,
                      const SearchSpace& space) {
  const Array<Scalar> bits = cost_detail::bits_vector<Scalar>(space.weights);
  std::vector<Var<Scalar>> terms{tape.scalar_constant(Scalar(0))};
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    auto cin = effective_input_channels(tape, g, q, gamma_hat, space);
    auto bit_sum = dot_const(precision_counts(g, q, gamma_hat), bits);
    terms.push_back(scale(cin * bit_sum, static_cast<Scalar>(s.k_x * s.k_y)));
  }
  return add_n(terms);
}

/// Expected bitops: sum_n sum_{px,pw} M(px, pw) px pw.
template <typename Scalar>
Var<Scalar> bitops_cost(Tape<Scalar>& tape, const NetworkGraph& g, const std::vector<Var<Scalar>>& delta_hat,
                        const std::vector<Var<Scalar>>& gamma_hat, const SearchSpace& space) {
  const Array<Scalar> wbits = cost_detail::bits_vector<Scalar>(space.weights);
  const Array<Scalar> abits = cost_detail::bits_vector<Scalar>(space.activations);
  std::vector<Var<Scalar>> terms{tape.scalar_constant(Scalar(0))};
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    const Scalar geometry = static_cast<Scalar>(s.k_x * s.k_y * s.h_out * s.w_out);
    auto cin = effective_input_channels(tape, g, q, gamma_hat, space);
    auto w = dot_const(precision_counts(g, q, gamma_hat), wbits);
    auto a = dot_const(delta_hat[static_cast<std::size_t>(q)], abits);
    terms.push_back(scale(cin * a * w, geometry));
  }
  return add_n(terms);
}

/// Expected MPIC cycles: sum_n sum_px sum_{pw != 0} M(px, pw) / LUT(px, pw).
template <typename Scalar>
Var<Scalar> mpic_cost(Tape<Scalar>& tape, const NetworkGraph& g, const std::vector<Var<Scalar>>& delta_hat,
                      const std::vector<Var<Scalar>>& gamma_hat, const SearchSpace& space, const CostLUT& lut) {
  const auto& pw = space.weights;
  const auto& px = space.activations;
  std::vector<Var<Scalar>> terms{tape.scalar_constant(Scalar(0))};
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    const Scalar geometry = static_cast<Scalar>(s.k_x * s.k_y * s.h_out * s.w_out);
    auto cin = effective_input_channels(tape, g, q, gamma_hat, space);
    auto counts = precision_counts(g, q, gamma_hat);
    std::vector<Var<Scalar>> per_px;
    for (int a = 0; a < px.size(); ++a) {
      Array<Scalar> inv(pw.size());
      for (int w = 0; w < pw.size(); ++w) inv(w) = pw[w] == 0 ? Scalar(0) : static_cast<Scalar>(1.0 / lut.at(px[a], pw[w]));
      per_px.push_back(element(delta_hat[static_cast<std::size_t>(q)], a) * dot_const(counts, inv));
    }
    terms.push_back(scale(cin * add_n(per_px), geometry));
  }
  return add_n(terms);
}

/// NE16 execution mode of a layer, or nullopt when the accelerator cannot run it.
inline std::optional<double> ne16_ops_per_group(const LayerSpec& s, const Ne16Params& p) {
  const bool k3 = s.k_x == 3 && s.k_y == 3;
  const bool k1 = s.k_x == 1 && s.k_y == 1;
  const double pe_parallel = static_cast<double>(p.pe_macs);
  switch (s.kind) {
    case LayerKind::conv2d:
    case LayerKind::pointwise:
    case LayerKind::linear:
      if (!k3 && !k1) return std::nullopt;
      return std::ceil(s.k_x * s.k_y * double(p.channel_group) * p.channel_group / pe_parallel);
    case LayerKind::depthwise2d:
      if (!k3) return std::nullopt;
      return std::ceil(s.k_x * s.k_y * double(p.channel_group) / pe_parallel);
    default:
      return std::nullopt;
  }
}

/// Expected NE16 cycles, summing three serial components per layer:
///   load    = sum_p n_p p * cin_eff Kx Ky / streamer_bw
///   compute = tiles * sum_p G(n_p) p * G(cin_eff) * ops_per_group
///   store   = H W (sum_{p != 0} n_p) act_bits / store_bw
/// with tiles = ceil(H / pe_rows) ceil(W / pe_cols) and G the channel-group
/// count (smooth during search, ceil when evaluating a discrete assignment).
/// Layers NE16 cannot run fall back to one full MAC per cycle and are
/// reported through `fallback_layers`.
template <typename Scalar>
Var<Scalar> ne16_cost(Tape<Scalar>& tape, const NetworkGraph& g, const std::vector<Var<Scalar>>& gamma_hat,
                      const SearchSpace& space, const Ne16Params& p, GroupCounting mode,
                      std::vector<std::string>* fallback_layers = nullptr) {
  p.validate();
  const auto& pw = space.weights;
  Array<Scalar> bits = cost_detail::bits_vector<Scalar>(pw);
  Array<Scalar> nonzero(pw.size());
  for (int w = 0; w < pw.size(); ++w) nonzero(w) = pw[w] == 0 ? Scalar(0) : Scalar(1);
  std::vector<Var<Scalar>> terms{tape.scalar_constant(Scalar(0))};
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    auto cin = effective_input_channels(tape, g, q, gamma_hat, space);
    auto counts = precision_counts(g, q, gamma_hat);
    const auto ops = ne16_ops_per_group(s, p);
    if (!ops) {
      if (fallback_layers) fallback_layers->push_back(s.name);
      const Scalar geometry = static_cast<Scalar>(s.k_x * s.k_y * s.h_out * s.w_out);
      terms.push_back(scale(cin * dot_const(counts, nonzero), geometry));
      continue;
    }
    const Scalar kk = static_cast<Scalar>(s.k_x * s.k_y);
    auto load = scale(cin * dot_const(counts, bits), kk / static_cast<Scalar>(p.streamer_bits_per_cycle));

    const Scalar tiles = static_cast<Scalar>(std::ceil(double(s.h_out) / p.pe_rows) * std::ceil(double(s.w_out) / p.pe_cols));
    auto out_groups = dot_const(cost_detail::group_count(counts, p.channel_group, mode, p.smooth_c), bits);
    Var<Scalar> compute = scale(out_groups, tiles * static_cast<Scalar>(*ops));
    if (s.kind != LayerKind::depthwise2d)
      compute = compute * cost_detail::group_count(cin, p.channel_group, mode, p.smooth_c);

    const Scalar px = static_cast<Scalar>(s.h_out * s.w_out * p.act_bits) / static_cast<Scalar>(p.store_bits_per_cycle);
    auto store = scale(dot_const(counts, nonzero), px);
    terms.push_back(load + compute + store);
  }
  return add_n(terms);
}

/// Sampled selector variables for a whole network.
template <typename Scalar>
struct SampledSelectors {
  std::vector<Var<Scalar>> gamma_hat;  // per group
  std::vector<Var<Scalar>> delta_hat;  // per layer
};

/// One-hot selector constants reproducing a discrete assignment.
template <typename Scalar>
SampledSelectors<Scalar> one_hot_selectors(Tape<Scalar>& tape, const NetworkGraph& g, const Assignment& a,
                                           const SearchSpace& space) {
  SampledSelectors<Scalar> s;
  for (int k = 0; k < g.group_count(); ++k) {
    const auto& bits = a.group_bits.at(static_cast<std::size_t>(k));
    const Index rows = static_cast<Index>(bits.size()), cols = space.weights.size();
    Array<Scalar> m = Array<Scalar>::Zero(rows * cols);
    for (Index r = 0; r < rows; ++r) {
      const int idx = space.weights.index_of(bits[static_cast<std::size_t>(r)]);
      if (idx < 0) fail(ErrorKind::contract, "assignment bit-width outside the weight precision set");
      m(r * cols + idx) = Scalar(1);
    }
    s.gamma_hat.push_back(tape.constant(std::move(m), Shape{rows, cols}));
  }
  s.delta_hat.resize(static_cast<std::size_t>(g.size()));
  for (int q : g.quantizable_layers()) {
    Array<Scalar> v = Array<Scalar>::Zero(space.activations.size());
    const int idx = space.activations.index_of(a.act_bits[static_cast<std::size_t>(q)]);
    if (idx < 0) fail(ErrorKind::contract, "assignment activation bit-width outside the activation set");
    v(idx) = Scalar(1);
    s.delta_hat[static_cast<std::size_t>(q)] = tape.constant(std::move(v), Shape{space.activations.size()});
  }
  return s;
}

/// Regularizer selected by `model` over sampled selectors.
template <typename Scalar>
Var<Scalar> regularizer(Tape<Scalar>& tape, const NetworkGraph& g, const SampledSelectors<Scalar>& s,
                        const SearchSpace& space, const CostModel& model, GroupCounting mode = GroupCounting::smooth) {
  switch (model.kind) {
    case CostKind::size:
      return size_cost(tape, g, s.gamma_hat, space);
    case CostKind::bitops:
      return bitops_cost(tape, g, s.delta_hat, s.gamma_hat, space);
    case CostKind::mpic:
      if (!model.lut) fail(ErrorKind::config, "the mpic cost model needs a LUT");
      return mpic_cost(tape, g, s.delta_hat, s.gamma_hat, space, *model.lut);
    case CostKind::ne16:
      if (!model.ne16) fail(ErrorKind::config, "the ne16 cost model needs hardware parameters");
      return ne16_cost(tape, g, s.gamma_hat, space, *model.ne16, mode);
  }
  fail(ErrorKind::config, "unknown cost model");
}

/// Network-size constant the regularizer is divided by inside the training
/// loss: the weight count for size (giving mean bits per weight) and the
/// full-precision MAC count for bitops, mpic and ne16.
double cost_unit(const NetworkGraph& g, CostKind kind);

/// Deterministic cost of a discrete assignment (NE16 uses exact ceil).
double evaluate_cost(const NetworkGraph& g, const Assignment& a, const SearchSpace& space, const CostModel& model);

/// Per-layer NE16 cycles of a discrete assignment, component by component.
struct Ne16LayerCycles {
  std::string layer;
  double load = 0, compute = 0, store = 0;
  bool fallback = false;  // NE16 cannot run the layer; compute holds the 1 MAC/cycle estimate
  double total() const { return load + compute + store; }
};

std::vector<Ne16LayerCycles> ne16_breakdown(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                                            const Ne16Params& p);

/// Exact weight bits of a discrete assignment, counted channel by channel.
std::int64_t exact_weight_bits(const NetworkGraph& g, const Assignment& a);

}  // namespace mixprune
