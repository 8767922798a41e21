#pragma once

// Parameters, selector state and the differentiable forward pass of a
// NetworkGraph in its three training modes.

#include <cmath>
#include <map>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixprune/autodiff.hpp"
#include "mixprune/graph.hpp"
#include "mixprune/mps.hpp"
#include "mixprune/ops.hpp"
#include "mixprune/quant.hpp"

namespace mixprune {

/// Raw selector value that keeps a precision out of reach of every sampler.
inline constexpr double kMaskedSelector = -1e4;

inline Shape weight_shape(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv2d:
    case LayerKind::pointwise:
      return {s.c_out, s.c_in, s.k_y, s.k_x};
    case LayerKind::depthwise2d:
      return {s.c_out, 1, s.k_y, s.k_x};
    case LayerKind::linear:
      return {s.c_out, s.c_in};
    default:
      return {};
  }
}

template <typename Scalar>
struct LayerWeights {
  Array<Scalar> weight;
  Shape shape;
  Array<Scalar> bias;
};

template <typename Scalar>
struct BatchNormParams {
  Array<Scalar> gamma, beta, mean, var;
};

/// Real-valued network parameters, indexed by graph layer.
template <typename Scalar>
struct Parameters {
  std::vector<LayerWeights<Scalar>> layers;
  std::vector<BatchNormParams<Scalar>> batchnorm;

  /// He-normal weights, zero biases, identity batch-norm statistics.
  static Parameters init(const NetworkGraph& graph, std::uint64_t seed) {
    Parameters p;
    p.layers.resize(static_cast<std::size_t>(graph.size()));
    p.batchnorm.resize(static_cast<std::size_t>(graph.size()));
    std::mt19937_64 rng(seed);
    for (int i = 0; i < graph.size(); ++i) {
      const auto& s = graph.layer(i);
      if (s.quantizable()) {
        auto& lw = p.layers[static_cast<std::size_t>(i)];
        lw.shape = weight_shape(s);
        const Index fan_in = numel(lw.shape) / s.c_out;
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        lw.weight.resize(numel(lw.shape));
        for (Index k = 0; k < lw.weight.size(); ++k) lw.weight(k) = static_cast<Scalar>(normal(rng));
        lw.bias = Array<Scalar>::Zero(s.c_out);
      } else if (s.kind == LayerKind::batchnorm) {
        auto& bn = p.batchnorm[static_cast<std::size_t>(i)];
        bn.gamma = Array<Scalar>::Ones(s.c_out);
        bn.beta = Array<Scalar>::Zero(s.c_out);
        bn.mean = Array<Scalar>::Zero(s.c_out);
        bn.var = Array<Scalar>::Ones(s.c_out);
      }
    }
    return p;
  }

  template <typename Other>
  Parameters<Other> cast() const {
    Parameters<Other> out;
    for (const auto& l : layers)
      out.layers.push_back({l.weight.template cast<Other>(), l.shape, l.bias.template cast<Other>()});
    for (const auto& b : batchnorm)
      out.batchnorm.push_back({b.gamma.template cast<Other>(), b.beta.template cast<Other>(),
                               b.mean.template cast<Other>(), b.var.template cast<Other>()});
    return out;
  }
};

/// Discrete precision assignment. Weight bit-widths are stored per selector
/// group, so all members of a group agree by construction.
struct Assignment {
  std::vector<std::vector<int>> group_bits;  // [group][channel]
  std::vector<int> act_bits;                 // [layer], 0 for non-quantizable layers

  const std::vector<int>& channel_bits(const NetworkGraph& g, int layer) const {
    return group_bits.at(static_cast<std::size_t>(g.group_of(layer)));
  }

  static Assignment uniform(const NetworkGraph& g, int weight_bits, int act_bits) {
    Assignment a;
    for (int k = 0; k < g.group_count(); ++k)
      a.group_bits.emplace_back(static_cast<std::size_t>(g.group_channels(k)), weight_bits);
    a.act_bits.assign(static_cast<std::size_t>(g.size()), 0);
    for (int q : g.quantizable_layers()) a.act_bits[static_cast<std::size_t>(q)] = act_bits;
    return a;
  }

  /// Index of a quantizable layer whose channels are all pruned, or -1.
  int fully_pruned_layer(const NetworkGraph& g) const {
    for (int q : g.quantizable_layers()) {
      const auto& bits = channel_bits(g, q);
      if (std::all_of(bits.begin(), bits.end(), [](int b) { return b == 0; })) return q;
    }
    return -1;
  }

  bool operator==(const Assignment&) const = default;

  nlohmann::json to_json(const NetworkGraph& g) const {
    nlohmann::json layers = nlohmann::json::object();
    for (int q : g.quantizable_layers())
      layers[g.layer(q).name] = {{"weight_bits", channel_bits(g, q)},
                                 {"act_bits", act_bits[static_cast<std::size_t>(q)]}};
    return layers;
  }

  static Assignment from_json(const NetworkGraph& g, const nlohmann::json& j) {
    Assignment a;
    a.group_bits.assign(static_cast<std::size_t>(g.group_count()), {});
    a.act_bits.assign(static_cast<std::size_t>(g.size()), 0);
    std::vector<bool> seen(static_cast<std::size_t>(g.group_count()), false);
    for (int q : g.quantizable_layers()) {
      const auto& name = g.layer(q).name;
      if (!j.contains(name)) fail(ErrorKind::load, "assignment missing layer '" + name + "'");
      auto bits = j.at(name).at("weight_bits").get<std::vector<int>>();
      if (static_cast<int>(bits.size()) != g.layer(q).c_out)
        fail(ErrorKind::load, "assignment for '" + name + "' has the wrong channel count");
      const auto gi = static_cast<std::size_t>(g.group_of(q));
      if (seen[gi] && a.group_bits[gi] != bits)
        fail(ErrorKind::load, "assignment for '" + name + "' disagrees with its selector group");
      a.group_bits[gi] = std::move(bits);
      seen[gi] = true;
      a.act_bits[static_cast<std::size_t>(q)] = j.at(name).at("act_bits").get<int>();
    }
    return a;
  }
};

/// Candidate precision sets used by the search.
struct SearchSpace {
  PrecisionSet weights = PrecisionSet::weights({0, 2, 4, 8});
  PrecisionSet activations = PrecisionSet::activations({2, 4, 8});
};

/// Raw selectors and PACT clip values.
template <typename Scalar>
struct SelectorState {
  std::vector<RowMatrix<Scalar>> gamma;  // per group, [C_out, |P_W|]
  std::vector<Array<Scalar>> delta;      // per layer, [|P_X|] (empty if not quantizable)
  std::vector<Scalar> clip;              // per layer

  static SelectorState init(const NetworkGraph& g, const SearchSpace& space) {
    SelectorState s;
    for (int k = 0; k < g.group_count(); ++k) {
      auto m = init_selector_matrix<Scalar>(space.weights, g.group_channels(k));
      if (g.is_output_group(k) && space.weights[0] == 0) m.col(0).setConstant(static_cast<Scalar>(kMaskedSelector));
      s.gamma.push_back(std::move(m));
    }
    s.delta.resize(static_cast<std::size_t>(g.size()));
    s.clip.assign(static_cast<std::size_t>(g.size()), static_cast<Scalar>(kDefaultClip));
    const Eigen::ArrayXd row = init_selectors(space.activations);
    for (int q : g.quantizable_layers()) s.delta[static_cast<std::size_t>(q)] = row.cast<Scalar>();
    return s;
  }

  /// Argmax discretization of every selector (ties -> higher precision).
  Assignment discretize(const NetworkGraph& g, const SearchSpace& space) const {
    Assignment a;
    for (const auto& m : gamma) a.group_bits.push_back(discretize_rows<Scalar>(m, space.weights));
    a.act_bits.assign(static_cast<std::size_t>(g.size()), 0);
    for (int q : g.quantizable_layers())
      a.act_bits[static_cast<std::size_t>(q)] =
          space.activations[static_cast<int>(argmax_prefer_last(delta[static_cast<std::size_t>(q)]))];
    return a;
  }
};

enum class ForwardMode { floating, search, fixed };

/// Tape variables feeding one forward pass.
template <typename Scalar>
struct Bindings {
  std::vector<Var<Scalar>> weight;     // per layer
  std::vector<Var<Scalar>> bias;       // per layer
  std::vector<Var<Scalar>> gamma_hat;  // per group, search mode
  std::vector<Var<Scalar>> delta_hat;  // per layer, search mode
  std::vector<Var<Scalar>> clip;       // per layer, search + fixed modes
};

template <typename Scalar>
Bindings<Scalar> bind_weights(Tape<Scalar>& tape, const NetworkGraph& g, const Parameters<Scalar>& p,
                              bool trainable) {
  Bindings<Scalar> b;
  b.weight.resize(static_cast<std::size_t>(g.size()));
  b.bias.resize(static_cast<std::size_t>(g.size()));
  for (int q : g.quantizable_layers()) {
    const auto& lw = p.layers[static_cast<std::size_t>(q)];
    const Shape bias_shape{static_cast<Index>(lw.bias.size())};
    b.weight[static_cast<std::size_t>(q)] =
        trainable ? tape.variable(lw.weight, lw.shape) : tape.constant(lw.weight, lw.shape);
    b.bias[static_cast<std::size_t>(q)] =
        trainable ? tape.variable(lw.bias, bias_shape) : tape.constant(lw.bias, bias_shape);
  }
  return b;
}

/// Binds clip values of every quantizable layer.
template <typename Scalar>
void bind_clips(Tape<Scalar>& tape, const NetworkGraph& g, const SelectorState<Scalar>& s, bool trainable,
                Bindings<Scalar>& b) {
  b.clip.resize(static_cast<std::size_t>(g.size()));
  for (int q : g.quantizable_layers()) {
    Array<Scalar> c(1);
    c(0) = s.clip[static_cast<std::size_t>(q)];
    b.clip[static_cast<std::size_t>(q)] = trainable ? tape.variable(c, Shape{}) : tape.constant(c, Shape{});
  }
}

/// Inference-mode batch norm over the channel axis (no parameter gradients).
template <typename Scalar>
Var<Scalar> batchnorm_inference(const Var<Scalar>& x, const BatchNormParams<Scalar>& bn, double eps) {
  const Index n = x.shape()[0], c = x.shape()[1];
  const Index inner = x.size() / (n * c);
  Array<Scalar> scale = bn.gamma / (bn.var + static_cast<Scalar>(eps)).sqrt();
  Array<Scalar> out(x.size());
  for (Index b = 0; b < n; ++b)
    for (Index k = 0; k < c; ++k)
      out.segment((b * c + k) * inner, inner) =
          (x.value().segment((b * c + k) * inner, inner) - bn.mean(k)) * scale(k) + bn.beta(k);
  return x.tape->record(std::move(out), x.shape(), {x},
                        [xid = x.id, scale, n, c, inner](Tape<Scalar>& t, std::size_t self) {
                          auto* g = t.grad_target(xid);
                          if (!g) return;
                          const auto& up = t.grad(self);
                          for (Index b = 0; b < n; ++b)
                            for (Index k = 0; k < c; ++k)
                              g->segment((b * c + k) * inner, inner) += up.segment((b * c + k) * inner, inner) * scale(k);
                        });
}

/// Applies the layer operation to prepared (effective) input, weight and bias.
template <typename Scalar>
Var<Scalar> apply_layer(const LayerSpec& s, const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  switch (s.kind) {
    case LayerKind::conv2d:
    case LayerKind::pointwise:
      return conv2d(x, w, b, s.stride, s.padding);
    case LayerKind::depthwise2d:
      return depthwise2d(x, w, b, s.stride, s.padding);
    case LayerKind::linear:
      return linear(x, w, b);
    default:
      fail(ErrorKind::contract, "apply_layer on non-quantizable layer '" + s.name + "'");
  }
}

/// Forward pass from an input batch [N, C, H, W] to logits.
///
/// floating: real weights, no activation quantization (batch norm allowed).
/// search:   effective weights / activations from gamma_hat and delta_hat.
/// fixed:    per-channel quantization at `assignment`.
/// In search and fixed mode a pruned channel also has its bias removed, so
/// its output is exactly zero. `trace` receives every layer's output.
template <typename Scalar>
Var<Scalar> forward(const NetworkGraph& g, ForwardMode mode, const Bindings<Scalar>& b, const SearchSpace& space,
                    const Var<Scalar>& input, const Assignment* assignment = nullptr,
                    const Parameters<Scalar>* bn_params = nullptr, std::vector<Var<Scalar>>* trace = nullptr) {
  if (mode == ForwardMode::fixed && !assignment) fail(ErrorKind::contract, "fixed mode needs an assignment");
  auto& tape = *input.tape;
  std::vector<Var<Scalar>> values(static_cast<std::size_t>(g.size()));
  values[0] = input;
  for (int i = 1; i < g.size(); ++i) {
    const auto& s = g.layer(i);
    const auto& x = values[static_cast<std::size_t>(s.inputs[0])];
    const auto ui = static_cast<std::size_t>(i);
    switch (s.kind) {
      case LayerKind::relu:
        values[ui] = relu(x);
        break;
      case LayerKind::add:
        values[ui] = x + values[static_cast<std::size_t>(s.inputs[1])];
        break;
      case LayerKind::pool:
        values[ui] = global_avg_pool(x);
        break;
      case LayerKind::flatten:
        values[ui] = reshape(x, Shape{x.shape()[0], x.size() / x.shape()[0]});
        break;
      case LayerKind::batchnorm:
        if (mode != ForwardMode::floating || !bn_params)
          fail(ErrorKind::unsupported_topology, "batch norm must be folded before quantized training");
        values[ui] = batchnorm_inference(x, bn_params->batchnorm[ui], s.bn_eps);
        break;
      case LayerKind::input:
        break;
      default: {
        Var<Scalar> xe = x, we = b.weight[ui], be = b.bias[ui];
        if (mode == ForwardMode::search) {
          const auto& gh = b.gamma_hat[static_cast<std::size_t>(g.group_of(i))];
          xe = effective_activations(x, b.delta_hat[ui], space.activations, b.clip[ui]);
          we = effective_weights(we, gh, space.weights);
          be = scale_rows(be, nonzero_mass(gh, space.weights));
        } else if (mode == ForwardMode::fixed) {
          const auto& bits = assignment->channel_bits(g, i);
          xe = pact(x, b.clip[ui], assignment->act_bits[ui]);
          we = fake_quant_weights(we, std::span<const int>(bits));
          Array<Scalar> mask(bits.size());
          for (std::size_t k = 0; k < bits.size(); ++k) mask(static_cast<Index>(k)) = bits[k] == 0 ? 0 : 1;
          be = be * tape.constant(std::move(mask), be.shape());
        }
        values[ui] = apply_layer(s, xe, we, be);
      }
    }
  }
  if (trace) *trace = values;
  return values[static_cast<std::size_t>(g.output_index())];
}

/// Folds every inference-mode batch norm into its producing conv/linear layer:
/// w' = w * s, b' = (b - mean) * s + beta with s = gamma / sqrt(var + eps).
template <typename Scalar>
std::pair<NetworkGraph, Parameters<Scalar>> fold_batchnorm(const NetworkGraph& g, const Parameters<Scalar>& p) {
  std::map<std::string, std::string> rename;  // removed BN -> producer
  std::vector<LayerDecl> decls;
  std::map<std::string, LayerWeights<Scalar>> folded;

  for (int i = 1; i < g.size(); ++i) {
    const auto& s = g.layer(i);
    if (s.kind != LayerKind::batchnorm) continue;
    const auto& prod = g.layer(s.inputs[0]);
    if (!prod.quantizable())
      fail(ErrorKind::unsupported_topology, "batch norm '" + s.name + "' does not follow a conv/linear layer");
    if (g.consumers(s.inputs[0]).size() != 1)
      fail(ErrorKind::unsupported_topology, "batch norm '" + s.name + "' shares its producer with another consumer");
    const auto& bn = p.batchnorm[static_cast<std::size_t>(i)];
    if (((bn.var + static_cast<Scalar>(s.bn_eps)) <= Scalar(0)).any())
      fail(ErrorKind::contract, "batch norm '" + s.name + "' has non-positive variance + eps");
    const Array<Scalar> scale = bn.gamma / (bn.var + static_cast<Scalar>(s.bn_eps)).sqrt();
    auto lw = folded.count(prod.name) ? folded[prod.name] : p.layers[static_cast<std::size_t>(s.inputs[0])];
    const Index rows = prod.c_out, inner = lw.weight.size() / rows;
    for (Index r = 0; r < rows; ++r) lw.weight.segment(r * inner, inner) *= scale(r);
    lw.bias = (lw.bias - bn.mean) * scale + bn.beta;
    folded[prod.name] = lw;
    rename[s.name] = rename.count(prod.name) ? rename[prod.name] : prod.name;
  }

  for (int i = 1; i < g.size(); ++i) {
    const auto& s = g.layer(i);
    if (s.kind == LayerKind::batchnorm) continue;
    LayerDecl d;
    d.name = s.name;
    d.kind = s.kind;
    for (int in : s.inputs) {
      std::string name = g.layer(in).name;
      while (rename.count(name)) name = rename[name];
      d.inputs.push_back(name);
    }
    d.out_channels = s.c_out;
    d.kernel = s.k_x;
    d.stride = s.stride;
    d.padding = s.padding;
    decls.push_back(std::move(d));
  }
  const auto& in = g.layer(0);
  NetworkGraph out = NetworkGraph::build({in.c_out, in.h_out, in.w_out}, decls);

  Parameters<Scalar> q;
  q.layers.resize(static_cast<std::size_t>(out.size()));
  q.batchnorm.resize(static_cast<std::size_t>(out.size()));
  for (int i = 0; i < out.size(); ++i) {
    const auto& name = out.layer(i).name;
    if (!out.layer(i).quantizable()) continue;
    q.layers[static_cast<std::size_t>(i)] =
        folded.count(name) ? folded[name] : p.layers[static_cast<std::size_t>(g.index_of(name))];
  }
  return {std::move(out), std::move(q)};
}

}  // namespace mixprune
