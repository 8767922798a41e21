#include "mixprune/export.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "mixprune/error.hpp"
#include "mixprune/ops.hpp"

namespace mixprune {

namespace {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

double ne16_cycles(const NetworkGraph& g, const Assignment& a, const SearchSpace& space, const Ne16Params& p) {
  double total = 0;
  for (const auto& c : ne16_breakdown(g, a, space, p)) total += c.total();
  return total;
}

// Row r of a [rows, inner] tensor for each r in `pick`, in that order.
template <typename T>
std::vector<T> take_rows(const std::vector<T>& v, Index inner, const std::vector<int>& pick) {
  std::vector<T> out;
  out.reserve(pick.size() * static_cast<std::size_t>(inner));
  for (int r : pick) out.insert(out.end(), v.begin() + r * inner, v.begin() + (r + 1) * inner);
  return out;
}

// Input channel slices of a [rows, channels * per_channel] tensor.
template <typename T>
std::vector<T> take_inputs(const std::vector<T>& v, Index rows, Index channels, const std::vector<int>& pick) {
  const Index inner = rows ? static_cast<Index>(v.size()) / rows : 0;
  const Index per = channels ? inner / channels : 0;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(rows) * pick.size() * static_cast<std::size_t>(per));
  for (Index r = 0; r < rows; ++r)
    for (int c : pick) {
      const auto from = v.begin() + r * inner + c * per;
      out.insert(out.end(), from, from + per);
    }
  return out;
}

// Applies a per-group channel selection (subset or permutation) to every
// producer row and consumer input slice, and rebuilds the graph with the new
// channel counts.
QuantizedModel select_channels(const QuantizedModel& m, const std::vector<std::vector<int>>& keep) {
  const auto& g = m.graph;
  auto doc = g.to_json();
  for (int i = 1; i < g.size(); ++i) {
    const auto& s = g.layer(i);
    if (s.quantizable() && s.kind != LayerKind::depthwise2d)
      doc["layers"][static_cast<std::size_t>(i - 1)]["out_channels"] =
          keep[static_cast<std::size_t>(g.group_of(i))].size();
  }
  QuantizedModel out;
  out.graph = NetworkGraph::from_json(doc);
  if (out.graph.group_count() != g.group_count())
    fail(ErrorKind::contract, "channel selection changed the selector group structure");
  out.layers.resize(m.layers.size());
  for (int q : g.quantizable_layers()) {
    const auto uq = static_cast<std::size_t>(q);
    const auto& src = m.layers[uq];
    const auto& rows = keep[static_cast<std::size_t>(g.group_of(q))];
    auto& dst = out.layers[uq];
    dst.act_bits = src.act_bits;
    dst.clip = src.clip;
    dst.bits = take_rows(src.bits, 1, rows);
    dst.range = take_rows(src.range, 1, rows);
    dst.bias = take_rows(src.bias, 1, rows);
    dst.codes = take_rows(src.codes, src.inner(), rows);
    const int ig = g.input_group(q);
    if (ig >= 0 && g.layer(q).kind != LayerKind::depthwise2d)
      dst.codes = take_inputs(dst.codes, static_cast<Index>(rows.size()), g.group_channels(ig),
                              keep[static_cast<std::size_t>(ig)]);
    dst.shape = weight_shape(out.graph.layer(q));
    if (numel(dst.shape) != static_cast<Index>(dst.codes.size()))
      fail(ErrorKind::contract, "channel selection produced a mis-sized weight tensor");
  }
  const int og = g.group_of(g.output_index());
  if (og >= 0)
    for (int k : keep[static_cast<std::size_t>(og)]) out.output_order.push_back(m.output_order[static_cast<std::size_t>(k)]);
  else
    out.output_order = m.output_order;
  return out;
}

const std::vector<int>& group_bits_of(const QuantizedModel& m, int group) {
  return m.layers[static_cast<std::size_t>(m.graph.group_members(group).front())].bits;
}

Array<double> dequantize(const std::int32_t* codes, const float* range, const int* bits, Index rows, Index inner) {
  Array<double> w(rows * inner);
  for (Index r = 0; r < rows; ++r)
    for (Index k = 0; k < inner; ++k)
      w(r * inner + k) = symmetric_value<double>(codes[r * inner + k], range[r], bits[r]);
  return w;
}

Array<double> as_double(const std::vector<float>& v) {
  Array<double> a(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) a(static_cast<Index>(i)) = v[i];
  return a;
}

// Channel slice [from, from + count) of an [N, C, ...] tensor.
Array<double> channel_slice(const Array<double>& x, const Shape& s, Index from, Index count) {
  const Index n = s[0], c = s[1], inner = x.size() / (n * c);
  Array<double> out(n * count * inner);
  for (Index b = 0; b < n; ++b)
    out.segment(b * count * inner, count * inner) = x.segment((b * c + from) * inner, count * inner);
  return out;
}

Array<double> channel_concat(const std::vector<Var<double>>& parts) {
  const Index n = parts.front().shape()[0];
  Index total = 0;
  for (const auto& p : parts) total += p.size();
  Array<double> out(total);
  Index at = 0;
  for (Index b = 0; b < n; ++b)
    for (const auto& p : parts) {
      const Index block = p.size() / n;
      out.segment(at, block) = p.value().segment(b * block, block);
      at += block;
    }
  return out;
}

using LayerFn = std::function<Var<double>(int layer, const Var<double>& x_quantized)>;

// Walks the graph in double precision; quantizable layers see their PACT
// quantized input and are evaluated by `apply`.
Array<double> interpret(const NetworkGraph& g, const std::vector<int>& act_bits, const std::vector<float>& clips,
                        const std::vector<int>& output_order, const Array<float>& input, Index batch,
                        const LayerFn& apply) {
  const auto& in = g.layer(0);
  const Shape in_shape{batch, in.c_out, in.h_out, in.w_out};
  if (input.size() != numel(in_shape)) fail(ErrorKind::shape, "input does not match the network input shape");
  Tape<double> t;
  std::vector<Var<double>> values(static_cast<std::size_t>(g.size()));
  values[0] = t.constant(input.cast<double>(), in_shape);
  for (int i = 1; i < g.size(); ++i) {
    const auto& s = g.layer(i);
    const auto& x = values[static_cast<std::size_t>(s.inputs[0])];
    auto& y = values[static_cast<std::size_t>(i)];
    switch (s.kind) {
      case LayerKind::relu: y = relu(x); break;
      case LayerKind::add: y = x + values[static_cast<std::size_t>(s.inputs[1])]; break;
      case LayerKind::pool: y = global_avg_pool(x); break;
      case LayerKind::flatten: y = reshape(x, Shape{x.shape()[0], x.size() / x.shape()[0]}); break;
      case LayerKind::batchnorm: fail(ErrorKind::unsupported_topology, "fold batch norm before export");
      case LayerKind::input: break;
      default: {
        const auto ui = static_cast<std::size_t>(i);
        auto xq = t.constant(fake_quantize_activations<double>(x.value(), act_bits[ui], clips[ui]), x.shape());
        y = apply(i, xq);
      }
    }
  }
  const auto& logits = values[static_cast<std::size_t>(g.output_index())];
  const Index classes = logits.shape()[1];
  Array<double> out(logits.size());
  for (Index b = 0; b < batch; ++b)
    for (Index k = 0; k < classes; ++k)
      out(b * classes + output_order[static_cast<std::size_t>(k)]) = logits.value()(b * classes + k);
  return out;
}

// --- bit packing -------------------------------------------------------------

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof v);
  }
  void append(const std::vector<std::uint8_t>& b) { bytes.insert(bytes.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> bytes;
};

std::vector<std::uint8_t> float_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> b(v.size() * 4);
  if (!v.empty()) std::memcpy(b.data(), v.data(), b.size());
  return b;
}

constexpr char kMagic[4] = {'M', 'X', 'P', 'R'};
constexpr std::uint16_t kDeployVersion = 1;

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

// --- refinement and permutations -------------------------------------------

Assignment ne16_refine(const NetworkGraph& g, const Assignment& a, const SearchSpace& space, const Ne16Params& p) {
  Assignment cur = a;
  double best = ne16_cycles(g, cur, space, p);
  const auto& levels = space.weights.bits();
  for (int k = 0; k < g.group_count(); ++k) {
    const auto uk = static_cast<std::size_t>(k);
    for (;;) {
      const auto bits = cur.group_bits[uk];
      double move_cost = best;
      std::vector<int> move;
      for (std::size_t lo = 0; lo < levels.size(); ++lo) {
        if (levels[lo] == 0) continue;
        std::vector<int> at;
        for (std::size_t c = 0; c < bits.size(); ++c)
          if (bits[c] == levels[lo]) at.push_back(static_cast<int>(c));
        for (std::size_t hi = lo + 1; hi < levels.size(); ++hi)
          for (std::size_t m = 1; m <= at.size(); ++m) {
            // Promote the last m channels of this precision.
            auto trial = cur;
            for (std::size_t j = at.size() - m; j < at.size(); ++j)
              trial.group_bits[uk][static_cast<std::size_t>(at[j])] = levels[hi];
            const double c = ne16_cycles(g, trial, space, p);
            if (c < move_cost) {
              move_cost = c;
              move = trial.group_bits[uk];
            }
          }
      }
      if (move.empty()) break;
      cur.group_bits[uk] = std::move(move);
      best = move_cost;
    }
  }
  return cur;
}

std::vector<int> reorder_permutation(const std::vector<int>& bits) {
  std::vector<int> order(bits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return bits[static_cast<std::size_t>(x)] > bits[static_cast<std::size_t>(y)];
  });
  return order;
}

// --- quantized models --------------------------------------------------------

QuantizedModel quantize_model(const NetworkGraph& g, const Parameters<float>& params,
                              const SelectorState<float>& selectors, const Assignment& a) {
  if (g.has_batchnorm()) fail(ErrorKind::unsupported_topology, "fold batch norm before export");
  QuantizedModel m;
  m.graph = g;
  m.layers.resize(static_cast<std::size_t>(g.size()));
  for (int q : g.quantizable_layers()) {
    const auto uq = static_cast<std::size_t>(q);
    const auto& lw = params.layers.at(uq);
    auto& l = m.layers[uq];
    l.shape = lw.shape;
    l.bits = a.channel_bits(g, q);
    l.act_bits = a.act_bits.at(uq);
    l.clip = selectors.clip.at(uq);
    const auto rows = static_cast<Index>(l.bits.size());
    const Index inner = lw.weight.size() / rows;
    l.codes.resize(static_cast<std::size_t>(lw.weight.size()));
    for (Index r = 0; r < rows; ++r) {
      const int b = l.bits[static_cast<std::size_t>(r)];
      const auto w = lw.weight.segment(r * inner, inner);
      const float range = b == 0 || inner == 0 ? 0.0f : w.abs().maxCoeff();
      l.range.push_back(range);
      l.bias.push_back(b == 0 ? 0.0f : lw.bias(r));
      for (Index k = 0; k < inner; ++k)
        l.codes[static_cast<std::size_t>(r * inner + k)] = b == 0 ? 0 : symmetric_code(w(k), range, b);
    }
  }
  const auto& out = g.layer(g.output_index());
  m.output_order.resize(static_cast<std::size_t>(out.c_out));
  std::iota(m.output_order.begin(), m.output_order.end(), 0);
  return m;
}

QuantizedModel prune_zero_channels(const QuantizedModel& m) {
  const auto& g = m.graph;
  std::vector<std::vector<int>> keep(static_cast<std::size_t>(g.group_count()));
  for (int k = 0; k < g.group_count(); ++k) {
    const auto& bits = group_bits_of(m, k);
    for (int member : g.group_members(k))
      if (m.layers[static_cast<std::size_t>(member)].bits != bits)
        fail(ErrorKind::contract, "members of a selector group disagree on channel bit-widths");
    for (std::size_t c = 0; c < bits.size(); ++c)
      if (bits[c] != 0) keep[static_cast<std::size_t>(k)].push_back(static_cast<int>(c));
    if (keep[static_cast<std::size_t>(k)].empty())
      fail(ErrorKind::degenerate, "layer '" + g.layer(g.group_members(k).front()).name + "' has every channel pruned");
    if (g.is_output_group(k) && keep[static_cast<std::size_t>(k)].size() != bits.size())
      fail(ErrorKind::contract, "output channels cannot be pruned");
  }
  return select_channels(m, keep);
}

QuantizedModel reorder_channels(const QuantizedModel& m, Permutation* perm) {
  std::vector<std::vector<int>> order;
  for (int k = 0; k < m.graph.group_count(); ++k) order.push_back(reorder_permutation(group_bits_of(m, k)));
  if (perm) perm->group = order;
  return select_channels(m, order);
}

DeployModel split_sublayers(const QuantizedModel& m) {
  DeployModel d;
  d.graph = m.graph;
  d.output_order = m.output_order;
  for (int q : m.graph.quantizable_layers()) {
    const auto& l = m.layers[static_cast<std::size_t>(q)];
    DeployLayer dl{m.graph.layer(q).name, l.shape, l.act_bits, l.clip, {}};
    const Index inner = l.inner();
    for (std::size_t c = 0; c < l.bits.size();) {
      const int b = l.bits[c];
      if (b == 0) fail(ErrorKind::contract, "split_sublayers needs pruned channels removed first");
      if (c > 0 && b > l.bits[c - 1]) fail(ErrorKind::contract, "split_sublayers needs channels sorted by precision");
      std::size_t end = c;
      while (end < l.bits.size() && l.bits[end] == b) ++end;
      SubLayer s{b, static_cast<int>(end - c), {}, {}, {}};
      s.codes.assign(l.codes.begin() + static_cast<Index>(c) * inner, l.codes.begin() + static_cast<Index>(end) * inner);
      s.range.assign(l.range.begin() + static_cast<std::ptrdiff_t>(c), l.range.begin() + static_cast<std::ptrdiff_t>(end));
      s.bias.assign(l.bias.begin() + static_cast<std::ptrdiff_t>(c), l.bias.begin() + static_cast<std::ptrdiff_t>(end));
      dl.sublayers.push_back(std::move(s));
      c = end;
    }
    d.layers.push_back(std::move(dl));
  }
  return d;
}

DeployModel build_deploy_model(const NetworkGraph& g, const Parameters<float>& params,
                               const SelectorState<float>& selectors, const Assignment& a) {
  return split_sublayers(reorder_channels(prune_zero_channels(quantize_model(g, params, selectors, a))));
}

Array<double> run_quantized(const QuantizedModel& m, const Array<float>& input, Index batch) {
  const auto& g = m.graph;
  std::vector<int> act(static_cast<std::size_t>(g.size()), 0);
  std::vector<float> clips(static_cast<std::size_t>(g.size()), 0.0f);
  for (int q : g.quantizable_layers()) {
    act[static_cast<std::size_t>(q)] = m.layers[static_cast<std::size_t>(q)].act_bits;
    clips[static_cast<std::size_t>(q)] = m.layers[static_cast<std::size_t>(q)].clip;
  }
  return interpret(g, act, clips, m.output_order, input, batch, [&](int i, const Var<double>& x) {
    const auto& l = m.layers[static_cast<std::size_t>(i)];
    auto& t = *x.tape;
    const auto rows = static_cast<Index>(l.bits.size());
    auto w = t.constant(dequantize(l.codes.data(), l.range.data(), l.bits.data(), rows, l.inner()), l.shape);
    auto b = t.constant(as_double(l.bias), Shape{rows});
    return apply_layer(g.layer(i), x, w, b);
  });
}

Array<double> run_deploy(const DeployModel& m, const Array<float>& input, Index batch) {
  const auto& g = m.graph;
  std::vector<int> act(static_cast<std::size_t>(g.size()), 0);
  std::vector<float> clips(static_cast<std::size_t>(g.size()), 0.0f);
  std::vector<const DeployLayer*> by_index(static_cast<std::size_t>(g.size()), nullptr);
  std::size_t next = 0;
  for (int q : g.quantizable_layers()) {
    const auto& l = m.layers.at(next++);
    if (l.name != g.layer(q).name) fail(ErrorKind::load, "deploy layers do not match the graph");
    by_index[static_cast<std::size_t>(q)] = &l;
    act[static_cast<std::size_t>(q)] = l.act_bits;
    clips[static_cast<std::size_t>(q)] = l.clip;
  }
  return interpret(g, act, clips, m.output_order, input, batch, [&](int i, const Var<double>& x) {
    const auto& l = *by_index[static_cast<std::size_t>(i)];
    const auto& spec = g.layer(i);
    auto& t = *x.tape;
    const Index inner = numel(l.shape) / l.shape[0];
    std::vector<Var<double>> parts;
    Index first = 0;
    for (const auto& s : l.sublayers) {
      Shape ws = l.shape;
      ws[0] = s.channels;
      const std::vector<int> bits(static_cast<std::size_t>(s.channels), s.bits);
      auto w = t.constant(dequantize(s.codes.data(), s.range.data(), bits.data(), s.channels, inner), ws);
      auto b = t.constant(as_double(s.bias), Shape{s.channels});
      auto xs = x;
      if (spec.kind == LayerKind::depthwise2d) {
        Shape sub = x.shape();
        sub[1] = s.channels;
        xs = t.constant(channel_slice(x.value(), x.shape(), first, s.channels), sub);
      }
      parts.push_back(apply_layer(spec, xs, w, b));
      first += s.channels;
    }
    Shape out_shape = parts.front().shape();
    out_shape[1] = first;
    return t.constant(channel_concat(parts), out_shape);
  });
}

// --- deploy file -------------------------------------------------------------

std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits) {
  if (bits < 1 || bits > 32) fail(ErrorKind::contract, "pack_codes: bit-width out of range");
  std::vector<std::uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  std::size_t pos = 0;
  for (auto c : codes) {
    const std::int64_t lo = -(std::int64_t{1} << (bits - 1)), hi = (std::int64_t{1} << (bits - 1)) - 1;
    if (c < lo || c > hi) fail(ErrorKind::contract, "pack_codes: code does not fit the bit-width");
    const std::uint64_t v = static_cast<std::uint64_t>(static_cast<std::int64_t>(c)) & mask;
    for (int k = 0; k < bits; ++k, ++pos)
      if ((v >> k) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
  }
  return out;
}

std::vector<std::int32_t> unpack_codes(const std::uint8_t* data, std::size_t count, int bits) {
  if (bits < 1 || bits > 32) fail(ErrorKind::contract, "unpack_codes: bit-width out of range");
  std::vector<std::int32_t> out(count);
  std::size_t pos = 0;
  for (auto& c : out) {
    std::uint64_t v = 0;
    for (int k = 0; k < bits; ++k, ++pos)
      if ((data[pos / 8] >> (pos % 8)) & 1u) v |= std::uint64_t{1} << k;
    if (v >> (bits - 1)) v |= ~((std::uint64_t{1} << bits) - 1);  // sign-extend
    c = static_cast<std::int32_t>(static_cast<std::int64_t>(v));
  }
  return out;
}

std::vector<std::uint8_t> serialize(const DeployModel& m) {
  ByteWriter blobs;
  auto blob = [&](const std::vector<std::uint8_t>& b) {
    nlohmann::json ref = {{"offset", blobs.bytes.size()}, {"length", b.size()}};
    blobs.append(b);
    return ref;
  };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json subs = nlohmann::json::array();
    for (const auto& s : l.sublayers)
      subs.push_back({{"bits", s.bits},
                      {"channels", s.channels},
                      {"codes", blob(pack_codes(s.codes, s.bits))},
                      {"range", blob(float_bytes(s.range))},
                      {"bias", blob(float_bytes(s.bias))}});
    layers.push_back({{"name", l.name}, {"shape", l.shape}, {"act_bits", l.act_bits}, {"clip", l.clip},
                      {"sublayers", subs}});
  }
  const nlohmann::json manifest = {
      {"format", "mixprune-deploy"},
      {"graph", m.graph.to_json()},
      {"output_order", m.output_order},
      {"layers", layers},
      {"encoding",
       {{"codes", "two's complement, LSB first, each sub-layer padded with zero bits to a byte boundary"},
        {"range", "f32le per channel; weight = range * code / (2^(bits-1) - 1)"},
        {"bias", "f32le per channel"}}}};
  const auto text = manifest.dump();

  ByteWriter out;
  out.bytes.assign(kMagic, kMagic + 4);
  out.put<std::uint16_t>(kDeployVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  out.bytes.insert(out.bytes.end(), text.begin(), text.end());
  out.append(blobs.bytes);
  out.put<std::uint32_t>(crc32_of(out.bytes.data(), out.bytes.size()));
  return out.bytes;
}

DeployModel deserialize(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t header = 4 + 2 + 4;
  if (bytes.size() < header + 4) fail(ErrorKind::load, "deploy file is truncated");
  if (!std::equal(kMagic, kMagic + 4, bytes.begin())) fail(ErrorKind::load, "not a deploy file (bad magic)");
  std::uint16_t version;
  std::uint32_t manifest_len, stored_crc;
  std::memcpy(&version, bytes.data() + 4, 2);
  std::memcpy(&manifest_len, bytes.data() + 6, 4);
  if (version != kDeployVersion) fail(ErrorKind::load, "unsupported deploy file version " + std::to_string(version));
  if (header + manifest_len + 4 > bytes.size()) fail(ErrorKind::load, "deploy file is truncated");
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(bytes.data(), bytes.size() - 4) != stored_crc) fail(ErrorKind::load, "deploy file checksum mismatch");

  const std::uint8_t* blob_base = bytes.data() + header + manifest_len;
  const std::size_t blob_len = bytes.size() - 4 - header - manifest_len;
  auto blob = [&](const nlohmann::json& ref, std::size_t expected) {
    const auto off = ref.at("offset").get<std::size_t>(), len = ref.at("length").get<std::size_t>();
    if (off > blob_len || len > blob_len - off || len != expected) fail(ErrorKind::load, "deploy blob out of bounds");
    return blob_base + off;
  };
  auto floats = [&](const nlohmann::json& ref, std::size_t n) {
    std::vector<float> v(n);
    if (n) std::memcpy(v.data(), blob(ref, n * 4), n * 4);
    return v;
  };

  DeployModel m;
  try {
    const auto manifest =
        nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                              bytes.begin() + static_cast<std::ptrdiff_t>(header + manifest_len));
    m.graph = NetworkGraph::from_json(manifest.at("graph"));
    m.output_order = manifest.at("output_order").get<std::vector<int>>();
    for (const auto& jl : manifest.at("layers")) {
      DeployLayer l;
      l.name = jl.at("name").get<std::string>();
      l.shape = jl.at("shape").get<Shape>();
      l.act_bits = jl.at("act_bits").get<int>();
      l.clip = jl.at("clip").get<float>();
      if (l.shape.empty() || l.shape[0] < 1) fail(ErrorKind::load, "deploy layer '" + l.name + "' has a bad shape");
      const Index inner = numel(l.shape) / l.shape[0];
      for (const auto& js : jl.at("sublayers")) {
        SubLayer s;
        s.bits = js.at("bits").get<int>();
        s.channels = js.at("channels").get<int>();
        if (s.bits < 1 || s.bits > 16 || s.channels < 1) fail(ErrorKind::load, "deploy sub-layer out of range");
        const auto n = static_cast<std::size_t>(s.channels) * static_cast<std::size_t>(inner);
        s.codes = unpack_codes(blob(js.at("codes"), (n * static_cast<std::size_t>(s.bits) + 7) / 8), n, s.bits);
        s.range = floats(js.at("range"), static_cast<std::size_t>(s.channels));
        s.bias = floats(js.at("bias"), static_cast<std::size_t>(s.channels));
        l.sublayers.push_back(std::move(s));
      }
      m.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, std::string("malformed deploy manifest: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::load) throw;
    fail(ErrorKind::load, std::string("invalid deploy model: ") + e.what());
  }
  return m;
}

void save_deploy(const DeployModel& m, const std::filesystem::path& path) {
  const auto bytes = serialize(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "failed writing '" + path.string() + "'");
}

DeployModel load_deploy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::load, "cannot open deploy file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// --- reports -----------------------------------------------------------------

nlohmann::json CostReport::to_json() const {
  nlohmann::json j = {{"weight_bits", weight_bits}, {"size_bytes", size_bytes}, {"bitops", bitops},
                      {"degenerate", degenerate}, {"notes", notes}};
  if (mpic_cycles) j["mpic_cycles"] = *mpic_cycles;
  if (mpic_latency_s) j["mpic_latency_ms"] = *mpic_latency_s * 1e3;
  if (ne16_cycles) j["ne16_cycles"] = *ne16_cycles;
  if (ne16_latency_s) j["ne16_latency_ms"] = *ne16_latency_s * 1e3;
  return j;
}

std::string CostReport::to_text() const {
  std::ostringstream s;
  auto row = [&](const std::string& k, const std::string& v) { s << std::left << std::setw(18) << k << v << '\n'; };
  auto num = [](double v, int prec) {
    std::ostringstream o;
    o << std::setprecision(prec) << v;
    return o.str();
  };
  row("weight bits", std::to_string(weight_bits));
  row("size (kB)", num(size_bytes / 1e3, 6));
  row("bitops", num(bitops, 6));
  if (mpic_cycles) row("mpic cycles", num(*mpic_cycles, 7));
  if (mpic_latency_s) row("mpic latency (ms)", num(*mpic_latency_s * 1e3, 5));
  if (ne16_cycles) row("ne16 cycles", num(*ne16_cycles, 7));
  if (ne16_latency_s) row("ne16 latency (ms)", num(*ne16_latency_s * 1e3, 5));
  if (degenerate) row("degenerate", "yes: some layer has every channel pruned");
  for (const auto& n : notes) s << "note: " << n << '\n';
  return s.str();
}

CostReport cost_report(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                       const std::optional<CostLUT>& lut, const HardwareConfig& hw) {
  CostReport r;
  r.degenerate = a.fully_pruned_layer(g) >= 0;
  r.weight_bits = exact_weight_bits(g, a);
  r.size_bytes = static_cast<double>(r.weight_bits) / 8.0;
  r.bitops = evaluate_cost(g, a, space, {CostKind::bitops, {}, {}});
  if (lut) {
    r.mpic_cycles = evaluate_cost(g, a, space, {CostKind::mpic, lut, {}});
    if (hw.mpic)
      r.mpic_latency_s = cycles_to_latency(*r.mpic_cycles, *hw.mpic);
    else
      r.notes.push_back("mpic latency omitted: no mpic clock in the hardware config");
  } else {
    r.notes.push_back("mpic columns omitted: no MACs-per-cycle table given");
  }
  if (hw.ne16) {
    r.ne16_cycles = ne16_cycles(g, a, space, *hw.ne16);
    r.ne16_latency_s = cycles_to_latency(*r.ne16_cycles, HwClock{hw.ne16->frequency_hz});
  } else {
    r.notes.push_back("ne16 columns omitted: no ne16 section in the hardware config");
  }
  return r;
}

}  // namespace mixprune
