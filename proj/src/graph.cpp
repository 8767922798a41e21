#include "mixprune/graph.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>

namespace mixprune {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::depthwise2d: return "depthwise2d";
    case LayerKind::pointwise: return "pointwise";
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::add: return "add";
    case LayerKind::pool: return "pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
  static const std::map<std::string, LayerKind> kinds = {
      {"input", LayerKind::input},         {"conv2d", LayerKind::conv2d},
      {"depthwise2d", LayerKind::depthwise2d}, {"pointwise", LayerKind::pointwise},
      {"linear", LayerKind::linear},       {"relu", LayerKind::relu},
      {"add", LayerKind::add},             {"pool", LayerKind::pool},
      {"flatten", LayerKind::flatten},     {"batchnorm", LayerKind::batchnorm}};
  auto it = kinds.find(s);
  if (it == kinds.end()) fail(ErrorKind::validation, "unknown layer kind '" + s + "'");
  return it->second;
}

std::int64_t LayerSpec::weight_count() const {
  switch (kind) {
    case LayerKind::conv2d:
    case LayerKind::pointwise:
      return std::int64_t{k_x} * k_y * c_in * c_out;
    case LayerKind::depthwise2d:
      return std::int64_t{k_x} * k_y * c_out;
    case LayerKind::linear:
      return std::int64_t{c_in} * c_out;
    default:
      return 0;
  }
}

std::int64_t LayerSpec::macs() const { return weight_count() * h_out * w_out; }

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

NetworkGraph NetworkGraph::build(const InputDecl& input, const std::vector<LayerDecl>& decls) {
  if (input.channels < 1 || input.height < 1 || input.width < 1)
    fail(ErrorKind::validation, "input channels and spatial dims must be >= 1");
  NetworkGraph g;
  g.input_ = input;
  std::map<std::string, int> by_name;

  LayerSpec in;
  in.name = "input";
  in.kind = LayerKind::input;
  in.c_in = in.c_out = input.channels;
  in.h_in = in.h_out = input.height;
  in.w_in = in.w_out = input.width;
  g.layers_.push_back(in);
  by_name["input"] = 0;

  for (const auto& d : decls) {
    if (d.kind == LayerKind::input) fail(ErrorKind::validation, "only one input node is allowed");
    if (d.name.empty()) fail(ErrorKind::validation, "layer without a name");
    if (by_name.count(d.name)) fail(ErrorKind::validation, "duplicate layer name '" + d.name + "'");
    LayerSpec s;
    s.name = d.name;
    s.kind = d.kind;
    s.bn_eps = d.bn_eps;
    if (d.inputs.empty()) {
      s.inputs.push_back(static_cast<int>(g.layers_.size()) - 1);
    } else {
      for (const auto& name : d.inputs) {
        auto it = by_name.find(name);
        if (it == by_name.end())
          fail(ErrorKind::validation, "layer '" + d.name + "' references unknown or later layer '" + name + "'");
        s.inputs.push_back(it->second);
      }
    }
    s.c_out = d.out_channels;
    s.k_x = s.k_y = d.kernel;
    s.stride = d.stride;
    s.padding = d.padding;
    if (s.kind == LayerKind::pointwise) {
      s.k_x = s.k_y = 1;
      s.padding = 0;
    }
    if (s.kind == LayerKind::linear) s.k_x = s.k_y = 1;
    by_name[d.name] = static_cast<int>(g.layers_.size());
    g.layers_.push_back(s);
  }
  g.infer_and_validate();
  g.compute_groups();
  return g;
}

void NetworkGraph::infer_and_validate() {
  const int n = size();
  consumers_.assign(static_cast<std::size_t>(n), {});
  for (int i = 1; i < n; ++i) {
    auto& s = layers_[static_cast<std::size_t>(i)];
    const std::size_t want_inputs = s.kind == LayerKind::add ? 2 : 1;
    if (s.inputs.size() != want_inputs)
      fail(ErrorKind::unsupported_topology,
           "layer '" + s.name + "' must have " + std::to_string(want_inputs) + " input(s)");
    for (int p : s.inputs) consumers_[static_cast<std::size_t>(p)].push_back(i);

    const auto& src = layers_[static_cast<std::size_t>(s.inputs[0])];
    s.c_in = src.c_out;
    s.h_in = src.h_out;
    s.w_in = src.w_out;
    const bool spatial_in = src.spatial_out;

    switch (s.kind) {
      case LayerKind::conv2d:
      case LayerKind::pointwise:
      case LayerKind::depthwise2d: {
        if (!spatial_in) fail(ErrorKind::validation, "layer '" + s.name + "' needs a spatial input");
        if (s.kind == LayerKind::depthwise2d) s.c_out = s.c_in;
        if (s.c_out < 1) fail(ErrorKind::validation, "layer '" + s.name + "' must have >= 1 output channels");
        if (s.k_x < 1 || s.stride < 1 || s.padding < 0)
          fail(ErrorKind::validation, "layer '" + s.name + "' has invalid kernel/stride/padding");
        s.h_out = (s.h_in + 2 * s.padding - s.k_y) / s.stride + 1;
        s.w_out = (s.w_in + 2 * s.padding - s.k_x) / s.stride + 1;
        if (s.h_out < 1 || s.w_out < 1) fail(ErrorKind::validation, "layer '" + s.name + "' has empty output");
        break;
      }
      case LayerKind::linear:
        if (spatial_in) fail(ErrorKind::validation, "linear layer '" + s.name + "' needs a flattened input");
        if (s.c_out < 1) fail(ErrorKind::validation, "layer '" + s.name + "' must have >= 1 output channels");
        s.spatial_out = false;
        break;
      case LayerKind::relu:
      case LayerKind::batchnorm:
        s.c_out = s.c_in;
        s.h_out = s.h_in;
        s.w_out = s.w_in;
        s.spatial_out = spatial_in;
        break;
      case LayerKind::pool:
        if (!spatial_in) fail(ErrorKind::validation, "pool '" + s.name + "' needs a spatial input");
        s.c_out = s.c_in;
        s.spatial_out = false;
        break;
      case LayerKind::flatten:
        s.c_out = spatial_in ? s.c_in * s.h_in * s.w_in : s.c_in;
        s.spatial_out = false;
        break;
      case LayerKind::add: {
        const auto& other = layers_[static_cast<std::size_t>(s.inputs[1])];
        if (other.c_out != src.c_out || other.h_out != src.h_out || other.w_out != src.w_out ||
            other.spatial_out != src.spatial_out)
          fail(ErrorKind::validation, "add '" + s.name + "' has mismatched operand shapes");
        s.c_out = s.c_in;
        s.h_out = s.h_in;
        s.w_out = s.w_in;
        s.spatial_out = spatial_in;
        break;
      }
      case LayerKind::input:
        break;
    }
    if (!s.spatial_out) s.h_out = s.w_out = 1;
  }

  int sinks = 0;
  for (int i = 0; i < n; ++i) {
    const auto& cons = consumers_[static_cast<std::size_t>(i)];
    if (cons.empty()) {
      ++sinks;
      output_ = i;
    }
    if (cons.size() > 2)
      fail(ErrorKind::unsupported_topology, "layer '" + layers_[static_cast<std::size_t>(i)].name +
                                                "' fans out to more than two consumers");
    if (cons.size() == 2) {
      const bool feeds_add = std::any_of(cons.begin(), cons.end(), [&](int c) {
        return layers_[static_cast<std::size_t>(c)].kind == LayerKind::add;
      });
      if (!feeds_add)
        fail(ErrorKind::unsupported_topology, "layer '" + layers_[static_cast<std::size_t>(i)].name +
                                                  "' branches without reconverging in an add");
    }
  }
  if (n < 2 || sinks != 1) fail(ErrorKind::unsupported_topology, "graph must have exactly one output node");
  if (!layers_[static_cast<std::size_t>(output_)].quantizable())
    fail(ErrorKind::unsupported_topology, "the output node must be a classifier (linear/conv) layer");

  quantizable_.clear();
  for (int i = 0; i < n; ++i)
    if (layers_[static_cast<std::size_t>(i)].quantizable()) quantizable_.push_back(i);
}

void NetworkGraph::compute_groups() {
  const int n = size();
  UnionFind uf(n);
  std::vector<int> source(static_cast<std::size_t>(n), -1);  // representative quantizable layer
  for (int i = 1; i < n; ++i) {
    const auto& s = layers_[static_cast<std::size_t>(i)];
    const int in_src = source[static_cast<std::size_t>(s.inputs[0])];
    switch (s.kind) {
      case LayerKind::depthwise2d:
        if (in_src >= 0) uf.unite(i, in_src);
        source[static_cast<std::size_t>(i)] = i;
        break;
      case LayerKind::conv2d:
      case LayerKind::pointwise:
      case LayerKind::linear:
        source[static_cast<std::size_t>(i)] = i;
        break;
      case LayerKind::add: {
        const int other = source[static_cast<std::size_t>(s.inputs[1])];
        if (in_src < 0 || other < 0)
          fail(ErrorKind::unsupported_topology,
               "add '" + s.name + "' operands must both originate from quantizable layers");
        uf.unite(in_src, other);
        source[static_cast<std::size_t>(i)] = in_src;
        break;
      }
      default:
        source[static_cast<std::size_t>(i)] = in_src;
        break;
    }
  }

  std::map<int, int> root_to_group;
  group_of_.assign(static_cast<std::size_t>(n), -1);
  groups_.clear();
  for (int q : quantizable_) {
    const int root = uf.find(q);
    auto it = root_to_group.find(root);
    if (it == root_to_group.end()) {
      it = root_to_group.emplace(root, static_cast<int>(groups_.size())).first;
      groups_.emplace_back();
    }
    group_of_[static_cast<std::size_t>(q)] = it->second;
    groups_[static_cast<std::size_t>(it->second)].push_back(q);
  }
  channel_group_.assign(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    const int src = source[static_cast<std::size_t>(i)];
    if (src >= 0) channel_group_[static_cast<std::size_t>(i)] = group_of_[static_cast<std::size_t>(src)];
  }
  for (const auto& members : groups_) {
    const int c = layers_[static_cast<std::size_t>(members.front())].c_out;
    for (int m : members)
      if (layers_[static_cast<std::size_t>(m)].c_out != c)
        fail(ErrorKind::validation, "layers sharing selectors ('" + layers_[static_cast<std::size_t>(members.front())].name +
                                        "', '" + layers_[static_cast<std::size_t>(m)].name +
                                        "') have different channel counts");
  }
}

int NetworkGraph::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (layers_[static_cast<std::size_t>(i)].name == name) return i;
  fail(ErrorKind::validation, "no layer named '" + name + "'");
}

int NetworkGraph::group_channels(int g) const { return layer(group_members(g).front()).c_out; }

int NetworkGraph::input_group(int layer_index) const {
  const auto& s = layer(layer_index);
  if (s.inputs.empty()) return -1;
  return channel_group(s.inputs[0]);
}

int NetworkGraph::input_channel_stride(int layer_index) const {
  int cur = layer(layer_index).inputs.empty() ? -1 : layer(layer_index).inputs[0];
  int stride = 1;
  while (cur > 0) {
    const auto& s = layer(cur);
    if (s.quantizable() || s.kind == LayerKind::add) break;
    if (s.kind == LayerKind::flatten) stride *= layer(s.inputs[0]).spatial_out ? s.h_in * s.w_in : 1;
    cur = s.inputs[0];
  }
  return stride;
}

bool NetworkGraph::is_output_group(int g) const { return g >= 0 && g == group_of(output_); }

bool NetworkGraph::has_batchnorm() const {
  return std::any_of(layers_.begin(), layers_.end(), [](const LayerSpec& s) { return s.kind == LayerKind::batchnorm; });
}

NetworkGraph NetworkGraph::from_json(const nlohmann::json& doc) {
  try {
    InputDecl in;
    const auto& ji = doc.at("input");
    in.channels = ji.at("channels").get<int>();
    in.height = ji.at("height").get<int>();
    in.width = ji.at("width").get<int>();
    std::vector<LayerDecl> decls;
    for (const auto& jl : doc.at("layers")) {
      LayerDecl d;
      d.name = jl.at("name").get<std::string>();
      d.kind = parse_layer_kind(jl.at("kind").get<std::string>());
      if (jl.contains("inputs")) d.inputs = jl.at("inputs").get<std::vector<std::string>>();
      d.out_channels = jl.value("out_channels", 0);
      d.kernel = jl.value("kernel", 1);
      d.stride = jl.value("stride", 1);
      d.padding = jl.value("padding", 0);
      d.bn_eps = jl.value("eps", 1e-5);
      decls.push_back(std::move(d));
    }
    return build(in, decls);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("graph description: ") + e.what());
  }
}

nlohmann::json NetworkGraph::to_json() const {
  nlohmann::json doc;
  doc["input"] = {{"channels", input_.channels}, {"height", input_.height}, {"width", input_.width}};
  auto& jl = doc["layers"] = nlohmann::json::array();
  for (int i = 1; i < size(); ++i) {
    const auto& s = layer(i);
    nlohmann::json l = {{"name", s.name}, {"kind", to_string(s.kind)}};
    std::vector<std::string> ins;
    for (int p : s.inputs) ins.push_back(layer(p).name);
    l["inputs"] = ins;
    if (s.kind == LayerKind::conv2d || s.kind == LayerKind::pointwise || s.kind == LayerKind::linear)
      l["out_channels"] = s.c_out;
    if (s.kind == LayerKind::conv2d || s.kind == LayerKind::depthwise2d) {
      l["kernel"] = s.k_x;
      l["stride"] = s.stride;
      l["padding"] = s.padding;
    }
    if (s.kind == LayerKind::pointwise) l["stride"] = s.stride;
    if (s.kind == LayerKind::batchnorm) l["eps"] = s.bn_eps;
    jl.push_back(l);
  }
  auto& jg = doc["selector_groups"] = nlohmann::json::array();
  for (const auto& members : groups_) {
    std::vector<std::string> names;
    for (int m : members) names.push_back(layer(m).name);
    jg.push_back(names);
  }
  return doc;
}

NetworkGraph build_toy_convnet(const ToyConfig& c) {
  if (c.width < 1 || c.in_channels < 1 || c.classes < 1 || c.height < 1 || c.width_px < 1 ||
      c.separable_width < 0)
    fail(ErrorKind::validation, "toy convnet: channel counts and dims must be >= 1");
  if (c.depth < 1 || c.depth % 2 == 0)
    fail(ErrorKind::validation, "toy convnet: depth must be 1 + 2 * residual_blocks");
  const int sep = c.separable_width ? c.separable_width : 2 * c.width;

  std::vector<LayerDecl> d;
  auto conv = [&](const std::string& name, int out, std::vector<std::string> inputs = {}) {
    d.push_back({name, LayerKind::conv2d, std::move(inputs), out, 3, 1, 1});
    if (c.batchnorm) d.push_back({name + "_bn", LayerKind::batchnorm, {}, 0, 1, 1, 0});
  };
  auto relu = [&](const std::string& name, std::vector<std::string> inputs = {}) {
    d.push_back({name, LayerKind::relu, std::move(inputs)});
  };

  conv("conv0", c.width);
  relu("relu0");
  std::string trunk = "relu0";
  const int blocks = (c.depth - 1) / 2;
  for (int b = 0; b < blocks; ++b) {
    const std::string p = "block" + std::to_string(b + 1) + "_";
    conv(p + "conv_a", c.width, {trunk});
    relu(p + "relu_a");
    conv(p + "conv_b", c.width);
    const std::string last = c.batchnorm ? p + "conv_b_bn" : p + "conv_b";
    d.push_back({p + "add", LayerKind::add, {last, trunk}});
    relu(p + "relu_out");
    trunk = p + "relu_out";
  }
  d.push_back({"sep_pw", LayerKind::pointwise, {trunk}, sep, 1, 1, 0});
  relu("sep_pw_relu");
  d.push_back({"sep_dw", LayerKind::depthwise2d, {}, 0, 3, 2, 1});
  relu("sep_dw_relu");
  d.push_back({"pool", LayerKind::pool});
  d.push_back({"flatten", LayerKind::flatten});
  d.push_back({"classifier", LayerKind::linear, {}, c.classes});
  return NetworkGraph::build({c.in_channels, c.height, c.width_px}, d);
}

}  // namespace mixprune
