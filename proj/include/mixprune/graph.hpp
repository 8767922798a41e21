#pragma once

// Network intermediate representation.
//
// A NetworkGraph is an immutable, topologically ordered list of layers.
// Supported topologies: sequential chains, residual adds (one skip branch
// per add) and depthwise-separable pairs. Quantizable layers are grouped
// into selector groups that share one set of bit-width selectors: the two
// reconvergent producers of every add, and every depthwise layer with the
// layer producing its input channels.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixprune/error.hpp"

namespace mixprune {

enum class LayerKind { input, conv2d, depthwise2d, pointwise, linear, relu, add, pool, flatten, batchnorm };

const char* to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& s);

inline bool is_quantizable(LayerKind k) {
  return k == LayerKind::conv2d || k == LayerKind::depthwise2d || k == LayerKind::pointwise ||
         k == LayerKind::linear;
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::vector<int> inputs;  // producer layer indices

  int c_in = 0;
  int c_out = 0;
  int k_x = 1;
  int k_y = 1;
  int stride = 1;
  int padding = 0;

  // Spatial size of the layer input and output. Rank-2 tensors ([N, C]) use 1x1.
  int h_in = 1, w_in = 1;
  int h_out = 1, w_out = 1;
  bool spatial_out = true;  // false once the tensor is [N, C]

  double bn_eps = 1e-5;

  bool quantizable() const { return is_quantizable(kind); }
  std::int64_t weight_count() const;  // K_x * K_y * C_in(per filter) * C_out
  std::int64_t macs() const;          // per sample, full precision
};

/// Declarative builder input: everything except inferred shapes.
struct LayerDecl {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::vector<std::string> inputs;  // empty -> previous layer
  int out_channels = 0;             // conv2d / pointwise / linear
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  double bn_eps = 1e-5;
};

struct InputDecl {
  int channels = 1;
  int height = 16;
  int width = 16;
};

class NetworkGraph {
 public:
  NetworkGraph() = default;

  /// Validates the declarations, infers shapes and computes selector groups.
  static NetworkGraph build(const InputDecl& input, const std::vector<LayerDecl>& layers);

  static NetworkGraph from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int i) const { return layers_.at(static_cast<std::size_t>(i)); }
  int size() const { return static_cast<int>(layers_.size()); }
  int index_of(const std::string& name) const;

  const std::vector<int>& consumers(int i) const { return consumers_.at(static_cast<std::size_t>(i)); }
  int input_index() const { return 0; }
  int output_index() const { return output_; }

  /// Quantizable layer indices in topological order.
  const std::vector<int>& quantizable_layers() const { return quantizable_; }

  int group_count() const { return static_cast<int>(groups_.size()); }
  const std::vector<int>& group_members(int g) const { return groups_.at(static_cast<std::size_t>(g)); }
  /// Selector group of a quantizable layer (-1 otherwise).
  int group_of(int layer) const { return group_of_.at(static_cast<std::size_t>(layer)); }
  /// Output channels shared by all members of a group.
  int group_channels(int g) const;
  /// Group whose selectors decide which channels of layer i's output tensor
  /// survive (-1 when the channels come straight from the network input).
  int channel_group(int layer) const { return channel_group_.at(static_cast<std::size_t>(layer)); }
  /// Group governing the input channels of quantizable layer i (-1: network input).
  int input_group(int layer) const;
  /// Features per input channel of layer i (H*W after a flatten of a spatial tensor, else 1).
  int input_channel_stride(int layer) const;

  /// True for the group containing the classifier, whose channels are never pruned.
  bool is_output_group(int g) const;

  bool has_batchnorm() const;

 private:
  void infer_and_validate();
  void compute_groups();

  InputDecl input_;
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<int>> consumers_;
  std::vector<int> quantizable_;
  std::vector<std::vector<int>> groups_;
  std::vector<int> group_of_;
  std::vector<int> channel_group_;
  int output_ = 0;
};

struct ToyConfig {
  int depth = 3;           // conv2d layers: stem + residual blocks of 2 convs
  int width = 8;           // channels of the residual trunk
  int separable_width = 0; // channels of the pointwise/depthwise block (0 -> 2*width)
  int in_channels = 1;
  int height = 16;
  int width_px = 16;
  int classes = 4;
  bool batchnorm = false;  // insert inference-mode BN after every conv
};

/// Small residual + depthwise-separable convnet exercising both sharing rules.
NetworkGraph build_toy_convnet(const ToyConfig& config);

}  // namespace mixprune
