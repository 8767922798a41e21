#pragma once

// Post-search export: NE16 refinement, integer quantization, zero-channel
// removal, channel reordering, sub-layer splitting and the deploy file.
//
// Deploy file (little-endian):
//   "MXPR" | u16 version | u32 manifest length | manifest JSON
//   | blobs | u32 CRC32 of every preceding byte
// The manifest lists every blob by offset (relative to the first blob byte)
// and length. Weight codes are packed two's complement at the sub-layer's
// bit-width, LSB first, and each sub-layer's code blob is padded with zero
// bits to a whole byte. Ranges and biases are f32 blobs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixprune/cost.hpp"
#include "mixprune/network.hpp"

namespace mixprune {

/// Greedy NE16 refinement. Per selector group, repeatedly applies the single
/// promotion (some channels of one nonzero precision moved to one higher
/// precision) that lowers the discrete NE16 cycle count the most, until no
/// promotion lowers it. Channels are never demoted and pruned channels stay
/// pruned. The result is a fixed point, so refining twice changes nothing.
Assignment ne16_refine(const NetworkGraph& g, const Assignment& a, const SearchSpace& space, const Ne16Params& p);

/// Stable sort of channel indices by descending bit-width: out[k] is the
/// original index of the channel placed at position k.
std::vector<int> reorder_permutation(const std::vector<int>& bits);

/// Integer weights of one quantizable layer. Channel c dequantizes as
/// range[c] * (code / qmax(bits[c])); 0-bit channels have zero codes.
struct QuantizedLayer {
  Shape shape;                      // [C_out, C_in per filter, Ky, Kx] or [C_out, C_in]
  std::vector<int> bits;            // per output channel
  std::vector<std::int32_t> codes;  // numel(shape)
  std::vector<float> range;         // per output channel
  std::vector<float> bias;          // per output channel
  int act_bits = 8;                 // input activation precision
  float clip = 0;                   // input PACT clip

  Index inner() const { return bits.empty() ? 0 : static_cast<Index>(codes.size() / bits.size()); }
  bool operator==(const QuantizedLayer&) const = default;
};

struct QuantizedModel {
  NetworkGraph graph;
  std::vector<QuantizedLayer> layers;  // per graph layer, empty for non-quantizable
  std::vector<int> output_order;       // output position -> original class index
};

/// Quantizes raw weights at the assignment, exactly as fixed-mode forward does.
QuantizedModel quantize_model(const NetworkGraph& g, const Parameters<float>& params,
                              const SelectorState<float>& selectors, const Assignment& a);

/// Removes 0-bit channels from their producers (all members of a group
/// together) and the matching input slices from every consumer. Throws
/// ErrorKind::degenerate when a layer would lose all its channels.
QuantizedModel prune_zero_channels(const QuantizedModel& m);

/// Per selector group, the output permutation applied by reorder_channels.
struct Permutation {
  std::vector<std::vector<int>> group;  // [group][new position] -> old position
};

/// Reorders each group's channels by descending bit-width and permutes
/// consumer inputs to match. The network output is permuted as well;
/// output_order records the original class of each logit.
QuantizedModel reorder_channels(const QuantizedModel& m, Permutation* perm = nullptr);

struct SubLayer {
  int bits = 0;
  int channels = 0;
  std::vector<std::int32_t> codes;
  std::vector<float> range;
  std::vector<float> bias;

  bool operator==(const SubLayer&) const = default;
};

struct DeployLayer {
  std::string name;
  Shape shape;  // weight shape of the whole layer
  int act_bits = 8;
  float clip = 0;
  std::vector<SubLayer> sublayers;  // outputs concatenated in this order

  bool operator==(const DeployLayer&) const = default;
};

struct DeployModel {
  NetworkGraph graph;
  std::vector<DeployLayer> layers;  // one per quantizable layer, in graph order
  std::vector<int> output_order;

  bool operator==(const DeployModel& o) const {
    return graph.to_json() == o.graph.to_json() && layers == o.layers && output_order == o.output_order;
  }
};

/// One sub-layer per run of equal bit-widths. Needs channels sorted by
/// descending precision and no 0-bit channels (prune and reorder first).
DeployModel split_sublayers(const QuantizedModel& m);

/// refine (optional) -> quantize -> prune -> reorder -> split.
DeployModel build_deploy_model(const NetworkGraph& g, const Parameters<float>& params,
                               const SelectorState<float>& selectors, const Assignment& a);

/// Reference inference in double precision. Input is [N, C, H, W]; logits
/// come back as [N, classes] in original class order.
Array<double> run_quantized(const QuantizedModel& m, const Array<float>& input, Index batch);
Array<double> run_deploy(const DeployModel& m, const Array<float>& input, Index batch);

std::vector<std::uint8_t> serialize(const DeployModel& m);
DeployModel deserialize(const std::vector<std::uint8_t>& bytes);
void save_deploy(const DeployModel& m, const std::filesystem::path& path);
DeployModel load_deploy(const std::filesystem::path& path);

/// Packs signed codes at `bits` each, LSB first, zero-padded to whole bytes.
std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits);
std::vector<std::int32_t> unpack_codes(const std::uint8_t* data, std::size_t count, int bits);

struct CostReport {
  std::int64_t weight_bits = 0;
  double size_bytes = 0;
  double bitops = 0;
  std::optional<double> mpic_cycles, mpic_latency_s;
  std::optional<double> ne16_cycles, ne16_latency_s;
  bool degenerate = false;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Costs of a discrete assignment. A column whose hardware description is
/// missing is omitted and noted.
CostReport cost_report(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                       const std::optional<CostLUT>& lut, const HardwareConfig& hw);

}  // namespace mixprune
