#pragma once

// Training checkpoints and the per-epoch metrics log.
//
// A checkpoint is a directory:
//   manifest.json   format, version, phase, graph, search space, config,
//                   assignment (optional), metrics, tensor index
//   <name>.f32      one raw little-endian float32 blob per tensor
// Each tensor entry in the manifest names its file, shape and element count.
// Manifests are written with sorted keys and no timestamps, so identical runs
// produce byte-identical checkpoints.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixprune/graph.hpp"
#include "mixprune/network.hpp"
#include "mixprune/trainer.hpp"

namespace mixprune {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string phase;  // warmup, search or finetune
  NetworkGraph graph;
  SearchSpace space;
  Parameters<float> params;
  std::optional<SelectorState<float>> selectors;  // search and finetune only
  std::optional<Assignment> assignment;           // discrete phases only
  TrainConfig config;
  nlohmann::json metrics = nlohmann::json::object();
};

nlohmann::json search_space_to_json(const SearchSpace& space);
SearchSpace search_space_from_json(const nlohmann::json& j);

/// Writes into `dir`, creating it. Existing files of the same names are replaced.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// One JSON object per line.
void write_metrics(const std::vector<EpochRecord>& history, const std::filesystem::path& path);
std::vector<EpochRecord> read_metrics(const std::filesystem::path& path);

}  // namespace mixprune
