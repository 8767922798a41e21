#pragma once

// Warmup, search and fine-tuning phases, early stopping and the lambda sweep.
// All training runs in single precision on one thread; a run is a pure
// function of its inputs and seed.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixprune/cost.hpp"
#include "mixprune/data.hpp"
#include "mixprune/mps.hpp"
#include "mixprune/network.hpp"

namespace mixprune {

enum class OptimizerKind { adam, sgd };
enum class ControlMetric { accuracy, loss };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD momentum, Adam beta1
  double weight_decay = 0.0;

  void validate(const char* what) const;
};

/// Adam or momentum SGD over a fixed set of tensors, addressed by slot.
/// Weight decay is L2 added to the gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  /// Starts a new step (advances the Adam bias correction).
  void begin_step() { ++step_; }
  void update(std::size_t slot, float* param, const Array<float>& grad, bool decay);

 private:
  OptimizerConfig config_;
  long step_ = 0;
  std::vector<Array<float>> first_, second_;
};

struct TrainConfig {
  int warmup_epochs = 30;
  int search_epochs = 30;
  int finetune_epochs = 15;
  int batch_size = 32;
  OptimizerConfig weight_optimizer{OptimizerKind::adam, 1e-3, 0.9, 1e-4};
  OptimizerConfig selector_optimizer{OptimizerKind::sgd, 1e-2, 0.9, 0.0};
  double lambda = 0.0;
  SamplingMethod sampling = SamplingMethod::softmax;
  TemperatureSchedule temperature;
  int patience = 10;
  ControlMetric control_metric = ControlMetric::accuracy;
  bool class_weights = false;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Fields present in `j` override those of `base`.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
};

/// One line of the metrics log. total_loss = task_loss + lambda * cost, where
/// cost is the sampled regularizer divided by cost_unit().
struct EpochRecord {
  std::string phase;
  int epoch = 0;
  double lambda = 0;
  double task_loss = 0, cost = 0, total_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0, val_accuracy = 0;
  double tau = 0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

/// True when the last `patience` values brought no strict improvement over
/// the best value before them.
bool early_stop(std::span<const double> history, int patience, ControlMetric metric);

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};

/// Raw parameters, selectors and PACT clips of a network under training.
struct ModelState {
  Parameters<float> params;
  SelectorState<float> selectors;
};

/// Loss and accuracy on `data`. Fixed mode needs `assignment`; search mode
/// evaluates the argmax discretization of the selectors.
Evaluation evaluate(const NetworkGraph& g, const SearchSpace& space, const ModelState& m, ForwardMode mode,
                    const Assignment* assignment, const Dataset& data);

struct WarmStart {
  Parameters<float> params;
  std::vector<EpochRecord> history;
};

/// Float training of the weights only. Zero epochs returns the initialization.
WarmStart warmup(const NetworkGraph& g, const Splits& data, const TrainConfig& cfg);

struct SearchResult {
  ModelState state;
  Assignment assignment;
  std::vector<EpochRecord> history;
  double accuracy = 0;       // validation accuracy at discretization
  double discrete_cost = 0;  // regularizer at the one-hot assignment
  std::map<std::string, double> costs;
};

/// Joint weight and selector training. Weights are rescaled and PACT clips
/// calibrated once on entry; the selectors are discretized by argmax after
/// the full epoch budget (no early stopping, the temperature schedule is
/// tied to the epoch count).
SearchResult search(const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                    const Parameters<float>& warm, const Splits& data, const TrainConfig& cfg);

/// Quantization-aware training at a fixed assignment. Pruned channels are
/// zeroed on entry and receive no updates.
ModelState finetune(const NetworkGraph& g, const SearchSpace& space, const Assignment& a, ModelState state,
                    const Splits& data, const TrainConfig& cfg, std::vector<EpochRecord>* history = nullptr);

/// Every cost model available in `model` (size and bitops always).
std::map<std::string, double> cost_summary(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                                           const CostModel& model);

/// Throws when the space cannot be used with the cost model (NE16 runs 8-bit activations only).
void check_search_space(const SearchSpace& space, const CostModel& cost);

struct PipelineResult {
  Parameters<float> warm;
  SearchResult search;
  ModelState final_state;
  std::vector<EpochRecord> history;
  double warmup_accuracy = 0;  // test split, float model
  double final_accuracy = 0;   // test split, fine-tuned quantized model
};

/// warmup -> search -> finetune. `warm`, when given, replaces the warmup phase.
PipelineResult run_pipeline(const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                            const Splits& data, const TrainConfig& cfg, const WarmStart* warm = nullptr);

struct SweepPoint {
  double lambda = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double accuracy = 0;
  double cost = 0;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

/// Non-dominated successful points under (accuracy up, cost down). Among
/// points with equal accuracy and cost only the first is kept.
std::vector<SweepPoint> pareto_front(const std::vector<SweepPoint>& points);

struct SweepResult {
  std::vector<SweepPoint> runs;
  std::vector<SweepPoint> front;
};

/// Called after each successful run; returns the checkpoint reference to record.
using SweepCallback = std::function<std::string(const SweepPoint&, const PipelineResult&)>;

/// One pipeline per (seed, distinct lambda). Warmup does not depend on lambda,
/// so it runs once per seed and is shared. Failed runs are recorded and the
/// sweep continues.
SweepResult pareto_sweep(std::vector<double> lambdas, const std::vector<std::uint64_t>& seeds,
                         const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                         const Splits& data, const TrainConfig& cfg, const SweepCallback& on_run = {});

}  // namespace mixprune
