#include "mixprune/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

namespace mixprune {

namespace {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  fail(ErrorKind::config, "unknown optimizer '" + s + "' (expected adam|sgd)");
}

const char* to_string(ControlMetric m) { return m == ControlMetric::accuracy ? "accuracy" : "loss"; }

ControlMetric parse_control_metric(const std::string& s) {
  if (s == "accuracy") return ControlMetric::accuracy;
  if (s == "loss") return ControlMetric::loss;
  fail(ErrorKind::config, "unknown control metric '" + s + "' (expected accuracy|loss)");
}

nlohmann::json optimizer_json(const OptimizerConfig& o) {
  return {{"kind", to_string(o.kind)}, {"lr", o.lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j, OptimizerConfig o) {
  if (j.contains("kind")) o.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  return o;
}

Shape batch_shape(const Dataset& d, Index n) { return {n, d.channels, d.height, d.width}; }

Index count_correct(const Var<float>& logits, std::span<const int> labels) {
  const Index n = logits.shape()[0], k = logits.shape()[1];
  Eigen::Map<const RowMatrix<float>> z(logits.value().data(), n, k);
  Index correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    z.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

struct BatchStats {
  double task = 0, cost = 0, total = 0;
  Index correct = 0;
};

using StepFn = std::function<BatchStats(const Array<float>& images, const std::vector<int>& labels, float tau)>;

/// Shared epoch loop with early stopping. `validate` runs after every epoch;
/// `on_best` is called whenever the control metric strictly improves.
struct EpochLoop {
  std::string phase;
  int epochs = 0;
  double lambda = 0;
  bool anneal = false;      // decay the temperature (search only)
  bool stop_early = true;
  StepFn step;
  std::function<Evaluation()> validate;
  std::function<void()> on_best;
};

std::vector<EpochRecord> run_loop(const EpochLoop& loop, const Dataset& train, const TrainConfig& cfg,
                                  std::mt19937_64& rng) {
  std::vector<EpochRecord> history;
  std::vector<double> control;
  std::vector<Index> order(static_cast<std::size_t>(train.count()));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < loop.epochs; ++epoch) {
    const double tau = loop.anneal ? temperature_step(epoch, cfg.temperature) : 0.0;
    std::shuffle(order.begin(), order.end(), rng);
    double task = 0, cost = 0, total = 0;
    Index correct = 0;
    for (std::size_t from = 0; from < order.size(); from += static_cast<std::size_t>(cfg.batch_size)) {
      const auto n = std::min(order.size() - from, static_cast<std::size_t>(cfg.batch_size));
      const std::span<const Index> rows(order.data() + from, n);
      const auto s = loop.step(train.gather(rows), train.gather_labels(rows), static_cast<float>(tau));
      if (!std::isfinite(s.total))
        fail(ErrorKind::divergence, loop.phase + ": non-finite loss at epoch " + std::to_string(epoch));
      task += s.task * static_cast<double>(n);
      cost += s.cost * static_cast<double>(n);
      total += s.total * static_cast<double>(n);
      correct += s.correct;
    }
    const auto count = static_cast<double>(train.count());
    const auto val = loop.validate();
    EpochRecord r;
    r.phase = loop.phase;
    r.epoch = epoch;
    r.lambda = loop.lambda;
    r.task_loss = task / count;
    r.cost = cost / count;
    r.total_loss = total / count;
    r.train_accuracy = static_cast<double>(correct) / count;
    r.val_loss = val.loss;
    r.val_accuracy = val.accuracy;
    r.tau = tau;
    history.push_back(r);

    control.push_back(cfg.control_metric == ControlMetric::accuracy ? val.accuracy : val.loss);
    const bool improved =
        control.size() == 1 ||
        (cfg.control_metric == ControlMetric::accuracy
             ? control.back() > *std::max_element(control.begin(), control.end() - 1)
             : control.back() < *std::min_element(control.begin(), control.end() - 1));
    if (improved && loop.on_best) loop.on_best();
    if (loop.stop_early && early_stop(control, cfg.patience, cfg.control_metric)) break;
  }
  return history;
}

std::span<const float> class_weights_of(const TrainConfig& cfg, const std::vector<float>& w) {
  return cfg.class_weights ? std::span<const float>(w) : std::span<const float>{};
}

/// Applies one optimizer step to every weight, bias and (when bound as a
/// variable) PACT clip.
void step_weights(Optimizer& opt, const NetworkGraph& g, const Bindings<float>& b, ModelState& m, bool clips) {
  opt.begin_step();
  std::size_t slot = 0;
  for (int q : g.quantizable_layers()) {
    auto& lw = m.params.layers[static_cast<std::size_t>(q)];
    opt.update(slot++, lw.weight.data(), b.weight[static_cast<std::size_t>(q)].grad(), true);
    opt.update(slot++, lw.bias.data(), b.bias[static_cast<std::size_t>(q)].grad(), false);
    if (clips) {
      auto& c = m.selectors.clip[static_cast<std::size_t>(q)];
      opt.update(slot++, &c, b.clip[static_cast<std::size_t>(q)].grad(), false);
      c = std::max(c, static_cast<float>(kClipFloor));
    }
  }
}

std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t phase) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(phase)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (std::uint64_t{words[0]} << 32) | words[1];
}

/// Sets each PACT clip to the largest input activation of its layer over the
/// first calibration batch of the training split, under the float model.
void calibrate_clips(const NetworkGraph& g, const Dataset& train, ModelState& m) {
  const Index n = std::min<Index>(train.count(), 256);
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  Tape<float> t;
  auto b = bind_weights(t, g, m.params, false);
  auto x = t.constant(train.gather(rows), batch_shape(train, n));
  std::vector<Var<float>> values;
  forward<float>(g, ForwardMode::floating, b, SearchSpace{}, x, nullptr, nullptr, &values);
  for (int q : g.quantizable_layers()) {
    const float peak = values[static_cast<std::size_t>(g.layer(q).inputs[0])].value().maxCoeff();
    m.selectors.clip[static_cast<std::size_t>(q)] = std::max(peak, static_cast<float>(kClipFloor));
  }
}

}  // namespace

void OptimizerConfig::validate(const char* what) const {
  const std::string w(what);
  if (!(lr > 0)) fail(ErrorKind::config, w + " learning rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) fail(ErrorKind::config, w + " momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) fail(ErrorKind::config, w + " weight decay must be non-negative");
}

void Optimizer::update(std::size_t slot, float* param, const Array<float>& grad, bool decay) {
  if (first_.size() <= slot) {
    first_.resize(slot + 1);
    second_.resize(slot + 1);
  }
  auto& m = first_[slot];
  auto& v = second_[slot];
  if (m.size() != grad.size()) {
    m = Array<float>::Zero(grad.size());
    v = Array<float>::Zero(grad.size());
  }
  Eigen::Map<Array<float>> p(param, grad.size());
  Array<float> g = grad;
  if (decay && config_.weight_decay > 0) g += static_cast<float>(config_.weight_decay) * p;
  const auto lr = static_cast<float>(config_.lr);
  const auto beta1 = static_cast<float>(config_.momentum);
  if (config_.kind == OptimizerKind::sgd) {
    m = beta1 * m + g;
    p -= lr * m;
    return;
  }
  constexpr float beta2 = 0.999f, eps = 1e-8f;
  m = beta1 * m + (1 - beta1) * g;
  v = beta2 * v + (1 - beta2) * g.square();
  const float c1 = 1 - std::pow(beta1, static_cast<float>(step_));
  const float c2 = 1 - std::pow(beta2, static_cast<float>(step_));
  p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
}

void TrainConfig::validate() const {
  if (warmup_epochs < 0 || search_epochs < 0 || finetune_epochs < 0)
    fail(ErrorKind::config, "epoch counts must be non-negative (0 disables a phase)");
  if (batch_size < 1) fail(ErrorKind::config, "batch size must be >= 1");
  if (!(lambda >= 0)) fail(ErrorKind::config, "lambda must be >= 0");
  if (patience < 1) fail(ErrorKind::config, "patience must be >= 1");
  if (!(temperature.initial > 0) || !(temperature.floor > 0))
    fail(ErrorKind::config, "temperatures must be positive");
  if (!(temperature.factor > 0 && temperature.factor <= 1))
    fail(ErrorKind::config, "temperature decay factor must lie in (0, 1]");
  weight_optimizer.validate("weight optimizer");
  selector_optimizer.validate("selector optimizer");
  if (selector_optimizer.kind != OptimizerKind::sgd)
    fail(ErrorKind::config, "selector optimizer must be sgd (momentum SGD)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"warmup_epochs", warmup_epochs},
          {"search_epochs", search_epochs},
          {"finetune_epochs", finetune_epochs},
          {"batch_size", batch_size},
          {"weight_optimizer", optimizer_json(weight_optimizer)},
          {"selector_optimizer", optimizer_json(selector_optimizer)},
          {"lambda", lambda},
          {"sampling", mixprune::to_string(sampling)},
          {"temperature", {{"initial", temperature.initial}, {"factor", temperature.factor}, {"floor", temperature.floor}}},
          {"patience", patience},
          {"control_metric", to_string(control_metric)},
          {"class_weights", class_weights},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.search_epochs = j.value("search_epochs", c.search_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("weight_optimizer")) c.weight_optimizer = optimizer_from_json(j.at("weight_optimizer"), c.weight_optimizer);
    if (j.contains("selector_optimizer"))
      c.selector_optimizer = optimizer_from_json(j.at("selector_optimizer"), c.selector_optimizer);
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("sampling")) c.sampling = parse_sampling_method(j.at("sampling").get<std::string>());
    if (j.contains("temperature")) {
      const auto& t = j.at("temperature");
      c.temperature.initial = t.value("initial", c.temperature.initial);
      c.temperature.factor = t.value("factor", c.temperature.factor);
      c.temperature.floor = t.value("floor", c.temperature.floor);
    }
    c.patience = j.value("patience", c.patience);
    if (j.contains("control_metric")) c.control_metric = parse_control_metric(j.at("control_metric").get<std::string>());
    c.class_weights = j.value("class_weights", c.class_weights);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("invalid training config: ") + e.what());
  }
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"phase", phase},       {"epoch", epoch},
          {"lambda", lambda},     {"task_loss", task_loss},
          {"cost", cost},         {"total_loss", total_loss},
          {"train_accuracy", train_accuracy},
          {"val_loss", val_loss}, {"val_accuracy", val_accuracy},
          {"tau", tau}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.phase = j.at("phase").get<std::string>();
  r.epoch = j.at("epoch").get<int>();
  r.lambda = j.at("lambda").get<double>();
  r.task_loss = j.at("task_loss").get<double>();
  r.cost = j.at("cost").get<double>();
  r.total_loss = j.at("total_loss").get<double>();
  r.train_accuracy = j.at("train_accuracy").get<double>();
  r.val_loss = j.at("val_loss").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.tau = j.at("tau").get<double>();
  return r;
}

bool early_stop(std::span<const double> history, int patience, ControlMetric metric) {
  if (patience < 1) fail(ErrorKind::contract, "patience must be >= 1");
  if (history.empty()) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    const bool better = metric == ControlMetric::accuracy ? history[i] > history[best] : history[i] < history[best];
    if (better) best = i;
  }
  return history.size() - 1 - best >= static_cast<std::size_t>(patience);
}

Evaluation evaluate(const NetworkGraph& g, const SearchSpace& space, const ModelState& m, ForwardMode mode,
                    const Assignment* assignment, const Dataset& data) {
  Assignment discrete;
  if (mode == ForwardMode::search) {
    discrete = m.selectors.discretize(g, space);
    assignment = &discrete;
    mode = ForwardMode::fixed;
  }
  constexpr Index chunk = 256;
  double loss = 0;
  Index correct = 0;
  std::vector<Index> rows;
  for (Index from = 0; from < data.count(); from += chunk) {
    const Index n = std::min(chunk, data.count() - from);
    rows.resize(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), from);
    Tape<float> t;
    auto b = bind_weights(t, g, m.params, false);
    if (mode != ForwardMode::floating) bind_clips(t, g, m.selectors, false, b);
    auto x = t.constant(data.gather(rows), batch_shape(data, n));
    auto logits = forward(g, mode, b, space, x, assignment);
    const auto labels = data.gather_labels(rows);
    loss += static_cast<double>(softmax_cross_entropy(logits, std::span<const int>(labels)).item()) * n;
    correct += count_correct(logits, labels);
  }
  const auto count = static_cast<double>(std::max<Index>(data.count(), 1));
  return {loss / count, static_cast<double>(correct) / count};
}

WarmStart warmup(const NetworkGraph& g, const Splits& data, const TrainConfig& cfg) {
  cfg.validate();
  if (g.has_batchnorm()) fail(ErrorKind::unsupported_topology, "fold batch norm before training");
  ModelState m{Parameters<float>::init(g, cfg.seed), {}};
  WarmStart out;
  if (cfg.warmup_epochs == 0) {
    out.params = std::move(m.params);
    return out;
  }
  const SearchSpace space;
  Optimizer opt(cfg.weight_optimizer);
  const auto cw = data.train.inverse_frequency_weights();
  std::mt19937_64 rng(phase_seed(cfg.seed, 1));
  auto best = m.params;

  EpochLoop loop;
  loop.phase = "warmup";
  loop.epochs = cfg.warmup_epochs;
  loop.step = [&](const Array<float>& images, const std::vector<int>& labels, float) {
    Tape<float> t;
    auto b = bind_weights(t, g, m.params, true);
    auto x = t.constant(images, batch_shape(data.train, static_cast<Index>(labels.size())));
    auto logits = forward(g, ForwardMode::floating, b, space, x);
    auto loss = softmax_cross_entropy(logits, std::span<const int>(labels), class_weights_of(cfg, cw));
    t.backward(loss);
    step_weights(opt, g, b, m, false);
    const double l = loss.item();
    return BatchStats{l, 0, l, count_correct(logits, labels)};
  };
  loop.validate = [&] { return evaluate(g, space, m, ForwardMode::floating, nullptr, data.val); };
  loop.on_best = [&] { best = m.params; };
  out.history = run_loop(loop, data.train, cfg, rng);
  out.params = std::move(best);
  return out;
}

void check_search_space(const SearchSpace& space, const CostModel& cost) {
  if (cost.kind == CostKind::ne16 && space.activations.bits() != std::vector<int>{8})
    fail(ErrorKind::config, "the ne16 cost model requires activation precisions {8}");
}

std::map<std::string, double> cost_summary(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                                           const CostModel& model) {
  std::map<std::string, double> out;
  out["size"] = evaluate_cost(g, a, space, {CostKind::size, {}, {}});
  out["bitops"] = evaluate_cost(g, a, space, {CostKind::bitops, {}, {}});
  if (model.lut) out["mpic"] = evaluate_cost(g, a, space, {CostKind::mpic, model.lut, {}});
  if (model.ne16) out["ne16"] = evaluate_cost(g, a, space, {CostKind::ne16, {}, model.ne16});
  return out;
}

SearchResult search(const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                    const Parameters<float>& warm, const Splits& data, const TrainConfig& cfg) {
  cfg.validate();
  check_search_space(space, cost);
  if (g.has_batchnorm()) fail(ErrorKind::unsupported_topology, "fold batch norm before training");

  ModelState m{warm, SelectorState<float>::init(g, space)};
  calibrate_clips(g, data.train, m);
  // Rescale once so the expected effective weights match the warm weights.
  const float tau0 = static_cast<float>(cfg.temperature.initial);
  std::mt19937_64 unused;
  for (int q : g.quantizable_layers()) {
    const auto& gamma = m.selectors.gamma[static_cast<std::size_t>(g.group_of(q))];
    Array<float> mass(gamma.rows());
    for (Index r = 0; r < gamma.rows(); ++r) {
      const Array<float> row = gamma.row(r).transpose().array();
      const auto method = cfg.sampling == SamplingMethod::softmax ? SamplingMethod::softmax : SamplingMethod::argmax;
      const auto p = sample<float>(row, method, tau0, unused);
      mass(r) = 1 - (space.weights[0] == 0 ? p(0) : 0.0f);
    }
    auto& lw = m.params.layers[static_cast<std::size_t>(q)];
    lw.weight = rescale_weights<float>(lw.weight, gamma.rows(), mass);
    lw.bias /= mass;
  }

  Optimizer wopt(cfg.weight_optimizer), sopt(cfg.selector_optimizer);
  const auto cw = data.train.inverse_frequency_weights();
  std::mt19937_64 rng(phase_seed(cfg.seed, 2));
  const auto lambda = static_cast<float>(cfg.lambda);
  const auto inv_unit = static_cast<float>(1.0 / cost_unit(g, cost.kind));

  EpochLoop loop;
  loop.phase = "search";
  loop.epochs = cfg.search_epochs;
  loop.lambda = cfg.lambda;
  loop.anneal = true;
  loop.stop_early = false;
  loop.step = [&](const Array<float>& images, const std::vector<int>& labels, float tau) {
    Tape<float> t;
    auto b = bind_weights(t, g, m.params, true);
    bind_clips(t, g, m.selectors, true, b);
    std::vector<Var<float>> gamma_vars, delta_vars(static_cast<std::size_t>(g.size()));
    for (const auto& gm : m.selectors.gamma) {
      auto v = t.variable(Eigen::Map<const Array<float>>(gm.data(), gm.size()), Shape{gm.rows(), gm.cols()});
      gamma_vars.push_back(v);
      const Array<float> noise = cfg.sampling == SamplingMethod::hard_gumbel ? gumbel_noise<float>(v.size(), rng)
                                                                              : Array<float>();
      b.gamma_hat.push_back(sample_rows(v, cfg.sampling, tau, &noise));
    }
    b.delta_hat.resize(static_cast<std::size_t>(g.size()));
    for (int q : g.quantizable_layers()) {
      const auto uq = static_cast<std::size_t>(q);
      auto v = t.variable(m.selectors.delta[uq], Shape{m.selectors.delta[uq].size()});
      delta_vars[uq] = v;
      const Array<float> noise = cfg.sampling == SamplingMethod::hard_gumbel ? gumbel_noise<float>(v.size(), rng)
                                                                              : Array<float>();
      b.delta_hat[uq] = sample_rows(v, cfg.sampling, tau, &noise);
    }
    auto x = t.constant(images, batch_shape(data.train, static_cast<Index>(labels.size())));
    auto logits = forward(g, ForwardMode::search, b, space, x);
    auto task = softmax_cross_entropy(logits, std::span<const int>(labels), class_weights_of(cfg, cw));
    auto reg = scale(regularizer(t, g, SampledSelectors<float>{b.gamma_hat, b.delta_hat}, space, cost), inv_unit);
    auto total = task + scale(reg, lambda);
    t.backward(total);

    step_weights(wopt, g, b, m, true);
    sopt.begin_step();
    std::size_t slot = 0;
    for (std::size_t k = 0; k < gamma_vars.size(); ++k)
      sopt.update(slot++, m.selectors.gamma[k].data(), gamma_vars[k].grad(), true);
    for (int q : g.quantizable_layers())
      sopt.update(slot++, m.selectors.delta[static_cast<std::size_t>(q)].data(),
                  delta_vars[static_cast<std::size_t>(q)].grad(), true);
    const double tl = task.item(), c = reg.item();
    return BatchStats{tl, c, tl + cfg.lambda * c, count_correct(logits, labels)};
  };
  loop.validate = [&] { return evaluate(g, space, m, ForwardMode::search, nullptr, data.val); };

  SearchResult out;
  out.history = run_loop(loop, data.train, cfg, rng);
  out.assignment = m.selectors.discretize(g, space);
  if (const int bad = out.assignment.fully_pruned_layer(g); bad >= 0)
    fail(ErrorKind::degenerate, "discretization pruned every channel of layer '" + g.layer(bad).name + "'");
  out.accuracy = evaluate(g, space, m, ForwardMode::fixed, &out.assignment, data.val).accuracy;
  out.discrete_cost = evaluate_cost(g, out.assignment, space, cost);
  out.costs = cost_summary(g, out.assignment, space, cost);
  out.state = std::move(m);
  return out;
}

ModelState finetune(const NetworkGraph& g, const SearchSpace& space, const Assignment& a, ModelState m,
                    const Splits& data, const TrainConfig& cfg, std::vector<EpochRecord>* history) {
  cfg.validate();
  if (const int bad = a.fully_pruned_layer(g); bad >= 0)
    fail(ErrorKind::degenerate, "layer '" + g.layer(bad).name + "' has every channel pruned");
  for (int q : g.quantizable_layers()) {
    auto& lw = m.params.layers[static_cast<std::size_t>(q)];
    const auto& bits = a.channel_bits(g, q);
    const Index inner = lw.weight.size() / static_cast<Index>(bits.size());
    for (std::size_t r = 0; r < bits.size(); ++r)
      if (bits[r] == 0) {
        lw.weight.segment(static_cast<Index>(r) * inner, inner).setZero();
        lw.bias(static_cast<Index>(r)) = 0;
      }
  }
  if (cfg.finetune_epochs == 0) return m;

  Optimizer opt(cfg.weight_optimizer);
  const auto cw = data.train.inverse_frequency_weights();
  std::mt19937_64 rng(phase_seed(cfg.seed, 3));
  auto best = m;

  EpochLoop loop;
  loop.phase = "finetune";
  loop.epochs = cfg.finetune_epochs;
  loop.step = [&](const Array<float>& images, const std::vector<int>& labels, float) {
    Tape<float> t;
    auto b = bind_weights(t, g, m.params, true);
    bind_clips(t, g, m.selectors, true, b);
    auto x = t.constant(images, batch_shape(data.train, static_cast<Index>(labels.size())));
    auto logits = forward(g, ForwardMode::fixed, b, space, x, &a);
    auto loss = softmax_cross_entropy(logits, std::span<const int>(labels), class_weights_of(cfg, cw));
    t.backward(loss);
    step_weights(opt, g, b, m, true);
    const double l = loss.item();
    return BatchStats{l, 0, l, count_correct(logits, labels)};
  };
  loop.validate = [&] { return evaluate(g, space, m, ForwardMode::fixed, &a, data.val); };
  loop.on_best = [&] { best = m; };
  auto h = run_loop(loop, data.train, cfg, rng);
  if (history) history->insert(history->end(), h.begin(), h.end());
  return best;
}

PipelineResult run_pipeline(const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                            const Splits& data, const TrainConfig& cfg, const WarmStart* warm) {
  cfg.validate();
  check_search_space(space, cost);
  PipelineResult out;
  const WarmStart w = warm ? *warm : warmup(g, data, cfg);
  out.warm = w.params;
  out.history = w.history;
  out.warmup_accuracy = evaluate(g, space, {w.params, {}}, ForwardMode::floating, nullptr, data.test).accuracy;
  out.search = search(g, space, cost, w.params, data, cfg);
  out.history.insert(out.history.end(), out.search.history.begin(), out.search.history.end());
  out.final_state = finetune(g, space, out.search.assignment, out.search.state, data, cfg, &out.history);
  out.final_accuracy =
      evaluate(g, space, out.final_state, ForwardMode::fixed, &out.search.assignment, data.test).accuracy;
  return out;
}

nlohmann::json SweepPoint::to_json() const {
  nlohmann::json j = {{"lambda", lambda}, {"seed", seed}, {"ok", ok}};
  if (ok) {
    j["accuracy"] = accuracy;
    j["cost"] = cost;
    j["checkpoint"] = checkpoint;
  } else {
    j["error"] = error;
  }
  return j;
}

std::vector<SweepPoint> pareto_front(const std::vector<SweepPoint>& points) {
  std::vector<SweepPoint> front;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!p.ok) continue;
    bool keep = true;
    for (std::size_t j = 0; j < points.size() && keep; ++j) {
      const auto& q = points[j];
      if (j == i || !q.ok) continue;
      const bool no_worse = q.accuracy >= p.accuracy && q.cost <= p.cost;
      const bool better = q.accuracy > p.accuracy || q.cost < p.cost;
      if (no_worse && (better || j < i)) keep = false;
    }
    if (keep) front.push_back(p);
  }
  return front;
}

SweepResult pareto_sweep(std::vector<double> lambdas, const std::vector<std::uint64_t>& seeds,
                         const NetworkGraph& g, const SearchSpace& space, const CostModel& cost,
                         const Splits& data, const TrainConfig& cfg, const SweepCallback& on_run) {
  std::vector<double> distinct;
  for (double l : lambdas)
    if (std::find(distinct.begin(), distinct.end(), l) == distinct.end()) distinct.push_back(l);
  if (lambdas.size() < 2) fail(ErrorKind::config, "a sweep needs at least 2 lambda values");
  if (seeds.empty()) fail(ErrorKind::config, "a sweep needs at least one seed");
  for (double l : distinct)
    if (!(l >= 0)) fail(ErrorKind::config, "lambda must be >= 0");

  SweepResult out;
  for (auto seed : seeds) {
    auto run_cfg = cfg;
    run_cfg.seed = seed;
    std::optional<WarmStart> warm;
    std::string warm_error;
    try {
      warm = warmup(g, data, run_cfg);
    } catch (const Error& e) {
      warm_error = std::string(to_string(e.kind())) + ": " + e.what();
    }
    for (double l : distinct) {
      SweepPoint p;
      p.lambda = l;
      p.seed = seed;
      if (!warm) {
        p.error = warm_error;
        out.runs.push_back(p);
        continue;
      }
      run_cfg.lambda = l;
      try {
        const auto r = run_pipeline(g, space, cost, data, run_cfg, &*warm);
        p.ok = true;
        p.accuracy = r.final_accuracy;
        p.cost = r.search.discrete_cost;
        if (on_run) p.checkpoint = on_run(p, r);
      } catch (const Error& e) {
        p.ok = false;
        p.error = std::string(to_string(e.kind())) + ": " + e.what();
      }
      out.runs.push_back(p);
    }
  }
  out.front = pareto_front(out.runs);
  return out;
}

}  // namespace mixprune
