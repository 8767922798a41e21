#include "cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mixprune/checkpoint.hpp"
#include "mixprune/data.hpp"
#include "mixprune/error.hpp"
#include "mixprune/export.hpp"
#include "mixprune/trainer.hpp"

namespace mixprune::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct SynthOptions {
  std::string out;
  std::optional<std::string> config;
  std::optional<int> classes, channels, height, width, samples, blobs;
  std::optional<double> noise, blob_sigma, jitter, train_fraction, val_fraction;
  std::optional<std::uint64_t> seed;
};

struct TrainOptions {
  std::optional<std::string> config, out, data, graph, from, cost, lut, hw, sampling, control_metric;
  std::optional<std::string> weight_bits, act_bits, phases, lambdas, seeds;
  std::optional<double> lambda, lr, selector_lr;
  std::optional<int> warmup_epochs, search_epochs, finetune_epochs, batch_size, patience;
  std::optional<std::uint64_t> seed;
  bool class_weights = false;
};

struct ExportOptions {
  std::string checkpoint, out, target = "size";
  std::optional<std::string> hw, lut;
  bool refine = false;
};

struct ReportOptions {
  std::string checkpoint;
  std::optional<std::string> hw, lut, out;
  bool json = false;
};

struct Options {
  SynthOptions synth;
  TrainOptions run, sweep;
  ExportOptions exp;
  ReportOptions report;
};

void add_train_options(CLI::App* c, TrainOptions& t, bool sweep) {
  c->add_option("--config", t.config, "JSON config file; command-line flags override its values");
  c->add_option("--out", t.out, "Output directory (required here or in the config as \"out\")");
  c->add_option("--data", t.data,
                "Dataset directory written by synth-data; without it the synthetic generator runs in memory "
                "with the config's \"synthetic\" parameters");
  c->add_option("--graph", t.graph, "Network graph JSON; default is the toy residual/separable convnet sized to the data");
  c->add_option("--cost", t.cost, "Cost model: size, bitops, mpic or ne16 [default size]");
  c->add_option("--lut", t.lut, "MPIC MACs-per-cycle CSV (p_x,p_w,macs_per_cycle); required for --cost mpic");
  c->add_option("--hw", t.hw, "Hardware config JSON (mpic clock, ne16 parameters)");
  c->add_option("--weight-bits", t.weight_bits, "Candidate weight bit-widths, comma separated, starting with 0 [default 0,2,4,8]");
  c->add_option("--act-bits", t.act_bits, "Candidate activation bit-widths, comma separated [default 2,4,8]");
  c->add_option("--sampling", t.sampling, "Selector sampling: softmax, argmax or hard_gumbel [default softmax]");
  c->add_option("--warmup-epochs", t.warmup_epochs, "Float warmup epochs [default 30]");
  c->add_option("--search-epochs", t.search_epochs, "Search epochs [default 30]");
  c->add_option("--finetune-epochs", t.finetune_epochs, "Fine-tuning epochs [default 15]");
  c->add_option("--batch-size", t.batch_size, "Mini-batch size [default 32]");
  c->add_option("--lr", t.lr, "Weight learning rate (Adam) [default 1e-3]");
  c->add_option("--selector-lr", t.selector_lr, "Selector learning rate (momentum SGD) [default 1e-2]");
  c->add_option("--patience", t.patience, "Early-stopping patience in epochs [default 10]");
  c->add_option("--control-metric", t.control_metric, "Early-stopping metric: accuracy or loss [default accuracy]");
  c->add_flag("--class-weights", t.class_weights, "Weight the task loss by inverse class frequency");
  c->add_option("--seed", t.seed, "Random seed; falls back to the config, then MIXPRUNE_SEED, then 0");
  if (sweep) {
    c->add_option("--lambdas", t.lambdas, "Regularization strengths, comma separated (at least 2)");
    c->add_option("--seeds", t.seeds, "Seeds to run for every lambda, comma separated [default: --seed]");
  } else {
    c->add_option("--lambda", t.lambda, "Regularization strength (>= 0) [default 0]");
    c->add_option("--phases", t.phases, "Phases to run, comma separated from warmup,search,finetune [default all]");
    c->add_option("--from", t.from, "Checkpoint directory to start from when earlier phases are skipped");
  }
}

void build_app(CLI::App& app, Options& o) {
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  auto* s = app.add_subcommand("synth-data", "Generate the synthetic class-blob dataset as train/val/test files");
  s->add_option("--out", o.synth.out, "Output directory for train.mxds, val.mxds, test.mxds and dataset.json")->required();
  s->add_option("--config", o.synth.config, "JSON file with generator parameters (keys as in dataset.json)");
  s->add_option("--classes", o.synth.classes, "Number of classes, at least 2 [default 4]");
  s->add_option("--channels", o.synth.channels, "Image channels [default 1]");
  s->add_option("--height", o.synth.height, "Image height in pixels [default 16]");
  s->add_option("--width", o.synth.width, "Image width in pixels [default 16]");
  s->add_option("--samples", o.synth.samples, "Total number of samples [default 2000]");
  s->add_option("--noise", o.synth.noise, "Standard deviation of the pixel noise [default 0.3]");
  s->add_option("--blobs", o.synth.blobs, "Gaussian blobs per class [default 3]");
  s->add_option("--blob-sigma", o.synth.blob_sigma, "Blob radius (Gaussian sigma, pixels) [default 2]");
  s->add_option("--jitter", o.synth.jitter, "Maximum blob centre jitter in pixels [default 1.5]");
  s->add_option("--train-fraction", o.synth.train_fraction, "Training share of the samples [default 0.66]");
  s->add_option("--val-fraction", o.synth.val_fraction, "Validation share of the samples [default 0.17]");
  s->add_option("--seed", o.synth.seed, "Generator seed; falls back to the config, then MIXPRUNE_SEED, then 7");

  add_train_options(app.add_subcommand("run", "Run warmup, search and fine-tuning, writing a checkpoint per phase"),
                    o.run, false);
  add_train_options(app.add_subcommand("sweep", "Run the pipeline for several lambdas and keep the Pareto front"),
                    o.sweep, true);

  auto* e = app.add_subcommand("export", "Prune, reorder and split a searched model into a deploy file");
  e->add_option("--checkpoint", o.exp.checkpoint, "Checkpoint directory holding a discrete assignment")->required();
  e->add_option("--out", o.exp.out, "Output directory for model.mxpr and report.json")->required();
  e->add_option("--target", o.exp.target, "Cost model reported as the target: size, bitops, mpic or ne16 [default size]");
  e->add_flag("--refine", o.exp.refine, "Apply NE16 channel-group refinement before export (needs --target ne16)");
  e->add_option("--hw", o.exp.hw, "Hardware config JSON (mpic clock, ne16 parameters)");
  e->add_option("--lut", o.exp.lut, "MPIC MACs-per-cycle CSV; adds MPIC columns to the report");

  auto* r = app.add_subcommand("report", "Print size, bitops, MPIC and NE16 costs of a checkpoint's assignment");
  r->add_option("--checkpoint", o.report.checkpoint, "Checkpoint directory holding a discrete assignment")->required();
  r->add_option("--hw", o.report.hw, "Hardware config JSON; missing sections are omitted from the report");
  r->add_option("--lut", o.report.lut, "MPIC MACs-per-cycle CSV");
  r->add_flag("--json", o.report.json, "Print JSON instead of the text table");
  r->add_option("--out", o.report.out, "Write the report to this file instead of stdout");
}

// --- helpers -----------------------------------------------------------------

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, "cannot parse '" + path + "': " + e.what());
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) fail(ErrorKind::config, std::string("invalid ") + what + " '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) fail(ErrorKind::config, std::string("empty ") + what + " list");
  return out;
}

template <typename T>
std::vector<T> list_from(const std::optional<std::string>& flag, const json& conf, const char* key, const char* what) {
  if (flag) return parse_list<T>(*flag, what);
  if (!conf.contains(key)) return {};
  const auto& j = conf.at(key);
  try {
    if (j.is_string()) return parse_list<T>(j.get<std::string>(), what);
    return j.get<std::vector<T>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("invalid \"") + key + "\": " + e.what());
  }
}

std::optional<std::string> string_from(const std::optional<std::string>& flag, const json& conf, const char* key) {
  if (flag) return flag;
  if (conf.contains(key) && conf.at(key).is_string()) return conf.at(key).get<std::string>();
  return std::nullopt;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const json& conf, const char* key,
                           std::uint64_t fallback) {
  if (flag) return *flag;
  if (conf.contains(key)) return conf.at(key).get<std::uint64_t>();
  if (const char* env = std::getenv("MIXPRUNE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::config, std::string("MIXPRUNE_SEED is not a non-negative integer: '") + env + "'");
  }
  return fallback;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorKind::io, "cannot create '" + p.string() + "': " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write '" + p.string() + "'");
  out << text;
  if (!out) fail(ErrorKind::io, "failed writing '" + p.string() + "'");
}

std::string number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

json synthetic_json(const SyntheticSpec& s) {
  return {{"classes", s.classes},       {"channels", s.channels},
          {"height", s.height},         {"width", s.width},
          {"samples", s.samples},       {"noise", s.noise},
          {"blobs", s.blobs},           {"blob_sigma", s.blob_sigma},
          {"jitter", s.jitter},         {"train_fraction", s.train_fraction},
          {"val_fraction", s.val_fraction}, {"seed", s.seed}};
}

SyntheticSpec synthetic_from_json(const json& j, SyntheticSpec s) {
  try {
    s.classes = j.value("classes", s.classes);
    s.channels = j.value("channels", s.channels);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.samples = j.value("samples", s.samples);
    s.noise = j.value("noise", s.noise);
    s.blobs = j.value("blobs", s.blobs);
    s.blob_sigma = j.value("blob_sigma", s.blob_sigma);
    s.jitter = j.value("jitter", s.jitter);
    s.train_fraction = j.value("train_fraction", s.train_fraction);
    s.val_fraction = j.value("val_fraction", s.val_fraction);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("invalid synthetic dataset parameters: ") + e.what());
  }
  return s;
}

Splits load_splits(const fs::path& dir) {
  Splits s{load_dataset((dir / "train.mxds").string()), load_dataset((dir / "val.mxds").string()),
           load_dataset((dir / "test.mxds").string())};
  for (const auto* d : {&s.val, &s.test})
    if (d->channels != s.train.channels || d->height != s.train.height || d->width != s.train.width ||
        d->classes != s.train.classes)
      fail(ErrorKind::load, "dataset splits in '" + dir.string() + "' disagree on dimensions");
  return s;
}

// --- synth-data --------------------------------------------------------------

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  const json conf = o.config ? read_json(*o.config) : json::object();
  auto spec = synthetic_from_json(conf, SyntheticSpec{});
  if (o.classes) spec.classes = *o.classes;
  if (o.channels) spec.channels = *o.channels;
  if (o.height) spec.height = *o.height;
  if (o.width) spec.width = *o.width;
  if (o.samples) spec.samples = *o.samples;
  if (o.noise) spec.noise = *o.noise;
  if (o.blobs) spec.blobs = *o.blobs;
  if (o.blob_sigma) spec.blob_sigma = *o.blob_sigma;
  if (o.jitter) spec.jitter = *o.jitter;
  if (o.train_fraction) spec.train_fraction = *o.train_fraction;
  if (o.val_fraction) spec.val_fraction = *o.val_fraction;
  spec.seed = resolve_seed(o.seed, conf, "seed", SyntheticSpec{}.seed);

  const auto splits = synthesize(spec);
  const fs::path dir(o.out);
  ensure_dir(dir);
  save_dataset(splits.train, (dir / "train.mxds").string());
  save_dataset(splits.val, (dir / "val.mxds").string());
  save_dataset(splits.test, (dir / "test.mxds").string());
  write_text(dir / "dataset.json", synthetic_json(spec).dump(2) + "\n");
  out << "wrote " << splits.train.count() << "/" << splits.val.count() << "/" << splits.test.count()
      << " train/val/test samples to " << dir.string() << "\n";
  return 0;
}

// --- run / sweep -------------------------------------------------------------

struct Setup {
  json conf;
  fs::path out;
  Splits data;
  NetworkGraph graph;
  bool graph_given = false;
  SearchSpace space;
  HardwareConfig hw;
  std::optional<CostLUT> lut;
  CostModel cost;
  TrainConfig cfg;
};

Setup prepare(const TrainOptions& t) {
  Setup s;
  s.conf = t.config ? read_json(*t.config) : json::object();
  const auto& conf = s.conf;

  const auto out = string_from(t.out, conf, "out");
  if (!out) fail(ErrorKind::config, "an output directory is required (--out or \"out\" in the config)");
  s.out = *out;

  if (const auto data = string_from(t.data, conf, "data")) {
    s.data = load_splits(*data);
  } else {
    auto spec = synthetic_from_json(conf.value("synthetic", json::object()), SyntheticSpec{});
    s.data = synthesize(spec);
  }

  if (conf.contains("space")) s.space = search_space_from_json(conf.at("space"));
  if (const auto w = list_from<int>(t.weight_bits, conf, "weight_bits", "weight bit-width"); !w.empty())
    s.space.weights = PrecisionSet::weights(w);
  if (const auto a = list_from<int>(t.act_bits, conf, "act_bits", "activation bit-width"); !a.empty())
    s.space.activations = PrecisionSet::activations(a);

  if (t.graph) {
    s.graph = NetworkGraph::from_json(read_json(*t.graph));
    s.graph_given = true;
  } else if (conf.contains("graph")) {
    const auto& jg = conf.at("graph");
    s.graph = NetworkGraph::from_json(jg.is_string() ? read_json(jg.get<std::string>()) : jg);
    s.graph_given = true;
  } else {
    ToyConfig tc;
    tc.in_channels = s.data.train.channels;
    tc.height = s.data.train.height;
    tc.width_px = s.data.train.width;
    tc.classes = s.data.train.classes;
    s.graph = build_toy_convnet(tc);
  }

  if (const auto hw = string_from(t.hw, conf, "hw")) s.hw = HardwareConfig::load(*hw);
  if (const auto lut = string_from(t.lut, conf, "lut")) s.lut = CostLUT::load(*lut, s.space);
  s.cost.kind = parse_cost_kind(string_from(t.cost, conf, "cost").value_or("size"));
  if (s.cost.kind == CostKind::mpic) {
    if (!s.lut) fail(ErrorKind::config, "--cost mpic needs a MACs-per-cycle table (--lut)");
    s.cost.lut = s.lut;
  }
  if (s.cost.kind == CostKind::ne16) s.cost.ne16 = s.hw.ne16.value_or(Ne16Params{});

  auto& c = s.cfg;
  c = TrainConfig::from_json(conf.value("train", json::object()));
  if (t.lambda) c.lambda = *t.lambda;
  if (t.lr) c.weight_optimizer.lr = *t.lr;
  if (t.selector_lr) c.selector_optimizer.lr = *t.selector_lr;
  if (t.warmup_epochs) c.warmup_epochs = *t.warmup_epochs;
  if (t.search_epochs) c.search_epochs = *t.search_epochs;
  if (t.finetune_epochs) c.finetune_epochs = *t.finetune_epochs;
  if (t.batch_size) c.batch_size = *t.batch_size;
  if (t.patience) c.patience = *t.patience;
  if (t.sampling) c.sampling = parse_sampling_method(*t.sampling);
  if (t.control_metric) c = TrainConfig::from_json({{"control_metric", *t.control_metric}}, c);
  if (t.class_weights) c.class_weights = true;
  json seed_conf = json::object();
  if (conf.contains("seed"))
    seed_conf["seed"] = conf.at("seed");
  else if (const auto tj = conf.value("train", json::object()); tj.contains("seed"))
    seed_conf["seed"] = tj.at("seed");
  c.seed = resolve_seed(t.seed, seed_conf, "seed", 0);
  c.validate();
  check_search_space(s.space, s.cost);
  return s;
}

json accuracy_metrics(double val, double test) { return {{"val_accuracy", val}, {"test_accuracy", test}}; }

void write_report(const Setup& s, const Assignment& a, const fs::path& path, json extra) {
  auto r = cost_report(s.graph, a, s.space, s.lut, s.hw).to_json();
  r.update(extra);
  write_text(path, r.dump(2) + "\n");
}

int cmd_run(const TrainOptions& t, std::ostream& out) {
  auto s = prepare(t);
  auto& cfg = s.cfg;

  std::vector<std::string> phases = list_from<std::string>(t.phases, s.conf, "phases", "phase");
  if (phases.empty()) phases = {"warmup", "search", "finetune"};
  bool want[3] = {false, false, false};
  const char* names[3] = {"warmup", "search", "finetune"};
  for (const auto& p : phases) {
    const auto it = std::find(names, names + 3, p);
    if (it == names + 3) fail(ErrorKind::config, "unknown phase '" + p + "' (expected warmup, search, finetune)");
    want[it - names] = true;
  }
  const int epochs[3] = {cfg.warmup_epochs, cfg.search_epochs, cfg.finetune_epochs};
  for (int i = 0; i < 3; ++i)
    if (want[i] && epochs[i] < 1) fail(ErrorKind::config, std::string(names[i]) + " is enabled but has 0 epochs");

  std::optional<Checkpoint> from;
  if (const auto f = string_from(t.from, s.conf, "from")) {
    from = load_checkpoint(*f);
    if (s.graph_given && from->graph.to_json() != s.graph.to_json())
      fail(ErrorKind::config, "--graph differs from the graph stored in the --from checkpoint");
    s.graph = from->graph;
    s.space = from->space;
    check_search_space(s.space, s.cost);
  }
  const auto& g = s.graph;

  std::optional<Parameters<float>> warm;
  std::optional<ModelState> state;
  std::optional<Assignment> assignment;
  if (from) {
    warm = from->params;
    if (from->selectors && from->assignment) {
      state = ModelState{from->params, *from->selectors};
      assignment = from->assignment;
    }
  }
  if (want[1] && !want[0] && !warm)
    fail(ErrorKind::config, "the search phase needs warmup weights: add warmup to --phases or pass --from");
  if (want[2] && !want[1] && !state)
    fail(ErrorKind::config, "the finetune phase needs a searched model: add search to --phases or pass --from "
                            "with a search checkpoint");

  ensure_dir(s.out);
  std::vector<EpochRecord> history;
  Checkpoint ck{"", g, s.space, {}, std::nullopt, std::nullopt, cfg, json::object()};
  double last_test = 0;

  if (want[0]) {
    const auto w = warmup(g, s.data, cfg);
    history.insert(history.end(), w.history.begin(), w.history.end());
    warm = w.params;
    const ModelState m{w.params, {}};
    const auto val = evaluate(g, s.space, m, ForwardMode::floating, nullptr, s.data.val).accuracy;
    last_test = evaluate(g, s.space, m, ForwardMode::floating, nullptr, s.data.test).accuracy;
    ck.phase = "warmup";
    ck.params = w.params;
    ck.metrics = accuracy_metrics(val, last_test);
    save_checkpoint(ck, s.out / "warmup");
    out << "warmup: val " << val << " test " << last_test << "\n";
  }
  if (want[1]) {
    auto r = search(g, s.space, s.cost, *warm, s.data, cfg);
    history.insert(history.end(), r.history.begin(), r.history.end());
    state = r.state;
    assignment = r.assignment;
    ck.phase = "search";
    ck.params = r.state.params;
    ck.selectors = r.state.selectors;
    ck.assignment = r.assignment;
    ck.metrics = {{"val_accuracy", r.accuracy}, {"discrete_cost", r.discrete_cost}, {"costs", r.costs}};
    save_checkpoint(ck, s.out / "search");
    out << "search: val " << r.accuracy << " " << to_string(s.cost.kind) << " " << number(r.discrete_cost) << "\n";
  }
  if (want[2]) {
    auto m = finetune(g, s.space, *assignment, *state, s.data, cfg, &history);
    const auto val = evaluate(g, s.space, m, ForwardMode::fixed, &*assignment, s.data.val).accuracy;
    last_test = evaluate(g, s.space, m, ForwardMode::fixed, &*assignment, s.data.test).accuracy;
    ck.phase = "finetune";
    ck.params = m.params;
    ck.selectors = m.selectors;
    ck.assignment = assignment;
    ck.metrics = accuracy_metrics(val, last_test);
    ck.metrics["costs"] = cost_summary(g, *assignment, s.space, s.cost);
    save_checkpoint(ck, s.out / "finetune");
    out << "finetune: val " << val << " test " << last_test << "\n";
  }
  write_metrics(history, s.out / "metrics.jsonl");
  if (assignment && (want[1] || want[2]))
    write_report(s, *assignment, s.out / "report.json", {{"phase", ck.phase}, {"test_accuracy", last_test}});
  return 0;
}

int cmd_sweep(const TrainOptions& t, std::ostream& out) {
  auto s = prepare(t);
  const auto lambdas = list_from<double>(t.lambdas, s.conf, "lambdas", "lambda");
  if (lambdas.size() < 2) fail(ErrorKind::config, "a sweep needs at least 2 lambda values (--lambdas)");
  auto seeds = list_from<std::uint64_t>(t.seeds, s.conf, "seeds", "seed");
  if (seeds.empty()) seeds = {s.cfg.seed};
  for (int e : {s.cfg.warmup_epochs, s.cfg.search_epochs, s.cfg.finetune_epochs})
    if (e < 1) fail(ErrorKind::config, "every phase of a sweep needs at least 1 epoch");

  ensure_dir(s.out / "runs");
  const auto on_run = [&](const SweepPoint& p, const PipelineResult& r) {
    const std::string name = "seed" + std::to_string(p.seed) + "_lambda" + number(p.lambda);
    const auto dir = s.out / "runs" / name;
    auto cfg = s.cfg;
    cfg.seed = p.seed;
    cfg.lambda = p.lambda;
    Checkpoint ck{"finetune", s.graph, s.space, r.final_state.params, r.final_state.selectors, r.search.assignment,
                  cfg, {{"test_accuracy", r.final_accuracy},
                        {"warmup_test_accuracy", r.warmup_accuracy},
                        {"discrete_cost", r.search.discrete_cost},
                        {"costs", r.search.costs}}};
    save_checkpoint(ck, dir);
    write_metrics(r.history, dir / "metrics.jsonl");
    out << "lambda " << number(p.lambda) << " seed " << p.seed << ": accuracy " << r.final_accuracy << " "
        << to_string(s.cost.kind) << " " << number(r.search.discrete_cost) << "\n";
    return (fs::path("runs") / name).string();
  };
  const auto result = pareto_sweep(lambdas, seeds, s.graph, s.space, s.cost, s.data, s.cfg, on_run);

  json runs = json::array(), front = json::array();
  for (const auto& p : result.runs) runs.push_back(p.to_json());
  for (const auto& p : result.front) front.push_back(p.to_json());
  write_text(s.out / "sweep.json",
             json{{"cost", to_string(s.cost.kind)}, {"runs", runs}, {"front", front}}.dump(2) + "\n");
  auto csv = [](const std::vector<SweepPoint>& pts, bool all) {
    std::string text = all ? "lambda,seed,ok,accuracy,cost,checkpoint\n" : "lambda,accuracy,cost,checkpoint\n";
    for (const auto& p : pts) {
      text += number(p.lambda) + ",";
      if (all) text += std::to_string(p.seed) + "," + (p.ok ? "1" : "0") + ",";
      text += number(p.accuracy) + "," + number(p.cost) + "," + p.checkpoint + "\n";
    }
    return text;
  };
  write_text(s.out / "front.csv", csv(result.front, false));
  write_text(s.out / "runs.csv", csv(result.runs, true));
  int failed = 0;
  for (const auto& p : result.runs)
    if (!p.ok) {
      ++failed;
      out << "lambda " << number(p.lambda) << " seed " << p.seed << " failed: " << p.error << "\n";
    }
  out << result.front.size() << " Pareto points, " << failed << " failed runs\n";
  return 0;
}

// --- export / report ---------------------------------------------------------

Checkpoint discrete_checkpoint(const std::string& dir) {
  auto ck = load_checkpoint(dir);
  if (!ck.assignment) fail(ErrorKind::config, "checkpoint '" + dir + "' holds no discrete assignment");
  return ck;
}

int cmd_export(const ExportOptions& o, std::ostream& out) {
  const auto ck = discrete_checkpoint(o.checkpoint);
  if (!ck.selectors) fail(ErrorKind::config, "checkpoint '" + o.checkpoint + "' holds no activation clips");
  const auto& g = ck.graph;
  if (const int bad = ck.assignment->fully_pruned_layer(g); bad >= 0)
    fail(ErrorKind::degenerate, "cannot export: layer '" + g.layer(bad).name + "' has every channel pruned");
  const HardwareConfig hw = o.hw ? HardwareConfig::load(*o.hw) : HardwareConfig{};
  const std::optional<CostLUT> lut = o.lut ? std::optional(CostLUT::load(*o.lut, ck.space)) : std::nullopt;
  const auto target = parse_cost_kind(o.target);
  if (target == CostKind::mpic && !lut) fail(ErrorKind::config, "--target mpic needs --lut");
  if (o.refine && target != CostKind::ne16) fail(ErrorKind::config, "--refine applies to --target ne16 only");

  auto a = *ck.assignment;
  json extra = {{"target", o.target}};
  HardwareConfig report_hw = hw;
  if (target == CostKind::ne16) {
    for (int q : g.quantizable_layers())
      if (a.act_bits[static_cast<std::size_t>(q)] != 8)
        fail(ErrorKind::config, "ne16 runs 8-bit activations only; layer '" + g.layer(q).name + "' uses " +
                                    std::to_string(a.act_bits[static_cast<std::size_t>(q)]));
    const auto p = hw.ne16.value_or(Ne16Params{});
    report_hw.ne16 = p;
    const double before = evaluate_cost(g, a, ck.space, {CostKind::ne16, {}, p});
    if (o.refine) {
      a = ne16_refine(g, a, ck.space, p);
      const double after = evaluate_cost(g, a, ck.space, {CostKind::ne16, {}, p});
      extra["refine"] = {{"cycles_before", before}, {"cycles_after", after}};
      out << "ne16 refinement: " << number(before) << " -> " << number(after) << " cycles\n";
    }
  }

  const auto model = build_deploy_model(g, ck.params, *ck.selectors, a);
  const fs::path dir(o.out);
  ensure_dir(dir);
  save_deploy(model, dir / "model.mxpr");
  extra["deploy_file_bytes"] = fs::file_size(dir / "model.mxpr");
  extra["assignment"] = a.to_json(g);
  const auto report = cost_report(g, a, ck.space, lut, report_hw);
  auto j = report.to_json();
  j.update(extra);
  write_text(dir / "report.json", j.dump(2) + "\n");
  out << report.to_text() << "deploy file       " << (dir / "model.mxpr").string() << " ("
      << extra["deploy_file_bytes"].get<std::uintmax_t>() << " bytes)\n";
  return 0;
}

int cmd_report(const ReportOptions& o, std::ostream& out) {
  const auto ck = discrete_checkpoint(o.checkpoint);
  const HardwareConfig hw = o.hw ? HardwareConfig::load(*o.hw) : HardwareConfig{};
  const std::optional<CostLUT> lut = o.lut ? std::optional(CostLUT::load(*o.lut, ck.space)) : std::nullopt;
  const auto r = cost_report(ck.graph, *ck.assignment, ck.space, lut, hw);
  const std::string text = o.json ? r.to_json().dump(2) + "\n" : r.to_text();
  if (o.out)
    write_text(*o.out, text);
  else
    out << text;
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::validation:
    case ErrorKind::load:
      return 2;
    default:
      return 3;
  }
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint mixed-precision quantization and channel pruning", "mixprune"};
  Options o;
  build_app(app, o);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, "config", e.what());
    return 2;
  }
  try {
    if (app.got_subcommand("synth-data")) return cmd_synth(o.synth, out);
    if (app.got_subcommand("run")) return cmd_run(o.run, out);
    if (app.got_subcommand("sweep")) return cmd_sweep(o.sweep, out);
    if (app.got_subcommand("export")) return cmd_export(o.exp, out);
    if (app.got_subcommand("report")) return cmd_report(o.report, out);
  } catch (const Error& e) {
    report_error(err, to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    report_error(err, "config", e.what());
    return 2;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 3;
  }
  return 2;
}

std::string help(const std::string& command) {
  CLI::App app{"Joint mixed-precision quantization and channel pruning", "mixprune"};
  Options o;
  build_app(app, o);
  return command.empty() ? app.help() : app.get_subcommand(command)->help();
}

std::map<std::string, std::vector<std::string>> option_names() {
  CLI::App app{"", "mixprune"};
  Options o;
  build_app(app, o);
  std::map<std::string, std::vector<std::string>> out;
  for (const auto* sub : app.get_subcommands({}))
    for (const auto* opt : sub->get_options())
      if (opt->get_name() != "--help") out[sub->get_name()].push_back(opt->get_name());
  return out;
}

}  // namespace mixprune::cli
