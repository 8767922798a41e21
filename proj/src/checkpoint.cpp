#include "mixprune/checkpoint.hpp"

#include <bit>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>

#include "mixprune/error.hpp"

namespace mixprune {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

constexpr const char* kFormat = "mixprune-checkpoint";

std::string file_name(std::size_t index, const std::string& name) {
  std::string safe;
  for (char c : name) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  char prefix[16];
  std::snprintf(prefix, sizeof prefix, "%03zu_", index);
  return prefix + safe + ".f32";
}

// Collects named tensors in a fixed order for writing.
class TensorWriter {
 public:
  explicit TensorWriter(fs::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, const float* data, Index n, std::vector<Index> shape) {
    const auto file = file_name(index_.size(), name);
    std::ofstream out(dir_ / file, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write '" + (dir_ / file).string() + "'");
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
    if (!out) fail(ErrorKind::io, "failed writing '" + (dir_ / file).string() + "'");
    index_.push_back({{"name", name}, {"file", file}, {"shape", shape}, {"count", n}, {"dtype", "f32le"}});
  }
  void add(const std::string& name, const Array<float>& a, std::vector<Index> shape) {
    add(name, a.data(), a.size(), std::move(shape));
  }

  nlohmann::json index() const { return index_; }

 private:
  fs::path dir_;
  nlohmann::json index_ = nlohmann::json::array();
};

class TensorReader {
 public:
  TensorReader(fs::path dir, const nlohmann::json& index) : dir_(std::move(dir)) {
    for (const auto& t : index) entries_[t.at("name").get<std::string>()] = t;
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  Array<float> read(const std::string& name, Index expected) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) fail(ErrorKind::load, "checkpoint is missing tensor '" + name + "'");
    const auto n = it->second.at("count").get<Index>();
    if (n != expected)
      fail(ErrorKind::load, "tensor '" + name + "' has " + std::to_string(n) + " values, expected " +
                                std::to_string(expected));
    const auto path = dir_ / it->second.at("file").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::load, "cannot open tensor file '" + path.string() + "'");
    Array<float> a(n);
    if (!in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * 4)) || in.peek() != EOF)
      fail(ErrorKind::load, "tensor file '" + path.string() + "' has the wrong size");
    return a;
  }

 private:
  fs::path dir_;
  std::map<std::string, nlohmann::json> entries_;
};

void check_assignment(const NetworkGraph& g, const SearchSpace& space, const Assignment& a) {
  for (const auto& bits : a.group_bits)
    for (int b : bits)
      if (!space.weights.contains(b)) fail(ErrorKind::load, "assignment uses weight bits " + std::to_string(b));
  for (int q : g.quantizable_layers())
    if (!space.activations.contains(a.act_bits[static_cast<std::size_t>(q)]))
      fail(ErrorKind::load, "assignment uses activation bits " + std::to_string(a.act_bits[static_cast<std::size_t>(q)]));
}

}  // namespace

nlohmann::json search_space_to_json(const SearchSpace& space) {
  return {{"weights", space.weights.bits()}, {"activations", space.activations.bits()}};
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  try {
    if (j.contains("weights")) s.weights = PrecisionSet::weights(j.at("weights").get<std::vector<int>>());
    if (j.contains("activations"))
      s.activations = PrecisionSet::activations(j.at("activations").get<std::vector<int>>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("invalid search space: ") + e.what());
  }
  return s;
}

void save_checkpoint(const Checkpoint& c, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create checkpoint directory '" + dir.string() + "': " + ec.message());

  const auto& g = c.graph;
  TensorWriter w(dir);
  for (int i = 0; i < g.size(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const auto& s = g.layer(i);
    if (s.quantizable()) {
      const auto& lw = c.params.layers.at(ui);
      w.add(s.name + ".weight", lw.weight, lw.shape);
      w.add(s.name + ".bias", lw.bias, {lw.bias.size()});
    } else if (s.kind == LayerKind::batchnorm) {
      const auto& bn = c.params.batchnorm.at(ui);
      w.add(s.name + ".gamma", bn.gamma, {bn.gamma.size()});
      w.add(s.name + ".beta", bn.beta, {bn.beta.size()});
      w.add(s.name + ".mean", bn.mean, {bn.mean.size()});
      w.add(s.name + ".var", bn.var, {bn.var.size()});
    }
  }
  if (c.selectors) {
    const auto& sel = *c.selectors;
    for (std::size_t k = 0; k < sel.gamma.size(); ++k)
      w.add("gamma." + std::to_string(k), sel.gamma[k].data(), sel.gamma[k].size(),
            {sel.gamma[k].rows(), sel.gamma[k].cols()});
    for (int q : g.quantizable_layers()) {
      const auto uq = static_cast<std::size_t>(q);
      w.add(g.layer(q).name + ".delta", sel.delta[uq], {sel.delta[uq].size()});
      w.add(g.layer(q).name + ".clip", &sel.clip[uq], 1, {1});
    }
  }

  nlohmann::json m = {{"format", kFormat},
                      {"version", kCheckpointVersion},
                      {"phase", c.phase},
                      {"graph", g.to_json()},
                      {"space", search_space_to_json(c.space)},
                      {"config", c.config.to_json()},
                      {"metrics", c.metrics},
                      {"tensors", w.index()}};
  if (c.assignment) m["assignment"] = c.assignment->to_json(g);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
  if (!out) fail(ErrorKind::io, "failed writing '" + (dir / "manifest.json").string() + "'");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::load, "no checkpoint manifest at '" + manifest_path.string() + "'");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, "cannot parse '" + manifest_path.string() + "': " + e.what());
  }

  Checkpoint c;
  try {
    if (m.value("format", "") != kFormat) fail(ErrorKind::load, "'" + manifest_path.string() + "' is not a checkpoint");
    if (const int v = m.at("version").get<int>(); v != kCheckpointVersion)
      fail(ErrorKind::load, "unsupported checkpoint version " + std::to_string(v));
    c.phase = m.at("phase").get<std::string>();
    c.graph = NetworkGraph::from_json(m.at("graph"));
    c.space = search_space_from_json(m.at("space"));
    c.config = TrainConfig::from_json(m.at("config"));
    c.metrics = m.at("metrics");
    if (m.contains("assignment")) {
      c.assignment = Assignment::from_json(c.graph, m.at("assignment"));
      check_assignment(c.graph, c.space, *c.assignment);
    }

    const auto& g = c.graph;
    const TensorReader r(dir, m.at("tensors"));
    c.params = Parameters<float>::init(g, 0);
    for (int i = 0; i < g.size(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const auto& s = g.layer(i);
      if (s.quantizable()) {
        auto& lw = c.params.layers[ui];
        lw.weight = r.read(s.name + ".weight", lw.weight.size());
        lw.bias = r.read(s.name + ".bias", lw.bias.size());
      } else if (s.kind == LayerKind::batchnorm) {
        auto& bn = c.params.batchnorm[ui];
        bn.gamma = r.read(s.name + ".gamma", s.c_out);
        bn.beta = r.read(s.name + ".beta", s.c_out);
        bn.mean = r.read(s.name + ".mean", s.c_out);
        bn.var = r.read(s.name + ".var", s.c_out);
      }
    }
    if (r.has("gamma.0")) {
      auto sel = SelectorState<float>::init(g, c.space);
      for (std::size_t k = 0; k < sel.gamma.size(); ++k) {
        auto& gm = sel.gamma[k];
        const auto a = r.read("gamma." + std::to_string(k), gm.size());
        gm = Eigen::Map<const RowMatrix<float>>(a.data(), gm.rows(), gm.cols());
      }
      for (int q : g.quantizable_layers()) {
        const auto uq = static_cast<std::size_t>(q);
        sel.delta[uq] = r.read(g.layer(q).name + ".delta", sel.delta[uq].size());
        sel.clip[uq] = r.read(g.layer(q).name + ".clip", 1)(0);
      }
      c.selectors = std::move(sel);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, "malformed checkpoint manifest '" + manifest_path.string() + "': " + e.what());
  }
  return c;
}

void write_metrics(const std::vector<EpochRecord>& history, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write metrics log '" + path.string() + "'");
  for (const auto& r : history) out << r.to_json().dump() << '\n';
  if (!out) fail(ErrorKind::io, "failed writing metrics log '" + path.string() + "'");
}

std::vector<EpochRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::load, "cannot open metrics log '" + path.string() + "'");
  std::vector<EpochRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(EpochRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::load, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mixprune
