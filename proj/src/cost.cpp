#include "mixprune/cost.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mixprune {

const char* to_string(CostKind k) {
  switch (k) {
    case CostKind::size: return "size";
    case CostKind::bitops: return "bitops";
    case CostKind::mpic: return "mpic";
    case CostKind::ne16: return "ne16";
  }
  return "?";
}

CostKind parse_cost_kind(const std::string& s) {
  if (s == "size") return CostKind::size;
  if (s == "bitops") return CostKind::bitops;
  if (s == "mpic") return CostKind::mpic;
  if (s == "ne16") return CostKind::ne16;
  fail(ErrorKind::config, "unknown cost model '" + s + "' (expected size|bitops|mpic|ne16)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string entry_str(int px, int pw) { return "(" + std::to_string(px) + "," + std::to_string(pw) + ")"; }

}  // namespace

CostLUT CostLUT::parse(std::istream& in, const SearchSpace& space) {
  CostLUT lut;
  std::string line;
  bool header = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(trim(f));
    if (!header) {
      if (fields != std::vector<std::string>{"p_x", "p_w", "macs_per_cycle"})
        fail(ErrorKind::load, "LUT header must be 'p_x,p_w,macs_per_cycle'");
      header = true;
      continue;
    }
    if (fields.size() != 3) fail(ErrorKind::load, "malformed LUT row at line " + std::to_string(line_no));
    int px = 0, pw = 0;
    double v = 0;
    try {
      std::size_t a = 0, b = 0, c = 0;
      px = std::stoi(fields[0], &a);
      pw = std::stoi(fields[1], &b);
      v = std::stod(fields[2], &c);
      if (a != fields[0].size() || b != fields[1].size() || c != fields[2].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      fail(ErrorKind::load, "malformed LUT row at line " + std::to_string(line_no));
    }
    if (!(v > 0)) fail(ErrorKind::load, "non-positive LUT entry " + entry_str(px, pw));
    if (lut.table_.count({px, pw})) fail(ErrorKind::load, "duplicate LUT entry " + entry_str(px, pw));
    lut.table_[{px, pw}] = v;
  }
  if (!header) fail(ErrorKind::load, "empty LUT");
  for (int px : space.activations.bits())
    for (int pw : space.weights.bits())
      if (pw != 0 && !lut.table_.count({px, pw})) fail(ErrorKind::load, "missing LUT entry " + entry_str(px, pw));
  return lut;
}

CostLUT CostLUT::load(const std::string& path, const SearchSpace& space) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open LUT '" + path + "'");
  return parse(in, space);
}

double CostLUT::at(int px, int pw) const {
  auto it = table_.find({px, pw});
  if (it == table_.end()) fail(ErrorKind::load, "missing LUT entry " + entry_str(px, pw));
  return it->second;
}

void Ne16Params::validate() const {
  if (!(streamer_bits_per_cycle > 0) || !(store_bits_per_cycle > 0))
    fail(ErrorKind::config, "NE16 bandwidths must be positive");
  if (pe_rows < 1 || pe_cols < 1 || pe_macs < 1 || channel_group < 1 || act_bits < 1)
    fail(ErrorKind::config, "NE16 array dimensions must be positive");
  if (smooth_c < 0) fail(ErrorKind::config, "NE16 smoothing amplitude must be non-negative");
  if (!(frequency_hz > 0)) fail(ErrorKind::config, "NE16 clock frequency must be positive");
}

HardwareConfig HardwareConfig::parse(const nlohmann::json& j) {
  HardwareConfig hw;
  try {
    if (j.contains("mpic")) {
      const auto& m = j.at("mpic");
      hw.mpic = HwClock{m.value("frequency_hz", HwClock{}.frequency_hz)};
      if (m.contains("power_w")) hw.mpic_power_w = m.at("power_w").get<double>();
      if (!(hw.mpic->frequency_hz > 0)) fail(ErrorKind::config, "mpic frequency must be positive");
    }
    if (j.contains("ne16")) {
      const auto& n = j.at("ne16");
      Ne16Params p;
      p.streamer_bits_per_cycle = n.value("streamer_bits_per_cycle", p.streamer_bits_per_cycle);
      p.store_bits_per_cycle = n.value("store_bits_per_cycle", p.store_bits_per_cycle);
      p.pe_rows = n.value("pe_rows", p.pe_rows);
      p.pe_cols = n.value("pe_cols", p.pe_cols);
      p.pe_macs = n.value("pe_macs", p.pe_macs);
      p.channel_group = n.value("channel_group", p.channel_group);
      p.smooth_c = n.value("smooth_c", p.smooth_c);
      p.frequency_hz = n.value("frequency_hz", p.frequency_hz);
      p.validate();
      hw.ne16 = p;
      if (n.contains("power_w")) hw.ne16_power_w = n.at("power_w").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("invalid hardware config: ") + e.what());
  }
  return hw;
}

HardwareConfig HardwareConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open hardware config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "hardware config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse(j);
}

double cost_unit(const NetworkGraph& g, CostKind kind) {
  std::int64_t total = 0;
  for (int q : g.quantizable_layers()) total += kind == CostKind::size ? g.layer(q).weight_count() : g.layer(q).macs();
  if (total <= 0) fail(ErrorKind::validation, "network has no weights");
  return static_cast<double>(total);
}

double evaluate_cost(const NetworkGraph& g, const Assignment& a, const SearchSpace& space, const CostModel& model) {
  Tape<double> tape;
  const auto s = one_hot_selectors<double>(tape, g, a, space);
  return regularizer(tape, g, s, space, model, GroupCounting::exact).item();
}

std::vector<Ne16LayerCycles> ne16_breakdown(const NetworkGraph& g, const Assignment& a, const SearchSpace& space,
                                            const Ne16Params& p) {
  p.validate();
  auto groups = [&](double x) { return std::ceil(x / p.channel_group - 1e-9); };
  std::vector<Ne16LayerCycles> out;
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    const auto& bits = a.channel_bits(g, q);
    double cin = s.c_in;
    if (s.kind == LayerKind::depthwise2d) {
      cin = 1;
    } else if (const int ig = g.input_group(q); ig >= 0) {
      const auto& in_bits = a.group_bits[static_cast<std::size_t>(ig)];
      cin = static_cast<double>(std::count_if(in_bits.begin(), in_bits.end(), [](int b) { return b != 0; })) *
            g.input_channel_stride(q);
    }
    Ne16LayerCycles c{s.name};
    double alive = 0;
    for (int pw : space.weights.bits()) {
      if (pw == 0) continue;
      const double n = static_cast<double>(std::count(bits.begin(), bits.end(), pw));
      alive += n;
      c.load += n * pw * cin * s.k_x * s.k_y / p.streamer_bits_per_cycle;
    }
    const auto ops = ne16_ops_per_group(s, p);
    if (!ops) {
      c.fallback = true;
      c.load = 0;
      c.compute = static_cast<double>(s.k_x) * s.k_y * s.h_out * s.w_out * cin * alive;
      out.push_back(c);
      continue;
    }
    const double tiles = std::ceil(double(s.h_out) / p.pe_rows) * std::ceil(double(s.w_out) / p.pe_cols);
    const double in_groups = s.kind == LayerKind::depthwise2d ? 1.0 : groups(cin);
    for (int pw : space.weights.bits()) {
      const double n = static_cast<double>(std::count(bits.begin(), bits.end(), pw));
      c.compute += tiles * groups(n) * pw * in_groups * *ops;
    }
    c.store = static_cast<double>(s.h_out) * s.w_out * alive * p.act_bits / p.store_bits_per_cycle;
    out.push_back(c);
  }
  return out;
}

std::int64_t exact_weight_bits(const NetworkGraph& g, const Assignment& a) {
  std::int64_t total = 0;
  for (int q : g.quantizable_layers()) {
    const auto& s = g.layer(q);
    const auto& bits = a.channel_bits(g, q);
    std::int64_t per_channel_inputs = s.c_in;
    if (s.kind == LayerKind::depthwise2d) {
      per_channel_inputs = 1;
    } else if (const int ig = g.input_group(q); ig >= 0) {
      const auto& in_bits = a.group_bits[static_cast<std::size_t>(ig)];
      per_channel_inputs = std::count_if(in_bits.begin(), in_bits.end(), [](int b) { return b != 0; }) *
                           static_cast<std::int64_t>(g.input_channel_stride(q));
    }
    for (int b : bits) total += static_cast<std::int64_t>(b) * per_channel_inputs * s.k_x * s.k_y;
  }
  return total;
}

}  // namespace mixprune
