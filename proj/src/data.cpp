#include "mixprune/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mixprune/error.hpp"

namespace mixprune {

Array<float> Dataset::gather(std::span<const Index> rows) const {
  const Index n = sample_size();
  Array<float> out(static_cast<Index>(rows.size()) * n);
  for (std::size_t i = 0; i < rows.size(); ++i) out.segment(static_cast<Index>(i) * n, n) = images.segment(rows[i] * n, n);
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const Index> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(labels[static_cast<std::size_t>(r)]);
  return out;
}

std::vector<float> Dataset::inverse_frequency_weights() const {
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (int y : labels) counts[static_cast<std::size_t>(y)] += 1;
  std::vector<float> w(static_cast<std::size_t>(classes), 0.0f);
  for (int k = 0; k < classes; ++k) {
    const auto c = counts[static_cast<std::size_t>(k)];
    if (c > 0) w[static_cast<std::size_t>(k)] = static_cast<float>(static_cast<double>(count()) / (classes * c));
  }
  return w;
}

void SyntheticSpec::validate() const {
  if (classes < 2) fail(ErrorKind::config, "synthetic data needs at least 2 classes");
  if (channels < 1 || height < 1 || width < 1) fail(ErrorKind::config, "image dims must be >= 1");
  if (samples < classes) fail(ErrorKind::config, "need at least one sample per class");
  if (!(noise >= 0)) fail(ErrorKind::config, "noise must be non-negative");
  if (blobs < 1 || !(blob_sigma > 0) || !(jitter >= 0)) fail(ErrorKind::config, "invalid blob parameters");
  if (!(train_fraction > 0) || !(val_fraction >= 0) || train_fraction + val_fraction > 1)
    fail(ErrorKind::config, "split fractions must be positive and sum to at most 1");
}

Splits synthesize(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  struct Blob {
    int channel;
    double y, x;
  };
  std::vector<std::vector<Blob>> protos(static_cast<std::size_t>(spec.classes));
  for (auto& p : protos)
    for (int b = 0; b < spec.blobs; ++b)
      p.push_back({static_cast<int>(uni(rng) * spec.channels) % spec.channels, 2 + uni(rng) * (spec.height - 4),
                   2 + uni(rng) * (spec.width - 4)});

  Dataset all;
  all.channels = spec.channels;
  all.height = spec.height;
  all.width = spec.width;
  all.classes = spec.classes;
  const Index n = all.sample_size();
  all.images = Array<float>::Zero(static_cast<Index>(spec.samples) * n);
  const double inv2s2 = 1.0 / (2 * spec.blob_sigma * spec.blob_sigma);
  for (int i = 0; i < spec.samples; ++i) {
    const int label = i % spec.classes;
    all.labels.push_back(label);
    auto img = all.images.segment(static_cast<Index>(i) * n, n);
    for (const auto& b : protos[static_cast<std::size_t>(label)]) {
      const double cy = b.y + (2 * uni(rng) - 1) * spec.jitter;
      const double cx = b.x + (2 * uni(rng) - 1) * spec.jitter;
      const double amp = 0.7 + 0.6 * uni(rng);
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          img((static_cast<Index>(b.channel) * spec.height + y) * spec.width + x) +=
              static_cast<float>(amp * std::exp(-r2 * inv2s2));
        }
    }
    for (Index k = 0; k < n; ++k) img(k) += static_cast<float>(spec.noise * normal(rng));
  }

  std::vector<Index> order(static_cast<std::size_t>(spec.samples));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<Index>(std::lround(spec.train_fraction * spec.samples));
  const auto n_val = static_cast<Index>(std::lround(spec.val_fraction * spec.samples));
  auto take = [&](Index from, Index count) {
    Dataset d;
    d.channels = all.channels;
    d.height = all.height;
    d.width = all.width;
    d.classes = all.classes;
    const std::span<const Index> rows(order.data() + from, static_cast<std::size_t>(count));
    d.images = all.gather(rows);
    d.labels = all.gather_labels(rows);
    return d;
  };
  return {take(0, n_train), take(n_train, n_val), take(n_train + n_val, spec.samples - n_train - n_val)};
}

namespace {

constexpr char kMagic[4] = {'M', 'X', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail(ErrorKind::load, "truncated dataset file '" + path + "'");
  return v;
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write dataset '" + path + "'");
  out.write(kMagic, 4);
  put<std::uint16_t>(out, kVersion);
  for (auto v : {d.count(), Index{d.channels}, Index{d.height}, Index{d.width}, Index{d.classes}})
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  out.write(reinterpret_cast<const char*>(d.images.data()), static_cast<std::streamsize>(d.images.size() * 4));
  for (int y : d.labels) put<std::int32_t>(out, y);
  if (!out) fail(ErrorKind::io, "failed writing dataset '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::config, "cannot open dataset '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    fail(ErrorKind::load, "'" + path + "' is not a dataset file");
  if (const auto v = get<std::uint16_t>(in, path); v != kVersion)
    fail(ErrorKind::load, "unsupported dataset version " + std::to_string(v));
  Dataset d;
  const auto count = get<std::uint32_t>(in, path);
  d.channels = static_cast<int>(get<std::uint32_t>(in, path));
  d.height = static_cast<int>(get<std::uint32_t>(in, path));
  d.width = static_cast<int>(get<std::uint32_t>(in, path));
  d.classes = static_cast<int>(get<std::uint32_t>(in, path));
  if (d.classes < 2 || d.channels < 1 || d.height < 1 || d.width < 1)
    fail(ErrorKind::load, "invalid dataset header in '" + path + "'");
  d.images.resize(static_cast<Index>(count) * d.sample_size());
  if (!in.read(reinterpret_cast<char*>(d.images.data()), static_cast<std::streamsize>(d.images.size() * 4)))
    fail(ErrorKind::load, "truncated dataset file '" + path + "'");
  d.labels.resize(count);
  for (auto& y : d.labels) {
    y = get<std::int32_t>(in, path);
    if (y < 0 || y >= d.classes) fail(ErrorKind::load, "label out of range in '" + path + "'");
  }
  return d;
}

}  // namespace mixprune
