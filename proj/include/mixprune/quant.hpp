#pragma once

// Fake quantizers with straight-through gradients.
//
// Weights: symmetric per-channel min-max with 2^n - 1 levels (zero is
// representable), or all-zero for n = 0. Activations: PACT, uniform over
// [0, clip] with a learnable clip.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mixprune/autodiff.hpp"
#include "mixprune/ops.hpp"

namespace mixprune {

inline constexpr double kClipFloor = 1e-3;
inline constexpr double kDefaultClip = 6.0;

/// Ordered candidate bit-widths. A weight set starts with 0 (pruning).
class PrecisionSet {
 public:
  PrecisionSet() = default;

  static PrecisionSet weights(std::vector<int> bits) { return PrecisionSet(std::move(bits), true); }
  static PrecisionSet activations(std::vector<int> bits) { return PrecisionSet(std::move(bits), false); }

  const std::vector<int>& bits() const { return bits_; }
  int size() const { return static_cast<int>(bits_.size()); }
  int operator[](int i) const { return bits_[static_cast<std::size_t>(i)]; }
  int max() const { return bits_.back(); }
  bool for_weights() const { return weights_; }
  bool contains(int b) const { return index_of(b) >= 0; }

  int index_of(int b) const {
    for (int i = 0; i < size(); ++i)
      if (bits_[static_cast<std::size_t>(i)] == b) return i;
    return -1;
  }

 private:
  PrecisionSet(std::vector<int> bits, bool weights) : bits_(std::move(bits)), weights_(weights) {
    if (bits_.empty()) fail(ErrorKind::validation, "empty precision set");
    for (std::size_t i = 1; i < bits_.size(); ++i)
      if (bits_[i] <= bits_[i - 1]) fail(ErrorKind::validation, "precision set must be strictly increasing");
    if (weights_ && bits_.front() != 0)
      fail(ErrorKind::validation, "weight precision set must start with 0 (pruning)");
    if (!weights_ && bits_.front() <= 0)
      fail(ErrorKind::validation, "activation precision set must not contain 0");
    for (int b : bits_)
      if (b > 16) fail(ErrorKind::validation, "bit-widths above 16 are not supported");
  }

  std::vector<int> bits_;
  bool weights_ = true;
};

struct QuantParams {
  double alpha = 0.0;
  double beta = 1.0;
  int bits = 8;

  double levels() const { return std::ldexp(1.0, bits) - 1.0; }
  double step() const { return (beta - alpha) / levels(); }
};

/// Rounds half away from zero.
template <typename Scalar>
inline Scalar round_half_away(Scalar v) {
  return std::round(v);
}

/// Maps T to n-bit unsigned integers: clamp(round((T - alpha) / step), 0, 2^n - 1).
template <typename Derived>
Eigen::Array<std::int64_t, Eigen::Dynamic, 1> affine_quantize(const Eigen::ArrayBase<Derived>& t,
                                                              const QuantParams& p) {
  if (p.bits < 1) fail(ErrorKind::contract, "affine_quantize: n = 0 is handled by the pruning quantizer");
  if (!(p.beta > p.alpha)) fail(ErrorKind::contract, "affine_quantize: beta must exceed alpha");
  const double eps = p.step();
  const double top = p.levels();
  Eigen::Array<std::int64_t, Eigen::Dynamic, 1> out(t.size());
  for (Index i = 0; i < t.size(); ++i) {
    const double q = std::round((static_cast<double>(t(i)) - p.alpha) / eps);
    out(i) = static_cast<std::int64_t>(std::clamp(q, 0.0, top));
  }
  return out;
}

/// Largest representable magnitude of a symmetric n-bit integer with 2^n - 1 levels.
inline int symmetric_qmax(int bits) { return bits <= 0 ? 0 : (1 << (bits - 1)) - 1; }

/// Integer code of w under the symmetric quantizer with range [-range, range].
template <typename Scalar>
inline std::int32_t symmetric_code(Scalar w, Scalar range, int bits) {
  const int qmax = symmetric_qmax(bits);
  if (qmax == 0 || !(range > Scalar(0))) return 0;
  const Scalar q = std::round(w * static_cast<Scalar>(qmax) / range);
  return static_cast<std::int32_t>(std::clamp<Scalar>(q, -qmax, qmax));
}

/// Dequantized value of a symmetric code. Written as range * (q / qmax) so the
/// extreme code maps back to exactly +-range, which makes the quantizer
/// idempotent.
template <typename Scalar>
inline Scalar symmetric_value(std::int32_t code, Scalar range, int bits) {
  const int qmax = symmetric_qmax(bits);
  if (qmax == 0) return Scalar(0);
  return range * (static_cast<Scalar>(code) / static_cast<Scalar>(qmax));
}

/// Fake-quantizes one weight channel symmetrically over [-max|w|, max|w|].
template <typename Scalar>
Array<Scalar> fake_quantize_weights(const Array<Scalar>& w, int bits) {
  if (bits == 0) return Array<Scalar>::Zero(w.size());
  if (bits < 2) fail(ErrorKind::contract, "symmetric weight quantizer needs at least 2 bits");
  const Scalar range = w.size() ? w.abs().maxCoeff() : Scalar(0);
  Array<Scalar> out(w.size());
  for (Index i = 0; i < w.size(); ++i) out(i) = symmetric_value(symmetric_code(w(i), range, bits), range, bits);
  return out;
}

/// Per-output-channel fake quantization of a [C_out, ...] tensor.
template <typename Scalar>
Array<Scalar> fake_quantize_channels(const Array<Scalar>& w, Index rows, std::span<const int> bits) {
  if (static_cast<Index>(bits.size()) != rows) fail(ErrorKind::shape, "one bit-width per channel required");
  const Index inner = rows ? w.size() / rows : 0;
  Array<Scalar> out(w.size());
  for (Index r = 0; r < rows; ++r)
    out.segment(r * inner, inner) = fake_quantize_weights<Scalar>(w.segment(r * inner, inner), bits[r]);
  return out;
}

/// PACT: clamp to [0, clip], quantize uniformly with 2^n - 1 steps, dequantize.
template <typename Scalar>
Array<Scalar> fake_quantize_activations(const Array<Scalar>& x, int bits, Scalar clip) {
  if (!(clip > Scalar(0))) fail(ErrorKind::contract, "PACT clip must be positive");
  if (bits < 1) fail(ErrorKind::contract, "activation bit-width must be positive");
  const Scalar levels = static_cast<Scalar>(std::ldexp(1.0, bits) - 1.0);
  Array<Scalar> out(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar c = std::clamp(x(i), Scalar(0), clip);
    const Scalar q = std::round(c / clip * levels);
    out(i) = clip * (q / levels);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops

/// Per-channel symmetric fake quantization at a single bit-width.
/// Backward: identity for bits >= 2, zero for bits = 0.
template <typename Scalar>
Var<Scalar> fake_quant_weights(const Var<Scalar>& w, int bits) {
  if (w.shape().empty()) fail(ErrorKind::shape, "fake_quant_weights: scalar weight");
  const Index rows = w.shape()[0];
  std::vector<int> per_channel(static_cast<std::size_t>(rows), bits);
  Array<Scalar> out;
  if (w.tape->surrogate_forward)
    out = bits == 0 ? Array<Scalar>::Zero(w.size()) : Array<Scalar>(w.value());
  else
    out = fake_quantize_channels<Scalar>(w.value(), rows, per_channel);
  return w.tape->record(std::move(out), w.shape(), {w},
                        [w = w.id, bits](Tape<Scalar>& t, std::size_t self) {
                          if (bits != 0) detail::accumulate(t, w, t.grad(self));
                        });
}

/// Per-channel fake quantization with a bit-width per output channel.
template <typename Scalar>
Var<Scalar> fake_quant_weights(const Var<Scalar>& w, std::span<const int> bits) {
  const Index rows = w.shape()[0];
  if (static_cast<Index>(bits.size()) != rows) fail(ErrorKind::shape, "one bit-width per channel required");
  const Index inner = w.size() / std::max<Index>(rows, 1);
  Array<Scalar> mask(w.size());
  for (Index r = 0; r < rows; ++r) mask.segment(r * inner, inner).setConstant(bits[r] == 0 ? 0 : 1);
  Array<Scalar> out = w.tape->surrogate_forward ? Array<Scalar>(w.value() * mask)
                                                : fake_quantize_channels<Scalar>(w.value(), rows, bits);
  return w.tape->record(std::move(out), w.shape(), {w},
                        [w = w.id, mask = std::move(mask)](Tape<Scalar>& t, std::size_t self) {
                          detail::accumulate<Scalar>(t, w, t.grad(self) * mask);
                        });
}

/// PACT activation quantizer with straight-through gradients:
/// d/dx = 1 on (0, clip), d/dclip = 1 where x >= clip.
template <typename Scalar>
Var<Scalar> pact(const Var<Scalar>& x, const Var<Scalar>& clip, int bits) {
  if (clip.size() != 1) fail(ErrorKind::shape, "pact: clip must be a scalar");
  const Scalar c = clip.value()(0);
  Array<Scalar> out = x.tape->surrogate_forward ? Array<Scalar>(x.value().max(Scalar(0)).min(c))
                                                : fake_quantize_activations<Scalar>(x.value(), bits, c);
  return x.tape->record(std::move(out), x.shape(), {x, clip},
                        [x = x.id, cl = clip.id](Tape<Scalar>& t, std::size_t self) {
                          const auto& g = t.grad(self);
                          const auto& xv = t.value(x);
                          const Scalar c = t.value(cl)(0);
                          if (auto* gx = t.grad_target(x))
                            *gx += g * ((xv > Scalar(0)) && (xv < c)).template cast<Scalar>();
                          if (auto* gc = t.grad_target(cl))
                            (*gc)(0) += (g * (xv >= c).template cast<Scalar>()).sum();
                        });
}

}  // namespace mixprune
