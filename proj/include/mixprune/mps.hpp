#pragma once

// Bit-width selection parameters: sampling, effective tensors, init,
// rescaling, temperature schedule and discretization.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixprune/autodiff.hpp"
#include "mixprune/ops.hpp"
#include "mixprune/quant.hpp"

namespace mixprune {

inline constexpr double kTauMin = 1e-3;

enum class SamplingMethod { softmax, argmax, hard_gumbel };

inline const char* to_string(SamplingMethod m) {
  switch (m) {
    case SamplingMethod::softmax: return "sm";
    case SamplingMethod::argmax: return "am";
    case SamplingMethod::hard_gumbel: return "hgsm";
  }
  return "?";
}

inline SamplingMethod parse_sampling_method(const std::string& s) {
  if (s == "sm" || s == "softmax") return SamplingMethod::softmax;
  if (s == "am" || s == "argmax") return SamplingMethod::argmax;
  if (s == "hgsm" || s == "hard_gumbel") return SamplingMethod::hard_gumbel;
  fail(ErrorKind::config, "unknown sampling method '" + s + "' (expected sm|am|hgsm)");
}

/// Index of the largest entry; exact ties go to the later (higher precision) index.
template <typename Derived>
Index argmax_prefer_last(const Eigen::DenseBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) >= v(best)) best = i;
  return best;
}

template <typename Scalar>
Array<Scalar> softmax(const Array<Scalar>& logits, Scalar tau) {
  Array<Scalar> z = logits / tau;
  Array<Scalar> e = (z - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Standard Gumbel(0, 1) samples.
template <typename Scalar, typename Rng>
Array<Scalar> gumbel_noise(Index n, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Array<Scalar> out(n);
  for (Index i = 0; i < n; ++i) {
    double u = uniform(rng);
    u = std::clamp(u, 1e-12, 1.0 - 1e-12);
    out(i) = static_cast<Scalar>(-std::log(-std::log(u)));
  }
  return out;
}

/// Samples one probability vector from raw selector parameters.
/// `noise` is only used for hard Gumbel-softmax; when empty it is drawn from `rng`.
template <typename Scalar, typename Rng>
Array<Scalar> sample(const Array<Scalar>& params, SamplingMethod method, Scalar tau, Rng& rng,
                     const Array<Scalar>& noise = {}) {
  if (!(tau > Scalar(0))) fail(ErrorKind::contract, "temperature must be positive");
  switch (method) {
    case SamplingMethod::softmax:
      return softmax<Scalar>(params, tau);
    case SamplingMethod::argmax: {
      Array<Scalar> out = Array<Scalar>::Zero(params.size());
      out(argmax_prefer_last(params)) = Scalar(1);
      return out;
    }
    case SamplingMethod::hard_gumbel: {
      const Array<Scalar> eps = noise.size() ? noise : gumbel_noise<Scalar>(params.size(), rng);
      Array<Scalar> out = Array<Scalar>::Zero(params.size());
      out(argmax_prefer_last(Array<Scalar>(params + eps))) = Scalar(1);
      return out;
    }
  }
  return {};
}

/// Row-wise sampling of a [rows, P] selector matrix on the tape.
///
/// SM forwards softmax(row / tau). AM and HGSM forward a one-hot row (at the
/// argmax of the row, plus Gumbel noise for HGSM) and backpropagate through
/// the tau-softened softmax of the same logits (straight-through).
/// `noise`, when given, has the same size as `params` and is used by HGSM.
template <typename Scalar>
Var<Scalar> sample_rows(const Var<Scalar>& params, SamplingMethod method, Scalar tau,
                        const Array<Scalar>* noise = nullptr) {
  if (!(tau > Scalar(0))) fail(ErrorKind::contract, "temperature must be positive");
  const Shape shape = params.shape();
  const Index cols = shape.empty() ? 1 : shape.back();
  const Index rows = params.size() / cols;
  Array<Scalar> logits = params.value();
  if (method == SamplingMethod::hard_gumbel) {
    if (!noise || noise->size() != params.size())
      fail(ErrorKind::contract, "hard Gumbel-softmax needs one noise sample per entry");
    logits += *noise;
  }
  Array<Scalar> soft(params.size());
  Array<Scalar> out(params.size());
  for (Index r = 0; r < rows; ++r) {
    Array<Scalar> row = logits.segment(r * cols, cols);
    soft.segment(r * cols, cols) = softmax<Scalar>(row, tau);
    if (method == SamplingMethod::softmax || params.tape->surrogate_forward) {
      out.segment(r * cols, cols) = soft.segment(r * cols, cols);
    } else {
      out.segment(r * cols, cols).setZero();
      out(r * cols + argmax_prefer_last(row)) = Scalar(1);
    }
  }
  return params.tape->record(
      std::move(out), shape, {params},
      [p = params.id, soft = std::move(soft), rows, cols, tau](Tape<Scalar>& t, std::size_t self) {
        auto* g = t.grad_target(p);
        if (!g) return;
        const auto& up = t.grad(self);
        for (Index r = 0; r < rows; ++r) {
          const auto s = soft.segment(r * cols, cols);
          const auto u = up.segment(r * cols, cols);
          const Scalar dot = (s * u).sum();
          g->segment(r * cols, cols) += s * (u - dot) / tau;
        }
      });
}

/// Effective activations: sum_p delta_hat[p] * PACT(x, clip, P_X[p]).
template <typename Scalar>
Var<Scalar> effective_activations(const Var<Scalar>& x, const Var<Scalar>& delta_hat,
                                  const PrecisionSet& px, const Var<Scalar>& clip) {
  if (delta_hat.size() != px.size()) fail(ErrorKind::shape, "delta_hat length must equal |P_X|");
  std::vector<Var<Scalar>> terms;
  for (int i = 0; i < px.size(); ++i) terms.push_back(pact(x, clip, px[i]) * element(delta_hat, i));
  return add_n(terms);
}

/// Effective weights: per channel k, sum_p gamma_hat[k, p] * Q_p(W_k), with Q_0 = 0.
/// Every variant is derived from the same real-valued tensor.
template <typename Scalar>
Var<Scalar> effective_weights(const Var<Scalar>& w, const Var<Scalar>& gamma_hat, const PrecisionSet& pw) {
  if (gamma_hat.shape().size() != 2 || gamma_hat.shape()[0] != w.shape()[0] ||
      gamma_hat.shape()[1] != pw.size())
    fail(ErrorKind::shape, "gamma_hat must be [C_out, |P_W|], got " + shape_str(gamma_hat.shape()));
  std::vector<Var<Scalar>> terms;
  for (int i = 0; i < pw.size(); ++i) {
    if (pw[i] == 0) continue;
    terms.push_back(scale_rows(fake_quant_weights(w, pw[i]), column(gamma_hat, i)));
  }
  return add_n(terms);
}

/// Probability mass on non-zero precisions, per channel: sum_{p != 0} gamma_hat[k, p].
template <typename Scalar>
Var<Scalar> nonzero_mass(const Var<Scalar>& gamma_hat, const PrecisionSet& pw) {
  std::vector<Var<Scalar>> cols;
  for (int i = 0; i < pw.size(); ++i)
    if (pw[i] != 0) cols.push_back(column(gamma_hat, i));
  return add_n(cols);
}

/// Raw initial selector values p / max(P), identical for every row.
inline Eigen::ArrayXd init_selectors(const PrecisionSet& set) {
  Eigen::ArrayXd row(set.size());
  for (int i = 0; i < set.size(); ++i) row(i) = static_cast<double>(set[i]) / set.max();
  return row;
}

template <typename Scalar>
RowMatrix<Scalar> init_selector_matrix(const PrecisionSet& set, Index rows) {
  const Eigen::ArrayXd row = init_selectors(set);
  RowMatrix<Scalar> m(rows, set.size());
  for (Index r = 0; r < rows; ++r) m.row(r) = row.cast<Scalar>().matrix().transpose();
  return m;
}

/// Divides each output channel of `w` ([C_out, ...]) by its non-zero-bit mass.
template <typename Scalar>
Array<Scalar> rescale_weights(const Array<Scalar>& w, Index rows, const Array<Scalar>& nonzero_mass) {
  if (nonzero_mass.size() != rows) fail(ErrorKind::shape, "one mass per channel required");
  const Index inner = rows ? w.size() / rows : 0;
  Array<Scalar> out(w.size());
  for (Index r = 0; r < rows; ++r) {
    if (!(nonzero_mass(r) > Scalar(1e-6)))
      fail(ErrorKind::degenerate, "degenerate selector initialization: channel " + std::to_string(r) +
                                      " has no mass on non-zero precisions");
    out.segment(r * inner, inner) = w.segment(r * inner, inner) / nonzero_mass(r);
  }
  return out;
}

/// Argmax bit-width per row of a [rows, |P|] selector matrix (ties -> higher precision).
template <typename Scalar>
std::vector<int> discretize_rows(const RowMatrix<Scalar>& selectors, const PrecisionSet& set) {
  if (selectors.cols() != set.size()) fail(ErrorKind::shape, "selector width must equal |P|");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(selectors.rows()));
  for (Index r = 0; r < selectors.rows(); ++r)
    out.push_back(set[static_cast<int>(argmax_prefer_last(selectors.row(r)))]);
  return out;
}

struct TemperatureSchedule {
  double initial = 1.0;
  double factor = std::exp(-0.045);
  double floor = kTauMin;

  /// Decay factor reaching `target` after `epochs` epochs from tau0 = 1.
  static double factor_for(double target, int epochs) { return std::exp(std::log(target) / epochs); }
};

inline double temperature_step(int epoch, const TemperatureSchedule& s) {
  if (epoch < 0) fail(ErrorKind::contract, "epoch must be non-negative");
  if (!(s.factor > 0.0 && s.factor <= 1.0))
    fail(ErrorKind::config, "temperature decay factor must lie in (0, 1]");
  return std::max(s.initial * std::pow(s.factor, epoch), s.floor);
}

}  // namespace mixprune
