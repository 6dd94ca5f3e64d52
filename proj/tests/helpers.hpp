// Shared fixtures for unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tal/loss.hpp"
#include "tal/net.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace tal::testing {

template <typename T = float>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = BasicTensor<T>::uninitialized(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(rng.uniform(lo, hi));
  }
  return t;
}

inline Architecture linear_arch(std::size_t c, std::size_t h, std::size_t w, std::size_t classes) {
  Architecture a;
  a.name = "linear";
  a.input = {c, h, w};
  a.num_classes = classes;
  a.layers = {LayerSpec::flatten(), LayerSpec::linear(c * h * w, classes)};
  return a;
}

enum class Probe { Conv, Relu, MaxPool, AvgPool, GlobalAvgPool, Linear, Composed };

inline const char* probe_name(Probe p) {
  switch (p) {
    case Probe::Conv: return "conv2d";
    case Probe::Relu: return "relu";
    case Probe::MaxPool: return "maxpool";
    case Probe::AvgPool: return "avgpool";
    case Probe::GlobalAvgPool: return "gap";
    case Probe::Linear: return "linear";
    case Probe::Composed: return "composed";
  }
  return "?";
}

inline std::vector<Probe> all_probes() {
  return {Probe::Conv, Probe::Relu, Probe::MaxPool, Probe::AvgPool,
          Probe::GlobalAvgPool, Probe::Linear, Probe::Composed};
}

/// Small architecture isolating one layer type (plus the flatten/linear head
/// needed to emit logits). Input 2×6×6, 4 classes.
inline Architecture probe_arch(Probe p) {
  using L = LayerSpec;
  Architecture a;
  a.name = probe_name(p);
  a.input = {2, 6, 6};
  a.num_classes = 4;
  switch (p) {
    case Probe::Conv:
      a.layers = {L::conv(2, 3, 3, 2, 1), L::flatten(), L::linear(3 * 3 * 3, 4)};
      break;
    case Probe::Relu:
      a.layers = {L::relu(), L::flatten(), L::linear(2 * 36, 4)};
      break;
    case Probe::MaxPool:
      a.layers = {L::max_pool(2, 2), L::flatten(), L::linear(2 * 9, 4)};
      break;
    case Probe::AvgPool:
      a.layers = {L::avg_pool(2, 2), L::flatten(), L::linear(2 * 9, 4)};
      break;
    case Probe::GlobalAvgPool:
      a.layers = {L::global_avg_pool(), L::linear(2, 4)};
      break;
    case Probe::Linear:
      a.layers = {L::flatten(), L::linear(2 * 36, 4)};
      break;
    case Probe::Composed:
      a.layers = {L::conv(2, 4, 3, 1, 1), L::relu(), L::max_pool(2, 2), L::conv(4, 4, 3, 1, 1),
                  L::relu(), L::avg_pool(3, 3), L::global_avg_pool(), L::linear(4, 4)};
      break;
  }
  return a;
}

/// He-initialized model with random (nonzero) biases in double precision.
inline Model<double> random_model64(const Architecture& arch, std::uint64_t seed) {
  auto m = Model<double>::initialized(arch, seed);
  Rng rng = Rng::stream(seed, "bias");
  for (std::size_t i = 0; i < m.layer_count(); ++i) {
    if (arch.layers[i].has_params()) {
      m.bias(i) = random_tensor<double>(m.bias(i).shape(), rng, -0.2, 0.2);
    }
  }
  return m;
}

/// Piece of a piecewise-linear network that x falls in: the sign of every
/// ReLU input and every max-pool argmax.
template <typename T>
std::vector<std::size_t> activation_pattern(const Model<T>& model, const BasicTensor<T>& x) {
  const auto trace = model.forward(x);
  std::vector<std::size_t> pattern;
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (model.arch().layers[i].kind == LayerKind::Relu) {
      for (T v : trace.activations[i].data()) pattern.push_back(v > 0 ? 1 : 0);
    }
  }
  for (const auto& arg : trace.pool_argmax) pattern.insert(pattern.end(), arg.begin(), arg.end());
  return pattern;
}

/// Central differences of the mean CE loss. `smooth[i]` is false when the
/// ±h probes of coordinate i land in different pieces, where the difference
/// quotient does not estimate a derivative.
struct FdGradient {
  std::vector<double> grad;
  std::vector<bool> smooth;
  std::size_t smooth_count() const {
    return static_cast<std::size_t>(std::count(smooth.begin(), smooth.end(), true));
  }
};

template <typename T>
FdGradient fd_gradient(const Model<T>& model, const BasicTensor<T>& x,
                       const std::vector<std::size_t>& targets, double h) {
  const LossSpec ce{LossKind::CE};
  auto at = [&](const std::vector<double>& v) {
    auto t = BasicTensor<T>::uninitialized(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
    return t;
  };
  auto f = [&](const std::vector<double>& v) {
    return static_cast<double>(evaluate_loss(ce, model.logits(at(v)), targets).loss);
  };
  std::vector<double> flat(x.data().begin(), x.data().end());
  FdGradient out{std::vector<double>(flat.size()), std::vector<bool>(flat.size())};
  for (std::size_t i = 0; i < flat.size(); ++i) {
    out.grad[i] = oracle::central_difference(f, flat, i, h);
    auto probe = flat;
    probe[i] = flat[i] + h;
    const auto up = activation_pattern(model, at(probe));
    probe[i] = flat[i] - h;
    out.smooth[i] = up == activation_pattern(model, at(probe));
  }
  return out;
}

/// ‖got − ref‖ / max(‖got‖, ‖ref‖) over the entries selected by `mask`.
template <typename T>
double relative_error(const BasicTensor<T>& got, const std::vector<double>& ref,
                      const std::vector<bool>& mask = {}) {
  double diff = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double g = static_cast<double>(got[i]);
    diff += (g - ref[i]) * (g - ref[i]);
    a += g * g;
    b += ref[i] * ref[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(a), std::sqrt(b), 1e-30});
}

} // namespace tal::testing
