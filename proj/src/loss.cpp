#include "tal/loss.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>

namespace tal {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::CE:
      return "ce";
    case LossKind::Logit:
      return "logit";
    case LossKind::TempCE:
      return "temp-ce";
    case LossKind::MarginCE:
      return "margin-ce";
    case LossKind::AngleLogit:
      return "angle-logit";
    case LossKind::GaussianCE:
      return "gaussian-ce";
    case LossKind::NCE:
      return "nce";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view name) {
  for (auto k : {LossKind::CE, LossKind::Logit, LossKind::TempCE, LossKind::MarginCE,
                 LossKind::AngleLogit, LossKind::GaussianCE, LossKind::NCE}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

void LossSpec::validate() const {
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigError("loss temperature must be positive");
  }
}

template <typename T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) {
      best = i;
    }
  }
  return best;
}

template <typename T>
LogitStats<T> logit_stats(std::span<const T> z, std::size_t target, bool population_std) {
  if (z.empty()) {
    throw ShapeError("logit_stats: empty logits");
  }
  if (target >= z.size()) {
    throw ValueError("logit_stats: target " + std::to_string(target) + " out of range");
  }
  LogitStats<T> s;
  s.sorted.assign(z.begin(), z.end());
  std::sort(s.sorted.begin(), s.sorted.end(), std::greater<>());
  const auto k = static_cast<double>(z.size());
  double mean = 0;
  for (auto v : z) {
    mean += static_cast<double>(v);
  }
  mean /= k;
  double var = 0;
  for (auto v : z) {
    const double d = static_cast<double>(v) - mean;
    var += d * d;
  }
  const double div = population_std ? k : std::max(k - 1.0, 1.0);
  s.mean = static_cast<T>(mean);
  s.std = static_cast<T>(std::sqrt(var / div));
  s.top1 = s.sorted[0];
  s.top2 = s.sorted.size() > 1 ? s.sorted[1] : s.sorted[0];
  s.target_logit = z[target];
  s.argmax = argmax(z);
  return s;
}

template <typename T>
FactorResult calibration_factor(const LogitStats<T>& stats, double temperature) {
  if (!(temperature > 0)) {
    throw ValueError("calibration_factor: temperature must be positive");
  }
  const double margin = static_cast<double>(stats.top1) - static_cast<double>(stats.mean);
  const double sigma = static_cast<double>(stats.std);
  if (sigma < 1e-12 || margin < 1e-12) {
    return {1.0, true};
  }
  return {margin / (sigma * temperature), false};
}

template <typename T>
AngleTerms<T> angle_terms(const Model<T>& model, const ForwardTrace<T>& trace) {
  AngleTerms<T> a;
  a.weight_norms = model.classifier_weight_norms();
  const auto& phi = trace.penultimate();
  const std::size_t n = phi.dim(0), d = phi.numel() / std::max<std::size_t>(n, 1);
  a.feature_norms.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(phi[i * d + j]);
      s += v * v;
    }
    a.feature_norms[i] = static_cast<T>(std::sqrt(s));
  }
  return a;
}

namespace {

template <typename T>
std::span<const T> row(const BasicTensor<T>& t, std::size_t r) {
  const std::size_t k = t.dim(1);
  return {t.ptr() + r * k, k};
}

void require_logits(const Shape& s, std::size_t n_targets) {
  if (s.size() != 2) {
    throw ShapeError("loss: logits must be N×K, got " + shape_str(s));
  }
  if (s[0] != n_targets) {
    throw ShapeError("loss: " + std::to_string(s[0]) + " logit rows but " +
                     std::to_string(n_targets) + " targets");
  }
}

// Stable softmax of `scaled` into `p`; returns -log p[t].
double softmax_ce(const std::vector<double>& scaled, std::size_t t, std::vector<double>& p) {
  const double mx = *std::max_element(scaled.begin(), scaled.end());
  double s = 0;
  p.resize(scaled.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    p[i] = std::exp(scaled[i] - mx);
    s += p[i];
  }
  for (auto& v : p) {
    v /= s;
  }
  return std::log(s) + mx - scaled[t];
}

} // namespace

template <typename T>
Calibrated<T> calibrate(const BasicTensor<T>& logits, Calibration method, double temperature,
                        const AngleTerms<T>* angle, bool population_std) {
  if (logits.rank() != 2) {
    throw ShapeError("calibrate: logits must be N×K");
  }
  if (!(temperature > 0)) {
    throw ValueError("calibrate: temperature must be positive");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (method == Calibration::Angle &&
      (!angle || angle->weight_norms.size() != k || angle->feature_norms.size() != n)) {
    throw ValueError("calibrate: angle calibration needs weight and feature norms");
  }
  Calibrated<T> out{BasicTensor<T>::uninitialized(logits.shape()), 0};
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = row(logits, r);
    const auto st = logit_stats(z, 0, population_std);
    double shift = 0;
    double div = 1;
    bool degenerate = false;
    switch (method) {
      case Calibration::Temperature:
        div = temperature;
        break;
      case Calibration::Margin: {
        const double m = static_cast<double>(st.top1) - static_cast<double>(st.top2);
        degenerate = !(m > 0);
        div = degenerate ? 1.0 : m;
        break;
      }
      case Calibration::Gaussian: {
        const double sd = static_cast<double>(st.std) * temperature;
        degenerate = static_cast<double>(st.std) < 1e-12;
        shift = static_cast<double>(st.mean);
        div = degenerate ? 1.0 : sd;
        break;
      }
      case Calibration::Normalized: {
        const auto f = calibration_factor(st, temperature);
        degenerate = f.degenerate;
        div = f.value;
        break;
      }
      case Calibration::Angle:
        break;
    }
    for (std::size_t i = 0; i < k; ++i) {
      double d = div;
      if (method == Calibration::Angle) {
        d = static_cast<double>(angle->weight_norms[i]) *
            static_cast<double>(angle->feature_norms[r]);
        if (!(d > 0)) {
          d = 1.0;
          degenerate = true;
        }
      }
      out.logits[r * k + i] = static_cast<T>((static_cast<double>(z[i]) - shift) / d);
    }
    out.degenerate += degenerate ? 1 : 0;
  }
  return out;
}

template <typename T>
LossValue<T> evaluate_loss(const LossSpec& spec, const BasicTensor<T>& logits,
                           std::span<const std::size_t> targets, const AngleTerms<T>* angle) {
  spec.validate();
  require_logits(logits.shape(), targets.size());
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (n == 0) {
    throw ShapeError("loss: empty batch");
  }
  LossValue<T> out;
  out.grad = BasicTensor<T>::uninitialized(logits.shape());
  out.per_sample.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0;
  std::vector<double> scaled(k), p(k);

  for (std::size_t r = 0; r < n; ++r) {
    const auto z = row(logits, r);
    const std::size_t t = targets[r];
    if (t >= k) {
      throw ValueError("loss: target " + std::to_string(t) + " out of range");
    }
    T* g = out.grad.ptr() + r * k;
    double loss = 0;

    switch (spec.kind) {
      case LossKind::Logit:
        loss = -static_cast<double>(z[t]);
        g[t] = static_cast<T>(-inv_n);
        break;

      case LossKind::AngleLogit: {
        if (!angle || angle->weight_norms.size() != k || angle->feature_norms.size() != n) {
          throw ValueError("angle-logit loss needs weight and feature norms");
        }
        double d = static_cast<double>(angle->weight_norms[t]) *
                   static_cast<double>(angle->feature_norms[r]);
        if (!(d > 0)) {
          d = 1.0;
          ++out.degenerate;
        }
        loss = -static_cast<double>(z[t]) / d;
        g[t] = static_cast<T>(-inv_n / d);
        break;
      }

      case LossKind::CE:
      case LossKind::TempCE:
      case LossKind::MarginCE:
      case LossKind::GaussianCE:
      case LossKind::NCE: {
        const auto st = logit_stats(z, t, spec.population_std);
        double div = 1.0;
        double shift = 0.0;
        bool degenerate = false;
        if (spec.kind == LossKind::TempCE) {
          div = spec.temperature;
        } else if (spec.kind == LossKind::MarginCE) {
          const double m = static_cast<double>(st.top1) - static_cast<double>(st.top2);
          degenerate = !(m > 0);
          div = degenerate ? 1.0 : m;
        } else if (spec.kind == LossKind::GaussianCE) {
          degenerate = static_cast<double>(st.std) < 1e-12;
          div = degenerate ? 1.0 : static_cast<double>(st.std) * spec.temperature;
          shift = static_cast<double>(st.mean);
        } else if (spec.kind == LossKind::NCE) {
          const auto f = calibration_factor(st, spec.temperature);
          degenerate = f.degenerate;
          div = f.value;
        }
        out.degenerate += degenerate ? 1 : 0;
        for (std::size_t i = 0; i < k; ++i) {
          scaled[i] = (static_cast<double>(z[i]) - shift) / div;
        }
        loss = softmax_ce(scaled, t, p);
        // dL/dẑ
        p[t] -= 1.0;
        for (std::size_t i = 0; i < k; ++i) {
          g[i] = static_cast<T>(p[i] / div * inv_n);
        }
        if (spec.kind == LossKind::NCE && spec.differentiate_factor && !degenerate) {
          // ẑ = z · D with D = σT / (z̃₁ - μ); add (Σ_j gẑ_j z_j) ∂D/∂z_i.
          const double kk = static_cast<double>(k);
          const double mu = static_cast<double>(st.mean);
          const double sigma = static_cast<double>(st.std);
          const double margin = static_cast<double>(st.top1) - mu;
          const double std_div = spec.population_std ? kk : std::max(kk - 1.0, 1.0);
          double gz = 0;
          for (std::size_t j = 0; j < k; ++j) {
            gz += p[j] * static_cast<double>(z[j]);
          }
          for (std::size_t i = 0; i < k; ++i) {
            const double dsigma = (static_cast<double>(z[i]) - mu) / (std_div * sigma);
            const double dmargin = (i == st.argmax ? 1.0 : 0.0) - 1.0 / kk;
            const double dd =
                spec.temperature * (dsigma * margin - sigma * dmargin) / (margin * margin);
            g[i] = static_cast<T>(static_cast<double>(g[i]) + gz * dd * inv_n);
          }
        }
        break;
      }
    }
    out.per_sample[r] = static_cast<T>(loss);
    total += loss;
  }
  out.loss = static_cast<T>(total * inv_n);
  if (!std::isfinite(static_cast<double>(out.loss))) {
    throw DivergenceError("loss is not finite (" + to_string(spec.kind) + ")");
  }
  return out;
}

template <typename T>
T logit_loss(const BasicTensor<T>& logits, std::span<const std::size_t> targets) {
  return evaluate_loss(LossSpec{LossKind::Logit}, logits, targets).loss;
}

template <typename T>
T nce_loss(const BasicTensor<T>& logits, std::span<const std::size_t> targets, double temperature) {
  LossSpec s{LossKind::NCE, temperature};
  return evaluate_loss(s, logits, targets).loss;
}

std::vector<DensityRow> logit_density_stats(const Model<float>& model, const Tensor& images,
                                            std::span<const std::size_t> labels,
                                            std::size_t batch_size) {
  if (images.rank() != 4) {
    throw ShapeError("logit_density_stats: images must be N×C×H×W");
  }
  const std::size_t n = images.dim(0);
  if (!labels.empty() && labels.size() != n) {
    throw ShapeError("logit_density_stats: label count mismatch");
  }
  std::vector<DensityRow> rows;
  rows.reserve(n);
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const auto logits = model.logits(images.slice_outer(b, e));
    for (std::size_t r = 0; r < e - b; ++r) {
      const auto st = logit_stats(row(logits, r), 0);
      DensityRow d;
      d.sample_id = b + r;
      d.top1_minus_mean = static_cast<double>(st.top1) - static_cast<double>(st.mean);
      d.std = static_cast<double>(st.std);
      d.predicted = st.argmax;
      d.label = labels.empty() ? 0 : labels[b + r];
      rows.push_back(d);
    }
  }
  return rows;
}

void write_density_csv(std::ostream& os, const std::vector<DensityRow>& rows) {
  os << "sample_id,top1_minus_mean,std\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.sample_id << ',' << r.top1_minus_mean << ',' << r.std << '\n';
  }
}

#define TAL_INSTANTIATE(T)                                                                       \
  template std::size_t argmax(std::span<const T>);                                               \
  template LogitStats<T> logit_stats(std::span<const T>, std::size_t, bool);                     \
  template FactorResult calibration_factor(const LogitStats<T>&, double);                        \
  template AngleTerms<T> angle_terms(const Model<T>&, const ForwardTrace<T>&);                   \
  template Calibrated<T> calibrate(const BasicTensor<T>&, Calibration, double,                   \
                                   const AngleTerms<T>*, bool);                                  \
  template LossValue<T> evaluate_loss(const LossSpec&, const BasicTensor<T>&,                    \
                                      std::span<const std::size_t>, const AngleTerms<T>*);       \
  template T logit_loss(const BasicTensor<T>&, std::span<const std::size_t>);                    \
  template T nce_loss(const BasicTensor<T>&, std::span<const std::size_t>, double);

TAL_INSTANTIATE(float)
TAL_INSTANTIATE(double)

#undef TAL_INSTANTIATE

} // namespace tal
