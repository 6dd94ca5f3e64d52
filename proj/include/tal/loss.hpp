#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tal/net.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Targeted-attack losses. All are minimized by the attack.
enum class LossKind {
  CE,          // cross-entropy on raw logits
  Logit,       // -z_t
  TempCE,      // CE on z / T
  MarginCE,    // CE on z / (z̃₁ - z̃₂)
  AngleLogit,  // -z_t / (‖w_t‖ ‖φ‖)
  GaussianCE,  // CE on (z - μ) / (σ T)
  NCE,         // CE on z / C, C = (z̃₁ - μ) / (σ T)
};

enum class Calibration { Temperature, Margin, Angle, Gaussian, Normalized };

std::string to_string(LossKind kind);
/// Accepts the CLI spellings: ce, logit, temp-ce, margin-ce, angle-logit,
/// gaussian-ce, nce.
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::NCE;
  double temperature = 2.0;
  /// σ divisor: num_classes when true, num_classes - 1 otherwise.
  bool population_std = true;
  /// NCE only: differentiate through C instead of treating it as a constant.
  bool differentiate_factor = false;

  void validate() const;
};

/// Per-sample logit summary.
template <typename T>
struct LogitStats {
  std::vector<T> sorted;  // descending
  T mean = 0;
  T std = 0;
  T top1 = 0;
  T top2 = 0;
  T target_logit = 0;
  std::size_t argmax = 0;  // lowest index among ties
};

template <typename T>
LogitStats<T> logit_stats(std::span<const T> logits, std::size_t target, bool population_std = true);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> values);

struct FactorResult {
  double value = 1.0;
  bool degenerate = false;
};

/// Normalized calibration factor C = (z̃₁ - μ) / (σ T). Falls back to 1 (and
/// flags it) when σ or z̃₁ - μ is below 1e-12.
template <typename T>
FactorResult calibration_factor(const LogitStats<T>& stats, double temperature);

/// Per-class divisors for the angle calibration.
template <typename T>
struct AngleTerms {
  std::vector<T> weight_norms;   // ‖w_i‖, one per class
  std::vector<T> feature_norms;  // ‖φ(x)‖, one per sample
};

template <typename T>
AngleTerms<T> angle_terms(const Model<T>& model, const ForwardTrace<T>& trace);

template <typename T>
struct Calibrated {
  BasicTensor<T> logits;
  std::size_t degenerate = 0;  // samples that hit a fallback divisor
};

/// Rescale each row of N×K logits per `method`. Margin with z̃₁ = z̃₂ and
/// Gaussian with σ = 0 fall back to divisor 1 (counted in `degenerate`).
template <typename T>
Calibrated<T> calibrate(const BasicTensor<T>& logits, Calibration method, double temperature,
                        const AngleTerms<T>* angle = nullptr, bool population_std = true);

template <typename T>
struct LossValue {
  T loss = 0;                 // batch mean
  std::vector<T> per_sample;  // unreduced
  BasicTensor<T> grad;        // d(mean loss)/d(logits), N×K
  std::size_t degenerate = 0;
};

/// Loss and its gradient w.r.t. the logits. Data-dependent divisors
/// (margin, σ, C, norms) are constants under differentiation except for NCE
/// with `differentiate_factor`.
template <typename T>
LossValue<T> evaluate_loss(const LossSpec& spec, const BasicTensor<T>& logits,
                           std::span<const std::size_t> targets,
                           const AngleTerms<T>* angle = nullptr);

/// -z_t averaged over the batch.
template <typename T>
T logit_loss(const BasicTensor<T>& logits, std::span<const std::size_t> targets);

template <typename T>
T nce_loss(const BasicTensor<T>& logits, std::span<const std::size_t> targets, double temperature);

struct DensityRow {
  std::size_t sample_id = 0;
  double top1_minus_mean = 0;
  double std = 0;
  std::size_t predicted = 0;
  std::size_t label = 0;
};

/// Per-sample (z̃₁ - μ, σ) of the clean logits of `images`.
std::vector<DensityRow> logit_density_stats(const Model<float>& model, const Tensor& images,
                                            std::span<const std::size_t> labels,
                                            std::size_t batch_size = 100);

/// CSV with header `sample_id,top1_minus_mean,std`.
void write_density_csv(std::ostream& os, const std::vector<DensityRow>& rows);

} // namespace tal
