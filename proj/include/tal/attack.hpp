#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tal/loss.hpp"
#include "tal/mixing.hpp"
#include "tal/net.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace tal {

struct Budget {
  double eps = 16.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t max_iters = 300;

  /// Requires 0 < step ≤ eps (or eps = 0) and max_iters ≥ 1.
  void validate() const;
};

/// A full attack recipe. Per-iteration gradient pipeline:
///   copies (Admix / SI scales) → DI or RDI → forward (with mixing) →
///   backward → average → TI → VT → MI → x̂ ← clamp(Π(x̂ - step·sign(g))).
struct AttackConfig {
  Budget budget;

  bool mi = true;
  double mi_decay = 1.0;

  bool ti = true;
  std::size_t ti_kernel = 5;

  bool di = false;
  bool rdi = false;
  double di_prob = 0.7;  // also gates RDI
  double di_max_scale = 330.0 / 299.0;
  double rdi_scale = 340.0 / 299.0;

  bool vt = false;
  std::size_t vt_samples = 5;
  double vt_beta = 1.5;

  bool si = false;
  std::size_t si_scales = 5;

  bool admix = false;
  std::size_t admix_scales = 1;  // m1
  std::size_t admix_copies = 3;  // m2
  double admix_eta = 0.2;

  LossSpec loss;
  std::optional<MixConfig> mixing;
  /// Rebuild the clean-feature store from the clean batch under the same
  /// input transform before every forward, instead of once from the
  /// untransformed batch.
  bool recompute_clean_features = false;

  std::uint64_t seed = 0;
  std::size_t batch_size = 20;
  /// Evaluate loss and white-box hits after every iteration (otherwise only
  /// at the end).
  bool trace_every_iteration = true;

  void validate() const;
};

/// Loss gradient w.r.t. the input pixels.
template <typename T>
struct GradientResult {
  BasicTensor<T> grad;    // same shape as the input batch
  BasicTensor<T> logits;  // N×K
  T loss = 0;             // batch mean
  std::size_t degenerate = 0;
};

/// Reverse-mode gradient of the batch-mean loss. Mixed hook features pass
/// gradient scaled channel-wise by their gate; stored features are constants.
template <typename T>
GradientResult<T> input_gradient(const Model<T>& model, const BasicTensor<T>& batch,
                                 const LossSpec& loss, std::span<const std::size_t> targets,
                                 const HookFn<T>* hook = nullptr);

using GradientFn = std::function<Tensor(const Tensor& x)>;

/// g ← μ·g + grad / max(‖grad‖₁, 1e-12), L1 norm per sample.
Tensor mi_update(const Tensor& momentum, const Tensor& grad, double decay = 1.0);

/// Normalized k×k Gaussian, std k/3. Throws ConfigError for even k.
Tensor ti_kernel(std::size_t kernel_size);
/// Depth-wise same-padded convolution of an N×C×H×W gradient with ti_kernel.
Tensor ti_smooth(const Tensor& grad, std::size_t kernel_size = 5);

/// A sampled resize-and-pad (and for RDI, resize-back) with its adjoint.
struct ResizePlan {
  bool applied = false;
  std::size_t in_h = 0, in_w = 0;
  std::size_t rnd_h = 0, rnd_w = 0;     // resized extent
  std::size_t pad_h = 0, pad_w = 0;     // canvas extent
  std::size_t top = 0, left = 0;        // placement in the canvas
  bool resize_back = false;             // RDI

  Tensor apply(const Tensor& x) const;
  /// Gradient w.r.t. the plan's input given the gradient w.r.t. its output.
  Tensor backward(const Tensor& grad_out) const;
  std::size_t out_h() const;
  std::size_t out_w() const;
};

/// With probability `prob`: resize to a uniform size in [H, ⌊H·max_scale⌋],
/// zero-pad to ⌊H·max_scale⌋ at a uniform offset. Otherwise identity.
ResizePlan draw_di_plan(std::size_t h, std::size_t w, double prob, double max_scale, Rng& rng);
/// DI-style draw followed by a bilinear resize back to H×W.
ResizePlan draw_rdi_plan(std::size_t h, std::size_t w, double prob, double scale, Rng& rng);

Tensor di_transform(const Tensor& batch, Rng& rng, double prob = 0.7,
                    double max_scale = 330.0 / 299.0);
Tensor rdi_transform(const Tensor& batch, Rng& rng, double prob = 0.7,
                     double scale = 340.0 / 299.0);

/// Variance tuning. Returns grad(x) + v, then replaces v by the mean
/// gradient over n points drawn uniformly from x + [-β·eps, β·eps]^d minus
/// grad(x). `current` is grad(x) when already known.
Tensor vt_gradient(const GradientFn& grad, const Tensor& x, Tensor& variance, std::size_t n,
                   double beta, double eps, Rng& rng, const Tensor* current = nullptr);

/// Mean over i < m of d/dx L(f(x / 2^i)) (chain factor 1/2^i included).
Tensor si_gradients(const GradientFn& grad, const Tensor& x, std::size_t m);

struct AdmixCopy {
  Tensor input;        // γ·(x + η·x″)
  double scale = 1.0;  // γ, the chain factor for the gradient
};

struct AdmixResult {
  std::vector<AdmixCopy> copies;  // m1·m2 entries
  bool fallback = false;          // batch of one: unmixed copies
};

/// m2 partners x″ per sample drawn without replacement from the other batch
/// members (cycling when fewer than m2 exist), each copy at the m1 scales
/// γ_i = 1/2^i.
AdmixResult admix_inputs(const Tensor& batch, Rng& rng, std::size_t m1 = 1, std::size_t m2 = 3,
                         double eta = 0.2);

struct TraceRow {
  std::size_t iter = 0;
  double mean_loss = 0;
  std::size_t whitebox_target_hits = 0;
};

struct AttackResult {
  Tensor adversarial;
  /// Row 0 is the clean batch; row k follows iteration k. Only the final row
  /// is present when trace_every_iteration is off.
  std::vector<TraceRow> trace;
  std::size_t samples = 0;
  std::size_t degenerate_calibrations = 0;
  std::size_t admix_fallbacks = 0;
  std::size_t mixing_events = 0;
};

/// Targeted attack minimizing the configured loss toward `targets`. Splits
/// the batch into batch_size chunks, chunk j using RNG streams derived from
/// (seed, j). Throws DivergenceError (with iteration) on a non-finite loss.
AttackResult run_attack(const Model<float>& model, const Tensor& images,
                        std::span<const std::size_t> targets, const AttackConfig& config);

/// CSV with header `iter,mean_loss,whitebox_target_hits`.
void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace);

} // namespace tal
