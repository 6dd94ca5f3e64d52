#include "tal/attack.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <ostream>

namespace tal {

void Budget::validate() const {
  if (!(eps >= 0) || !std::isfinite(eps)) {
    throw ConfigError("eps must be a non-negative number");
  }
  if (!(step > 0) || (eps > 0 && step > eps)) {
    throw ConfigError("step must satisfy 0 < step <= eps");
  }
  if (max_iters == 0) {
    throw ConfigError("max_iters must be at least 1");
  }
}

void AttackConfig::validate() const {
  budget.validate();
  loss.validate();
  if (di && rdi) {
    throw ConfigError("DI and RDI are mutually exclusive");
  }
  if (!(di_prob >= 0 && di_prob <= 1)) {
    throw ConfigError("DI probability must lie in [0, 1]");
  }
  if (!(di_max_scale >= 1) || !(rdi_scale >= 1)) {
    throw ConfigError("DI/RDI scales must be at least 1");
  }
  if (ti && ti_kernel % 2 == 0) {
    throw ConfigError("TI kernel size must be odd");
  }
  if (vt && (vt_samples == 0 || !(vt_beta >= 0))) {
    throw ConfigError("VT needs n >= 1 and beta >= 0");
  }
  if (si && si_scales == 0) {
    throw ConfigError("SI needs at least one scale");
  }
  if (admix && (admix_scales == 0 || admix_copies == 0 || !(admix_eta >= 0))) {
    throw ConfigError("Admix needs m1, m2 >= 1 and eta >= 0");
  }
  if (batch_size == 0) {
    throw ConfigError("batch size must be positive");
  }
  if (mixing) {
    mixing->validate();
  }
}

// ---------------------------------------------------------------------------
// Gradient

template <typename T>
GradientResult<T> input_gradient(const Model<T>& model, const BasicTensor<T>& batch,
                                 const LossSpec& loss, std::span<const std::size_t> targets,
                                 const HookFn<T>* hook) {
  if (targets.size() != batch.dim(0)) {
    throw ShapeError("input_gradient: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(batch.dim(0)) + " images");
  }
  ForwardOptions<T> opts;
  opts.hook = hook;
  const auto trace = model.forward(batch, opts);
  std::optional<AngleTerms<T>> angle;
  if (loss.kind == LossKind::AngleLogit) {
    angle = angle_terms(model, trace);
  }
  auto lv = evaluate_loss(loss, trace.logits, targets, angle ? &*angle : nullptr);
  GradientResult<T> out;
  out.grad = model.backward(trace, lv.grad);
  out.logits = trace.logits;
  out.loss = lv.loss;
  out.degenerate = lv.degenerate;
  return out;
}

// ---------------------------------------------------------------------------
// Stabilizers

Tensor mi_update(const Tensor& momentum, const Tensor& grad, double decay) {
  if (momentum.shape() != grad.shape()) {
    throw ShapeError("mi_update: momentum and gradient shapes differ");
  }
  const std::size_t n = grad.dim(0);
  const std::size_t per = grad.numel() / std::max<std::size_t>(n, 1);
  auto out = Tensor::uninitialized(grad.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double l1 = 0;
    for (std::size_t j = 0; j < per; ++j) {
      l1 += std::abs(static_cast<double>(grad[i * per + j]));
    }
    const double inv = 1.0 / std::max(l1, 1e-12);
    for (std::size_t j = 0; j < per; ++j) {
      const std::size_t q = i * per + j;
      out[q] = static_cast<float>(decay * momentum[q] + grad[q] * inv);
    }
  }
  return out;
}

Tensor ti_kernel(std::size_t kernel_size) {
  if (kernel_size % 2 == 0) {
    throw ConfigError("TI kernel size must be odd, got " + std::to_string(kernel_size));
  }
  const double sigma = static_cast<double>(kernel_size) / 3.0;
  const long r = static_cast<long>(kernel_size / 2);
  std::vector<double> w;
  double total = 0;
  for (long y = -r; y <= r; ++y) {
    for (long x = -r; x <= r; ++x) {
      w.push_back(std::exp(-static_cast<double>(x * x + y * y) / (2 * sigma * sigma)));
      total += w.back();
    }
  }
  auto k = Tensor::uninitialized({kernel_size, kernel_size});
  for (std::size_t i = 0; i < w.size(); ++i) {
    k[i] = static_cast<float>(w[i] / total);
  }
  return k;
}

Tensor ti_smooth(const Tensor& grad, std::size_t kernel_size) {
  const auto k = ti_kernel(kernel_size);
  if (kernel_size == 1) {
    return grad;
  }
  return depthwise_conv2d(grad, k, {1, kernel_size / 2});
}

// ---------------------------------------------------------------------------
// Input transforms

std::size_t ResizePlan::out_h() const {
  return !applied ? in_h : (resize_back ? in_h : pad_h);
}
std::size_t ResizePlan::out_w() const {
  return !applied ? in_w : (resize_back ? in_w : pad_w);
}

Tensor ResizePlan::apply(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(2) != in_h || x.dim(3) != in_w) {
    throw ShapeError("resize plan drawn for " + std::to_string(in_h) + "×" +
                     std::to_string(in_w) + " input, got " + shape_str(x.shape()));
  }
  if (!applied) {
    return x;
  }
  auto y = pad2d(resize_bilinear(x, rnd_h, rnd_w), top, left, pad_h, pad_w);
  return resize_back ? resize_bilinear(y, in_h, in_w) : y;
}

Tensor ResizePlan::backward(const Tensor& grad_out) const {
  if (!applied) {
    return grad_out;
  }
  Tensor g = resize_back ? resize_bilinear_backward(grad_out, pad_h, pad_w) : grad_out;
  g = crop2d(g, top, left, rnd_h, rnd_w);
  return resize_bilinear_backward(g, in_h, in_w);
}

namespace {

ResizePlan draw_plan(std::size_t h, std::size_t w, double prob, double scale, bool back, Rng& rng) {
  if (h < 2 || w < 2) {
    throw ShapeError("resize transforms need spatial extents >= 2");
  }
  ResizePlan p;
  p.in_h = h;
  p.in_w = w;
  p.resize_back = back;
  if (!(rng.uniform() < prob)) {
    return p;
  }
  p.applied = true;
  p.pad_h = static_cast<std::size_t>(std::floor(static_cast<double>(h) * scale));
  p.pad_w = static_cast<std::size_t>(std::floor(static_cast<double>(w) * scale));
  const std::size_t extra = rng.below(p.pad_h - h + 1);
  p.rnd_h = h + extra;
  p.rnd_w = std::min(p.pad_w, w + static_cast<std::size_t>(std::lround(
                                      static_cast<double>(extra) * static_cast<double>(w) /
                                      static_cast<double>(h))));
  p.top = rng.below(p.pad_h - p.rnd_h + 1);
  p.left = rng.below(p.pad_w - p.rnd_w + 1);
  return p;
}

} // namespace

ResizePlan draw_di_plan(std::size_t h, std::size_t w, double prob, double max_scale, Rng& rng) {
  return draw_plan(h, w, prob, max_scale, false, rng);
}

ResizePlan draw_rdi_plan(std::size_t h, std::size_t w, double prob, double scale, Rng& rng) {
  return draw_plan(h, w, prob, scale, true, rng);
}

Tensor di_transform(const Tensor& batch, Rng& rng, double prob, double max_scale) {
  return draw_di_plan(batch.dim(2), batch.dim(3), prob, max_scale, rng).apply(batch);
}

Tensor rdi_transform(const Tensor& batch, Rng& rng, double prob, double scale) {
  return draw_rdi_plan(batch.dim(2), batch.dim(3), prob, scale, rng).apply(batch);
}

Tensor vt_gradient(const GradientFn& grad, const Tensor& x, Tensor& variance, std::size_t n,
                   double beta, double eps, Rng& rng, const Tensor* current) {
  if (n == 0) {
    throw ConfigError("VT needs at least one neighbor");
  }
  const Tensor g = current ? *current : grad(x);
  if (variance.shape() != g.shape()) {
    variance = Tensor(g.shape());
  }
  Tensor out = g + variance;
  const double radius = beta * eps;
  Tensor acc(g.shape());
  for (std::size_t s = 0; s < n; ++s) {
    auto nb = Tensor::uninitialized(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      nb[i] = static_cast<float>(x[i] + rng.uniform(-radius, radius));
    }
    axpy_inplace(acc, 1.0f, grad(nb));
  }
  variance = acc * static_cast<float>(1.0 / static_cast<double>(n)) - g;
  return out;
}

Tensor si_gradients(const GradientFn& grad, const Tensor& x, std::size_t m) {
  if (m == 0) {
    throw ConfigError("SI needs at least one scale");
  }
  Tensor acc(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const float gamma = 1.0f / static_cast<float>(1ull << i);
    axpy_inplace(acc, gamma, grad(x * gamma));
  }
  return acc * (1.0f / static_cast<float>(m));
}

AdmixResult admix_inputs(const Tensor& batch, Rng& rng, std::size_t m1, std::size_t m2,
                         double eta) {
  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.numel() / std::max<std::size_t>(n, 1);
  AdmixResult res;
  res.fallback = n < 2;
  // partners[c][i]: sample mixed into row i of copy c.
  std::vector<std::vector<std::size_t>> partners(m2, std::vector<std::size_t>(n, 0));
  if (!res.fallback) {
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < n; ++i) {
      others.clear();
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) {
          others.push_back(j);
        }
      }
      for (std::size_t k = others.size(); k > 1; --k) {
        std::swap(others[k - 1], others[rng.below(k)]);
      }
      for (std::size_t c = 0; c < m2; ++c) {
        partners[c][i] = others[c % others.size()];
      }
    }
  }
  for (std::size_t c = 0; c < m2; ++c) {
    Tensor mixed = batch;
    if (!res.fallback) {
      for (std::size_t i = 0; i < n; ++i) {
        const float* src = batch.ptr() + partners[c][i] * per;
        float* dst = mixed.ptr() + i * per;
        for (std::size_t q = 0; q < per; ++q) {
          dst[q] = static_cast<float>(dst[q] + eta * src[q]);
        }
      }
    }
    for (std::size_t s = 0; s < m1; ++s) {
      const double gamma = 1.0 / static_cast<double>(1ull << s);
      res.copies.push_back({mixed * static_cast<float>(gamma), gamma});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Attack loop

namespace {

struct ChunkOutcome {
  Tensor adversarial;
  std::vector<double> loss_sum;  // per trace row, summed over samples
  std::vector<std::size_t> hits;
  std::vector<std::size_t> iters;
  std::size_t degenerate = 0;
  std::size_t admix_fallbacks = 0;
  std::size_t mixing_events = 0;
};

class ChunkAttack {
 public:
  ChunkAttack(const Model<float>& model, const Tensor& clean, std::span<const std::size_t> targets,
              const AttackConfig& cfg, std::uint64_t chunk_seed)
      : model_(model),
        clean_(clean),
        targets_(targets),
        cfg_(cfg),
        di_rng_(Rng::stream(chunk_seed, "di")),
        vt_rng_(Rng::stream(chunk_seed, "vt")),
        admix_rng_(Rng::stream(chunk_seed, "admix")) {
    if (cfg_.mixing) {
      auto store = std::make_shared<const FeatureStore>(build_store(model_, clean_, *cfg_.mixing));
      mixer_ = std::make_shared<FeatureMixer>(store, *cfg_.mixing, mix_seed(chunk_seed, 0x6d6978));
      hook_fn_ = [m = mixer_](const HookPoint& h, const Tensor& f) { return (*m)(h, f); };
    }
  }

  ChunkOutcome run() {
    ChunkOutcome out;
    const auto& b = cfg_.budget;
    const float eps = static_cast<float>(b.eps);
    const float step = static_cast<float>(b.step);
    Tensor x_adv = clean_;
    Tensor momentum(clean_.shape());
    Tensor variance(clean_.shape());
    if (cfg_.trace_every_iteration) {
      record(out, 0, x_adv);
    }
    for (std::size_t it = 1; it <= b.max_iters; ++it) {
      Tensor g;
      try {
        g = direction(x_adv, variance, out);
      } catch (const DivergenceError& e) {
        throw DivergenceError("iteration " + std::to_string(it) + ": " + e.what());
      }
      if (cfg_.mi) {
        momentum = mi_update(momentum, g, cfg_.mi_decay);
        g = momentum;
      }
      // Descent on the targeted loss.
      x_adv = clamp(linf_project(x_adv - sign(g) * step, clean_, eps), 0.0f, 1.0f);
      if (cfg_.trace_every_iteration || it == b.max_iters) {
        record(out, it, x_adv);
      }
    }
    out.adversarial = std::move(x_adv);
    if (mixer_) {
      for (const auto& [_, n] : mixer_->events()) out.mixing_events += n;
    }
    return out;
  }

 private:
  // Gradient of the loss at x averaged over input copies and transforms.
  Tensor expected_gradient(const Tensor& x, ChunkOutcome& out) {
    std::vector<AdmixCopy> copies;
    if (cfg_.admix) {
      const std::size_t m1 = cfg_.si ? cfg_.si_scales : cfg_.admix_scales;
      auto a = admix_inputs(x, admix_rng_, m1, cfg_.admix_copies, cfg_.admix_eta);
      out.admix_fallbacks += a.fallback ? 1 : 0;
      copies = std::move(a.copies);
    } else if (cfg_.si) {
      for (std::size_t i = 0; i < cfg_.si_scales; ++i) {
        const double gamma = 1.0 / static_cast<double>(1ull << i);
        copies.push_back({x * static_cast<float>(gamma), gamma});
      }
    } else {
      copies.push_back({x, 1.0});
    }
    Tensor acc(x.shape());
    for (const auto& c : copies) {
      ResizePlan plan;
      plan.in_h = x.dim(2);
      plan.in_w = x.dim(3);
      if (cfg_.di) {
        plan = draw_di_plan(x.dim(2), x.dim(3), cfg_.di_prob, cfg_.di_max_scale, di_rng_);
      } else if (cfg_.rdi) {
        plan = draw_rdi_plan(x.dim(2), x.dim(3), cfg_.di_prob, cfg_.rdi_scale, di_rng_);
      }
      if (mixer_ && cfg_.recompute_clean_features) {
        mixer_->set_store(std::make_shared<const FeatureStore>(
            build_store(model_, plan.apply(clean_), *cfg_.mixing)));
      }
      auto r = input_gradient(model_, plan.apply(c.input), cfg_.loss, targets_,
                              mixer_ ? &hook_fn_ : nullptr);
      out.degenerate += r.degenerate;
      axpy_inplace(acc, static_cast<float>(c.scale), plan.backward(r.grad));
    }
    return acc * (1.0f / static_cast<float>(copies.size()));
  }

  Tensor direction(const Tensor& x, Tensor& variance, ChunkOutcome& out) {
    auto smoothed = [&](const Tensor& p) {
      Tensor g = expected_gradient(p, out);
      return cfg_.ti ? ti_smooth(g, cfg_.ti_kernel) : g;
    };
    if (!cfg_.vt) {
      return smoothed(x);
    }
    return vt_gradient(smoothed, x, variance, cfg_.vt_samples, cfg_.vt_beta, cfg_.budget.eps,
                       vt_rng_);
  }

  void record(ChunkOutcome& out, std::size_t iter, const Tensor& x) {
    const auto trace = model_.forward(x);
    std::optional<AngleTerms<float>> angle;
    if (cfg_.loss.kind == LossKind::AngleLogit) {
      angle = angle_terms(model_, trace);
    }
    const auto lv = evaluate_loss(cfg_.loss, trace.logits, targets_, angle ? &*angle : nullptr);
    const std::size_t k = trace.logits.dim(1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      hits += argmax(std::span<const float>(trace.logits.ptr() + i * k, k)) == targets_[i] ? 1 : 0;
    }
    out.iters.push_back(iter);
    out.loss_sum.push_back(static_cast<double>(lv.loss) * static_cast<double>(targets_.size()));
    out.hits.push_back(hits);
  }

  const Model<float>& model_;
  const Tensor& clean_;
  std::span<const std::size_t> targets_;
  const AttackConfig& cfg_;
  Rng di_rng_;
  Rng vt_rng_;
  Rng admix_rng_;
  std::shared_ptr<FeatureMixer> mixer_;
  HookFn<float> hook_fn_;
};

} // namespace

AttackResult run_attack(const Model<float>& model, const Tensor& images,
                        std::span<const std::size_t> targets, const AttackConfig& config) {
  config.validate();
  if (images.rank() != 4 || images.dim(0) != targets.size()) {
    throw ShapeError("run_attack: need N×C×H×W images and N targets, got " +
                     shape_str(images.shape()) + " and " + std::to_string(targets.size()));
  }
  const auto& in = model.arch().input;
  if (images.dim(1) != in.channels || images.dim(2) != in.height || images.dim(3) != in.width) {
    throw ShapeError("run_attack: " + model.arch().name + " takes " + std::to_string(in.channels) +
                     "×" + std::to_string(in.height) + "×" + std::to_string(in.width) +
                     " images, got " + shape_str(images.shape()));
  }
  if (images.dim(0) == 0) {
    throw ValueError("run_attack: empty batch");
  }
  for (auto t : targets) {
    if (t >= model.num_classes()) {
      throw ValueError("run_attack: target " + std::to_string(t) + " out of range");
    }
  }
  const std::size_t n = images.dim(0);
  AttackResult res;
  res.samples = n;
  std::vector<Tensor> parts;
  for (std::size_t b = 0, chunk = 0; b < n; b += config.batch_size, ++chunk) {
    const std::size_t e = std::min(n, b + config.batch_size);
    const Tensor clean = images.slice_outer(b, e);
    ChunkAttack attack(model, clean, targets.subspan(b, e - b), config,
                       mix_seed(config.seed, chunk));
    ChunkOutcome o;
    try {
      o = attack.run();
    } catch (const DivergenceError& err) {
      throw DivergenceError("chunk " + std::to_string(chunk) + ", " + err.what());
    }
    if (res.trace.empty()) {
      for (std::size_t r = 0; r < o.iters.size(); ++r) {
        res.trace.push_back({o.iters[r], 0.0, 0});
      }
    }
    for (std::size_t r = 0; r < o.iters.size(); ++r) {
      res.trace[r].mean_loss += o.loss_sum[r];
      res.trace[r].whitebox_target_hits += o.hits[r];
    }
    res.degenerate_calibrations += o.degenerate;
    res.admix_fallbacks += o.admix_fallbacks;
    res.mixing_events += o.mixing_events;
    parts.push_back(std::move(o.adversarial));
  }
  for (auto& row : res.trace) {
    row.mean_loss /= static_cast<double>(n);
  }
  res.adversarial = concat_outer<float>(parts);
  return res;
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "iter,mean_loss,whitebox_target_hits\n";
  for (const auto& r : trace) {
    os << r.iter << ',' << r.mean_loss << ',' << r.whitebox_target_hits << '\n';
  }
}

template GradientResult<float> input_gradient(const Model<float>&, const Tensor&, const LossSpec&,
                                              std::span<const std::size_t>, const HookFn<float>*);
template GradientResult<double> input_gradient(const Model<double>&, const Tensor64&,
                                               const LossSpec&, std::span<const std::size_t>,
                                               const HookFn<double>*);

} // namespace tal
