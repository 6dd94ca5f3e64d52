#include "tal/mixing.hpp"

#include <algorithm>
#include <numeric>

namespace tal {

std::string to_string(MixVariant v) {
  switch (v) {
    case MixVariant::RemoveRank1:
      return "rank1";
    case MixVariant::RemoveHalfRank1:
      return "half-rank1";
    case MixVariant::RemoveRank12:
      return "rank12";
    case MixVariant::AddHalfRank1:
      return "add-half-rank1";
    case MixVariant::AddRank1:
      return "add-rank1";
    case MixVariant::Cfm:
      return "cfm";
  }
  return "?";
}

MixVariant parse_mix_variant(std::string_view name) {
  for (auto v : {MixVariant::RemoveRank1, MixVariant::RemoveHalfRank1, MixVariant::RemoveRank12,
                 MixVariant::AddHalfRank1, MixVariant::AddRank1, MixVariant::Cfm}) {
    if (to_string(v) == name) {
      return v;
    }
  }
  throw ConfigError("unknown mixing variant '" + std::string(name) +
                    "' (expected rank1, half-rank1, rank12, add-half-rank1, add-rank1 or cfm)");
}

void MixConfig::validate() const {
  if (!(probability >= 0 && probability <= 1)) {
    throw ConfigError("mixing probability must lie in [0, 1]");
  }
  if (!(alpha_max >= 0 && alpha_max <= 1)) {
    throw ConfigError("alpha_max must lie in [0, 1]");
  }
  if (!(svd.tol > 0) || svd.max_iters == 0) {
    throw ConfigError("SVD tolerance and iteration cap must be positive");
  }
}

std::vector<std::string> default_mix_hooks(const Model<float>& model) {
  auto hooks = model.high_level_hooks();
  if (hooks.empty()) {
    const auto& all = model.hook_points();
    for (std::size_t i = all.size() >= 2 ? all.size() - 2 : 0; i < all.size(); ++i) {
      hooks.push_back(all[i].name);
    }
  }
  return hooks;
}

template <typename T>
BasicTensor<T> truncate_feature(const BasicTensor<T>& feature, MixVariant variant,
                                const SvdOptions& svd, std::string_view where) {
  if (feature.rank() != 3) {
    throw ShapeError("truncate_feature expects C×H×W, got " + shape_str(feature.shape()));
  }
  if (variant == MixVariant::Cfm) {
    return feature;
  }
  const std::size_t c = feature.dim(0), hw = feature.dim(1) * feature.dim(2);
  const auto x = feature.reshape({c, hw});
  const std::size_t k = variant == MixVariant::RemoveRank12 ? 2 : 1;
  std::vector<SvdTriplet<T>> trips;
  try {
    trips = topk_svd(x, std::min({k, c, hw}), svd);
  } catch (const ConvergenceError& e) {
    if (where.empty()) {
      throw;
    }
    throw ConvergenceError(std::string(where) + ": " + e.what(), e.residual());
  }
  T coeff = 0;
  switch (variant) {
    case MixVariant::RemoveRank1:
    case MixVariant::RemoveRank12:
      coeff = T{-1};
      break;
    case MixVariant::RemoveHalfRank1:
      coeff = T{-0.5};
      break;
    case MixVariant::AddHalfRank1:
      coeff = T{0.5};
      break;
    case MixVariant::AddRank1:
      coeff = T{1};
      break;
    case MixVariant::Cfm:
      break;
  }
  BasicTensor<T> out = x;
  for (const auto& t : trips) {
    axpy_inplace(out, coeff, rank1_component(t));
  }
  return out.reshape(feature.shape());
}

bool FeatureStore::contains(std::string_view hook) const {
  return features.find(std::string(hook)) != features.end();
}

const Tensor& FeatureStore::at(std::string_view hook) const {
  auto it = features.find(std::string(hook));
  if (it == features.end()) {
    throw ConfigError("feature store has no entry for hook '" + std::string(hook) + "'");
  }
  return it->second;
}

FeatureStore build_store(const Model<float>& model, const Tensor& clean, const MixConfig& config) {
  config.validate();
  auto hooks = config.hooks.empty() ? default_mix_hooks(model) : config.hooks;
  if (hooks.empty()) {
    throw ConfigError(model.arch().name + " has no convolutional hook eligible for mixing");
  }
  for (const auto& h : hooks) {
    model.hook(h);
  }
  ForwardOptions<float> opts;
  opts.capture = hooks;
  const auto trace = model.forward(clean, opts);
  FeatureStore store;
  store.variant = config.variant;
  for (const auto& h : hooks) {
    const Tensor& raw = trace.captured.at(h);
    Tensor out = Tensor::uninitialized(raw.shape());
    const std::size_t per = raw.numel() / raw.dim(0);
    for (std::size_t n = 0; n < raw.dim(0); ++n) {
      const auto sample = raw.slice_outer(n, n + 1).reshape({raw.dim(1), raw.dim(2), raw.dim(3)});
      const auto t = truncate_feature(sample, config.variant, config.svd,
                                      "hook " + h + ", sample " + std::to_string(n));
      std::copy_n(t.ptr(), per, out.ptr() + n * per);
    }
    store.features.emplace(h, std::move(out));
  }
  return store;
}

template <typename T>
BasicTensor<T> mix(const BasicTensor<T>& adv, const BasicTensor<T>& stored,
                   const BasicTensor<T>& alpha, std::span<const std::size_t> perm) {
  if (adv.shape() != stored.shape() || adv.rank() < 2) {
    throw ShapeError("mix: feature shapes differ: " + shape_str(adv.shape()) + " vs " +
                     shape_str(stored.shape()));
  }
  const std::size_t n = adv.dim(0), c = adv.dim(1);
  if (alpha.shape() != Shape{n, c} || perm.size() != n) {
    throw ShapeError("mix: alpha must be N×C and perm must have N entries");
  }
  const std::size_t plane = adv.numel() / (n * c);
  auto out = BasicTensor<T>::uninitialized(adv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] >= n) {
      throw ValueError("mix: permutation index out of range");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T a = alpha[i * c + ch];
      const T* x = adv.ptr() + (i * c + ch) * plane;
      const T* s = stored.ptr() + (perm[i] * c + ch) * plane;
      T* o = out.ptr() + (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        o[p] = a * x[p] + (T{1} - a) * s[p];
      }
    }
  }
  return out;
}

MixDraw draw_mix(std::size_t batch, std::size_t channels, double alpha_max, bool shuffle,
                 Rng& rng) {
  MixDraw d;
  d.alpha = Tensor::uninitialized({batch, channels});
  for (std::size_t i = 0; i < d.alpha.numel(); ++i) {
    d.alpha[i] = static_cast<float>(rng.uniform(0.0, alpha_max));
  }
  d.perm.resize(batch);
  std::iota(d.perm.begin(), d.perm.end(), 0);
  if (shuffle) {
    for (std::size_t i = batch; i > 1; --i) {
      std::swap(d.perm[i - 1], d.perm[rng.below(i)]);
    }
  }
  return d;
}

FeatureMixer::FeatureMixer(std::shared_ptr<const FeatureStore> store, MixConfig config,
                           std::uint64_t seed)
    : store_(std::move(store)), config_(std::move(config)) {
  config_.validate();
  if (!store_) {
    throw ConfigError("FeatureMixer needs a feature store");
  }
  for (const auto& name : config_.hooks) {
    store_->at(name);
  }
  for (const auto& [name, _] : store_->features) {
    state_.emplace(name, HookState{Rng::stream(seed, "mix/" + name), {}});
    events_[name] = 0;
  }
}

void FeatureMixer::set_store(std::shared_ptr<const FeatureStore> store) {
  if (!store) {
    throw ConfigError("FeatureMixer needs a feature store");
  }
  for (const auto& [name, _] : store->features) {
    if (state_.find(name) == state_.end()) {
      throw ConfigError("replacement store adds hook '" + name + "'");
    }
  }
  store_ = std::move(store);
}

std::optional<HookEdit<float>> FeatureMixer::operator()(const HookPoint& hook,
                                                        const Tensor& feature) {
  auto it = state_.find(hook.name);
  if (it == state_.end()) {
    return std::nullopt;
  }
  HookState& st = it->second;
  if (!(st.rng.uniform() < config_.probability)) {
    return std::nullopt;
  }
  const Tensor* stored = &store_->at(hook.name);
  Tensor resized;
  if (stored->dim(0) != feature.dim(0) || stored->dim(1) != feature.dim(1)) {
    throw ShapeError("hook " + hook.name + ": stored features are " + shape_str(stored->shape()) +
                     ", live feature is " + shape_str(feature.shape()));
  }
  if (stored->shape() != feature.shape()) {
    resized = resize_bilinear(*stored, feature.dim(2), feature.dim(3));
    stored = &resized;
  }
  MixDraw d = draw_mix(feature.dim(0), feature.dim(1), config_.alpha_max, config_.shuffle, st.rng);
  if (config_.reuse_alpha) {
    if (st.fixed_alpha.shape() != d.alpha.shape()) {
      st.fixed_alpha = d.alpha;
    }
    d.alpha = st.fixed_alpha;
  }
  ++events_[hook.name];
  HookEdit<float> edit{mix(feature, *stored, d.alpha, d.perm), d.alpha};
  return edit;
}

HookFn<float> mixing_callback(std::shared_ptr<const FeatureStore> store, const MixConfig& config,
                              std::uint64_t seed) {
  auto mixer = std::make_shared<FeatureMixer>(std::move(store), config, seed);
  return [mixer](const HookPoint& h, const Tensor& f) { return (*mixer)(h, f); };
}

#define TAL_INSTANTIATE(T)                                                                     \
  template BasicTensor<T> truncate_feature(const BasicTensor<T>&, MixVariant, const SvdOptions&, \
                                           std::string_view);                                  \
  template BasicTensor<T> mix(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                              const BasicTensor<T>&, std::span<const std::size_t>);
TAL_INSTANTIATE(float)
TAL_INSTANTIATE(double)
#undef TAL_INSTANTIATE

} // namespace tal
