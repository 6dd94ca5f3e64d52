#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tal/net.hpp"
#include "tal/rng.hpp"
#include "tal/svd.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// What happens to the leading singular components of a stored clean feature.
enum class MixVariant {
  RemoveRank1,      // X - r1            (TFM)
  RemoveHalfRank1,  // X - 0.5 r1
  RemoveRank12,     // X - r1 - r2
  AddHalfRank1,     // X + 0.5 r1
  AddRank1,         // X + r1
  Cfm,              // X unchanged       (clean feature mixup)
};

/// CLI names: rank1, half-rank1, rank12, add-half-rank1, add-rank1, cfm.
std::string to_string(MixVariant v);
MixVariant parse_mix_variant(std::string_view name);

struct MixConfig {
  /// Hooks to mix at; empty selects default_mix_hooks().
  std::vector<std::string> hooks;
  double probability = 0.1;
  double alpha_max = 0.75;
  MixVariant variant = MixVariant::RemoveRank1;
  bool shuffle = true;
  /// Draw α once per hook and keep it for the whole run.
  bool reuse_alpha = false;
  SvdOptions svd;

  void validate() const;
};

/// Conv hooks after at least two pooling stages; the last two conv hooks
/// when the model has none.
std::vector<std::string> default_mix_hooks(const Model<float>& model);

/// Applies `variant` to one C×H×W feature (reshaped to C×HW for the SVD).
/// ConvergenceError messages are prefixed with `where` when given.
template <typename T>
BasicTensor<T> truncate_feature(const BasicTensor<T>& feature, MixVariant variant,
                                const SvdOptions& svd = {}, std::string_view where = {});

/// Stored clean features per hook, N×C×H×W each, constant during an attack.
struct FeatureStore {
  MixVariant variant = MixVariant::RemoveRank1;
  std::map<std::string, Tensor> features;

  bool contains(std::string_view hook) const;
  /// Throws ConfigError for hooks that were not stored.
  const Tensor& at(std::string_view hook) const;
};

/// One clean forward capturing the configured hooks, then a per-sample
/// truncation. Throws ConfigError when no hook is eligible.
FeatureStore build_store(const Model<float>& model, const Tensor& clean, const MixConfig& config);

/// X̂ ← α ⊙ X̂ + (1 - α) ⊙ X'[perm]. `alpha` is N×C; `perm[i]` names the
/// stored sample mixed into row i.
template <typename T>
BasicTensor<T> mix(const BasicTensor<T>& adv, const BasicTensor<T>& stored,
                   const BasicTensor<T>& alpha, std::span<const std::size_t> perm);

struct MixDraw {
  Tensor alpha;                   // N×C, U(0, alpha_max)
  std::vector<std::size_t> perm;  // identity when shuffle is off
};

MixDraw draw_mix(std::size_t batch, std::size_t channels, double alpha_max, bool shuffle, Rng& rng);

/// Stateful per-run mixer. Each hook owns an RNG stream derived from
/// (seed, hook name), so toggling one hook leaves the draws of the others
/// unchanged. Stored features are bilinearly resized when the live feature
/// has a different spatial size (input transforms that change resolution).
class FeatureMixer {
 public:
  FeatureMixer(std::shared_ptr<const FeatureStore> store, MixConfig config, std::uint64_t seed);

  /// Returns an edit when the hook is mixed this call, nothing otherwise.
  std::optional<HookEdit<float>> operator()(const HookPoint& hook, const Tensor& feature);

  /// Swaps the stored features; RNG streams continue where they were.
  void set_store(std::shared_ptr<const FeatureStore> store);

  /// Mixing events so far, per hook.
  const std::map<std::string, std::size_t>& events() const { return events_; }

 private:
  struct HookState {
    Rng rng;
    Tensor fixed_alpha;
  };
  std::shared_ptr<const FeatureStore> store_;
  MixConfig config_;
  std::map<std::string, HookState, std::less<>> state_;
  std::map<std::string, std::size_t> events_;
};

/// Hook callback for Model::forward backed by a fresh FeatureMixer.
HookFn<float> mixing_callback(std::shared_ptr<const FeatureStore> store, const MixConfig& config,
                              std::uint64_t seed);

} // namespace tal
