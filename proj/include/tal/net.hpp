#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tal/tensor.hpp"

namespace tal {

enum class LayerKind { Conv2d, Relu, MaxPool, AvgPool, GlobalAvgPool, Flatten, Linear };

/// One entry of a sequential architecture. Fields not used by a kind are 0.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t in = 0;       // conv input channels / linear input features
  std::size_t out = 0;      // conv output channels / linear output features
  std::size_t kernel = 0;   // conv and pooling window
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec avg_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec global_avg_pool();
  static LayerSpec flatten();
  static LayerSpec linear(std::size_t in, std::size_t out);

  bool has_params() const { return kind == LayerKind::Conv2d || kind == LayerKind::Linear; }
  bool is_pool() const {
    return kind == LayerKind::MaxPool || kind == LayerKind::AvgPool ||
           kind == LayerKind::GlobalAvgPool;
  }
  Shape weight_shape() const;
  Shape bias_shape() const;

  /// Text form used in weight-file descriptors, e.g. "conv2d 3 16 3 1 1".
  std::string to_line() const;
  static LayerSpec parse(std::string_view line);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct InputSpec {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct Architecture {
  std::string name;
  InputSpec input;
  std::size_t num_classes = 10;
  std::vector<LayerSpec> layers;

  /// Checks that consecutive layers compose for the nominal input and that
  /// the last layer is a Linear emitting num_classes logits.
  void validate() const;

  std::vector<std::string> descriptor_lines() const;
  static Architecture from_descriptor(const std::vector<std::string>& lines);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Built-in desk-scale model zoo: "zoo-a", "zoo-b", "zoo-c".
Architecture zoo_architecture(std::string_view name, std::size_t num_classes = 10);
std::vector<std::string> zoo_names();

/// A named feature position: the activation after `layer_index`.
struct HookPoint {
  std::string name;
  std::size_t layer_index = 0;
  std::size_t pools_before = 0;
  std::size_t channels = 0;
};

/// Replacement for a hooked feature. `gate` (N×C) is the per-channel
/// derivative of the new feature w.r.t. the original one; the remainder of
/// the replacement is a constant under differentiation.
template <typename T>
struct HookEdit {
  BasicTensor<T> feature;
  BasicTensor<T> gate;
};

template <typename T>
using HookFn =
    std::function<std::optional<HookEdit<T>>(const HookPoint&, const BasicTensor<T>& feature)>;

template <typename T>
struct ForwardOptions {
  const HookFn<T>* hook = nullptr;
  /// Hook names whose (pre-edit) features are copied into the trace.
  std::vector<std::string> capture;
};

template <typename T>
struct ForwardTrace {
  /// activations[0] is the input; activations[i + 1] is the output of layer
  /// i, after any hook edit.
  std::vector<BasicTensor<T>> activations;
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::map<std::size_t, BasicTensor<T>> gates;
  std::map<std::string, BasicTensor<T>> captured;
  BasicTensor<T> logits;  // N × num_classes

  /// φ(x): the input of the final linear layer, N × D.
  const BasicTensor<T>& penultimate() const { return activations[activations.size() - 2]; }
};

template <typename T>
struct ParamGrads {
  std::vector<BasicTensor<T>> weight;  // indexed by layer; empty for parameter-free layers
  std::vector<BasicTensor<T>> bias;
};

/// Sequential differentiable CNN.
template <typename T>
class Model {
 public:
  /// All parameters zero.
  explicit Model(Architecture arch);
  /// He-normal weights, zero biases.
  static Model initialized(Architecture arch, std::uint64_t seed);

  const Architecture& arch() const { return arch_; }
  std::size_t num_classes() const { return arch_.num_classes; }
  std::size_t layer_count() const { return arch_.layers.size(); }

  const std::vector<HookPoint>& hook_points() const { return hooks_; }
  /// Throws ConfigError for names that are not hook points.
  const HookPoint& hook(std::string_view name) const;
  /// Conv hooks preceded by at least two pooling layers.
  std::vector<std::string> high_level_hooks() const;

  const BasicTensor<T>& weight(std::size_t layer) const { return weights_.at(layer); }
  const BasicTensor<T>& bias(std::size_t layer) const { return biases_.at(layer); }
  BasicTensor<T>& weight(std::size_t layer) { return weights_.at(layer); }
  BasicTensor<T>& bias(std::size_t layer) { return biases_.at(layer); }

  ForwardTrace<T> forward(const BasicTensor<T>& batch, const ForwardOptions<T>& opts = {}) const;
  BasicTensor<T> logits(const BasicTensor<T>& batch) const { return forward(batch).logits; }

  /// Reverse pass from dLoss/dlogits. Returns dLoss/dinput; fills
  /// parameter gradients when `grads` is given.
  BasicTensor<T> backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits,
                          ParamGrads<T>* grads = nullptr) const;

  /// ‖w_i‖ for each row of the final linear layer.
  std::vector<T> classifier_weight_norms() const;

  template <typename U>
  Model<U> cast() const {
    Model<U> out(arch_);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (arch_.layers[i].has_params()) {
        out.weight(i) = weights_[i].template cast<U>();
        out.bias(i) = biases_[i].template cast<U>();
      }
    }
    return out;
  }

 private:
  Architecture arch_;
  std::vector<BasicTensor<T>> weights_;
  std::vector<BasicTensor<T>> biases_;
  std::vector<HookPoint> hooks_;
};

using ModelGraph = Model<float>;

} // namespace tal
