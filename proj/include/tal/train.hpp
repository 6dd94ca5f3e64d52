#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "tal/data.hpp"
#include "tal/net.hpp"

namespace tal {

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Random horizontal flips and ±2 px translations.
  bool augment = true;
  /// Cosine decay of the learning rate to zero over all steps.
  bool cosine_schedule = true;
  /// Linear ramp of the learning rate from zero over the first epochs.
  double warmup_epochs = 1.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0;
  double train_accuracy = 0;  // percent, on the augmented minibatches
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double train_accuracy = 0;  // percent, clean pass after training
  double val_accuracy = -1;   // percent; -1 when no validation set was given
};

struct TrainResult {
  Model<float> model;
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// SGD with momentum on cross-entropy. Deterministic under `opts.seed`.
/// Zero epochs returns the seeded initial weights. Throws DivergenceError
/// when the loss becomes non-finite.
TrainResult train_model(const Architecture& arch, const LabeledDataset& train,
                        const TrainOptions& opts, const LabeledDataset* val = nullptr,
                        const EpochCallback& on_epoch = {});

/// Percentage of samples whose argmax prediction equals the label.
double accuracy(const Model<float>& model, const Tensor& images,
                const std::vector<std::size_t>& labels, std::size_t batch_size = 100);

} // namespace tal
