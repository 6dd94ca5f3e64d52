#include "tal/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "tal/loss.hpp"
#include "tal/rng.hpp"

namespace tal {

namespace {

// Copies sample `src` into slot `dst` of `out`, optionally flipped and shifted
// (zero fill).
void place(const Tensor& images, std::size_t src, Tensor& out, std::size_t dst, bool flip,
           int dy, int dx) {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const float* in = images.ptr() + src * c * h * w;
  float* o = out.ptr() + dst * c * h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) - dy;
      for (std::size_t x = 0; x < w; ++x) {
        long sx = static_cast<long>(x) - dx;
        if (flip) {
          sx = static_cast<long>(w) - 1 - sx;
        }
        float v = 0;
        if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w)) {
          v = in[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
        o[(ch * h + y) * w + x] = v;
      }
    }
  }
}

} // namespace

double accuracy(const Model<float>& model, const Tensor& images,
                const std::vector<std::size_t>& labels, std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  if (n == 0) {
    throw ValueError("accuracy: empty dataset");
  }
  std::size_t hits = 0;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const auto logits = model.logits(images.slice_outer(b, e));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = b; i < e; ++i) {
      const std::span<const float> row(logits.ptr() + (i - b) * k, k);
      hits += argmax(row) == labels[i] ? 1 : 0;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

TrainResult train_model(const Architecture& arch, const LabeledDataset& train,
                        const TrainOptions& opts, const LabeledDataset* val,
                        const EpochCallback& on_epoch) {
  train.validate();
  if (train.size() == 0) {
    throw ValueError("train_model: empty dataset");
  }
  if (opts.batch_size == 0 || !(opts.lr > 0) || !(opts.warmup_epochs >= 0)) {
    throw ConfigError("train_model: batch size and learning rate must be positive, warmup non-negative");
  }
  if (train.num_classes != arch.num_classes) {
    throw SpecMismatchError("train_model: dataset has " + std::to_string(train.num_classes) +
                            " classes, architecture expects " + std::to_string(arch.num_classes));
  }
  TrainResult res{Model<float>::initialized(arch, mix_seed(opts.seed, hash_name("init"))), {}};
  Model<float>& model = res.model;
  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + opts.batch_size - 1) / opts.batch_size;
  const std::size_t total_steps = steps_per_epoch * opts.epochs;

  std::vector<Tensor> velocity_w(model.layer_count()), velocity_b(model.layer_count());
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (arch.layers[i].has_params()) {
      velocity_w[i] = Tensor(model.weight(i).shape());
      velocity_b[i] = Tensor(model.bias(i).shape());
    }
  }
  const LossSpec ce{LossKind::CE};
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng = Rng::stream(opts.seed, "epoch-" + std::to_string(epoch));
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < n; b += opts.batch_size, ++step) {
      const std::size_t e = std::min(n, b + opts.batch_size);
      Shape s = train.images.shape();
      s[0] = e - b;
      auto batch = Tensor::uninitialized(s);
      std::vector<std::size_t> labels;
      for (std::size_t j = b; j < e; ++j) {
        bool flip = false;
        int dy = 0, dx = 0;
        if (opts.augment) {
          flip = rng.below(2) == 1;
          dy = static_cast<int>(rng.below(5)) - 2;
          dx = static_cast<int>(rng.below(5)) - 2;
        }
        place(train.images, order[j], batch, j - b, flip, dy, dx);
        labels.push_back(train.labels[order[j]]);
      }
      const auto trace = model.forward(batch);
      LossValue<float> lv;
      try {
        lv = evaluate_loss(ce, trace.logits, labels);
      } catch (const DivergenceError&) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + " (loss is not finite)");
      }
      loss_sum += lv.loss * static_cast<double>(e - b);
      const std::size_t k = trace.logits.dim(1);
      for (std::size_t j = 0; j < e - b; ++j) {
        hits += argmax(std::span<const float>(trace.logits.ptr() + j * k, k)) == labels[j] ? 1 : 0;
      }
      ParamGrads<float> grads;
      model.backward(trace, lv.grad, &grads);
      double lr = opts.lr;
      if (opts.cosine_schedule && total_steps > 0) {
        lr *= 0.5 * (1 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                  static_cast<double>(total_steps)));
      }
      const double warmup = opts.warmup_epochs * static_cast<double>(steps_per_epoch);
      if (static_cast<double>(step) < warmup) {
        lr *= static_cast<double>(step + 1) / warmup;
      }
      for (std::size_t i = 0; i < model.layer_count(); ++i) {
        if (!arch.layers[i].has_params()) {
          continue;
        }
        auto update = [&](Tensor& param, Tensor& vel, const Tensor& g, double decay) {
          for (std::size_t q = 0; q < param.numel(); ++q) {
            const double d = static_cast<double>(g[q]) + decay * static_cast<double>(param[q]);
            vel[q] = static_cast<float>(opts.momentum * vel[q] + d);
            param[q] = static_cast<float>(param[q] - lr * vel[q]);
          }
        };
        update(model.weight(i), velocity_w[i], grads.weight[i], opts.weight_decay);
        update(model.bias(i), velocity_b[i], grads.bias[i], 0.0);
        if (!model.weight(i).all_finite()) {
          throw DivergenceError("training diverged: non-finite weights in layer " +
                                std::to_string(i) + " at step " + std::to_string(step));
        }
      }
    }
    EpochStats es{epoch, loss_sum / static_cast<double>(n),
                  100.0 * static_cast<double>(hits) / static_cast<double>(n)};
    res.report.epochs.push_back(es);
    if (on_epoch) {
      on_epoch(es);
    }
  }
  res.report.train_accuracy = accuracy(model, train.images, train.labels);
  if (val && val->size() > 0) {
    res.report.val_accuracy = accuracy(model, val->images, val->labels);
  }
  return res;
}

} // namespace tal
