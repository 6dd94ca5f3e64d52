#include "tal/net.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tal/rng.hpp"

namespace tal {

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  return {LayerKind::Conv2d, in, out, kernel, stride, padding};
}
LayerSpec LayerSpec::relu() { return {LayerKind::Relu, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::max_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::MaxPool, 0, 0, kernel, stride, 0};
}
LayerSpec LayerSpec::avg_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::AvgPool, 0, 0, kernel, stride, 0};
}
LayerSpec LayerSpec::global_avg_pool() { return {LayerKind::GlobalAvgPool, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  return {LayerKind::Linear, in, out, 0, 1, 0};
}

Shape LayerSpec::weight_shape() const {
  switch (kind) {
    case LayerKind::Conv2d:
      return {out, in, kernel, kernel};
    case LayerKind::Linear:
      return {out, in};
    default:
      return {};
  }
}

Shape LayerSpec::bias_shape() const {
  if (!has_params()) {
    return {};
  }
  return {out};
}

std::string LayerSpec::to_line() const {
  std::ostringstream os;
  switch (kind) {
    case LayerKind::Conv2d:
      os << "conv2d " << in << ' ' << out << ' ' << kernel << ' ' << stride << ' ' << padding;
      break;
    case LayerKind::Relu:
      os << "relu";
      break;
    case LayerKind::MaxPool:
      os << "maxpool " << kernel << ' ' << stride;
      break;
    case LayerKind::AvgPool:
      os << "avgpool " << kernel << ' ' << stride;
      break;
    case LayerKind::GlobalAvgPool:
      os << "gap";
      break;
    case LayerKind::Flatten:
      os << "flatten";
      break;
    case LayerKind::Linear:
      os << "linear " << in << ' ' << out;
      break;
  }
  return os.str();
}

LayerSpec LayerSpec::parse(std::string_view line) {
  std::istringstream is{std::string(line)};
  std::string word;
  is >> word;
  auto need = [&](std::size_t& v) {
    if (!(is >> v)) {
      throw ConfigError("malformed layer line: '" + std::string(line) + "'");
    }
  };
  LayerSpec s;
  if (word == "conv2d") {
    s.kind = LayerKind::Conv2d;
    need(s.in);
    need(s.out);
    need(s.kernel);
    need(s.stride);
    need(s.padding);
  } else if (word == "relu") {
    s = relu();
  } else if (word == "maxpool" || word == "avgpool") {
    s.kind = word == "maxpool" ? LayerKind::MaxPool : LayerKind::AvgPool;
    need(s.kernel);
    need(s.stride);
  } else if (word == "gap") {
    s = global_avg_pool();
  } else if (word == "flatten") {
    s = flatten();
  } else if (word == "linear") {
    s.kind = LayerKind::Linear;
    need(s.in);
    need(s.out);
  } else {
    throw ConfigError("unknown layer kind '" + word + "'");
  }
  std::string extra;
  if (is >> extra) {
    throw ConfigError("trailing tokens in layer line: '" + std::string(line) + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Architecture

void Architecture::validate() const {
  if (layers.empty() || layers.back().kind != LayerKind::Linear) {
    throw ConfigError(name + ": architecture must end with a linear layer");
  }
  if (layers.back().out != num_classes) {
    throw ConfigError(name + ": final layer emits " + std::to_string(layers.back().out) +
                      " logits, expected " + std::to_string(num_classes));
  }
  Shape s{1, input.channels, input.height, input.width};
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (s.size() != 4 || s[1] != l.in) {
          throw ConfigError(name + ": conv expects " + std::to_string(l.in) + " channels, got " +
                            shape_str(s));
        }
        s = {1, l.out, conv_out_extent(s[2], l.kernel, l.stride, l.padding),
             conv_out_extent(s[3], l.kernel, l.stride, l.padding)};
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        if (s.size() != 4) {
          throw ConfigError(name + ": pooling needs a 4-d input");
        }
        s = {1, s[1], conv_out_extent(s[2], l.kernel, l.stride, 0),
             conv_out_extent(s[3], l.kernel, l.stride, 0)};
        break;
      case LayerKind::GlobalAvgPool:
        if (s.size() != 4) {
          throw ConfigError(name + ": global pooling needs a 4-d input");
        }
        s = {1, s[1]};
        break;
      case LayerKind::Flatten:
        s = {1, shape_numel(s)};
        break;
      case LayerKind::Linear:
        if (s.size() != 2 || s[1] != l.in) {
          throw ConfigError(name + ": linear expects " + std::to_string(l.in) +
                            " features, got " + shape_str(s));
        }
        s = {1, l.out};
        break;
    }
  }
}

std::vector<std::string> Architecture::descriptor_lines() const {
  std::vector<std::string> lines;
  lines.push_back("name " + name);
  lines.push_back("input " + std::to_string(input.channels) + ' ' + std::to_string(input.height) +
                  ' ' + std::to_string(input.width));
  lines.push_back("classes " + std::to_string(num_classes));
  for (const auto& l : layers) {
    lines.push_back(l.to_line());
  }
  return lines;
}

Architecture Architecture::from_descriptor(const std::vector<std::string>& lines) {
  if (lines.size() < 3) {
    throw ConfigError("architecture descriptor too short");
  }
  Architecture a;
  auto header = [&](std::size_t i, std::string_view key) {
    if (lines[i].rfind(std::string(key) + ' ', 0) != 0) {
      throw ConfigError("descriptor line " + std::to_string(i) + " must start with '" +
                        std::string(key) + "'");
    }
    return lines[i].substr(key.size() + 1);
  };
  a.name = header(0, "name");
  {
    std::istringstream is(header(1, "input"));
    if (!(is >> a.input.channels >> a.input.height >> a.input.width)) {
      throw ConfigError("malformed input line");
    }
  }
  {
    std::istringstream is(header(2, "classes"));
    if (!(is >> a.num_classes)) {
      throw ConfigError("malformed classes line");
    }
  }
  for (std::size_t i = 3; i < lines.size(); ++i) {
    a.layers.push_back(LayerSpec::parse(lines[i]));
  }
  a.validate();
  return a;
}

Architecture zoo_architecture(std::string_view name, std::size_t num_classes) {
  Architecture a;
  a.name = std::string(name);
  a.input = {3, 32, 32};
  a.num_classes = num_classes;
  using L = LayerSpec;
  if (name == "zoo-a") {
    // Plain 3×3 stack, max pooling.
    a.layers = {L::conv(3, 16, 3, 1, 1),  L::relu(), L::max_pool(2, 2),
                L::conv(16, 32, 3, 1, 1), L::relu(), L::max_pool(2, 2),
                L::conv(32, 64, 3, 1, 1), L::relu(),
                L::conv(64, 64, 3, 1, 1), L::relu(),
                L::global_avg_pool(),     L::linear(64, num_classes)};
  } else if (name == "zoo-b") {
    // Wide 5×5 stem, average pooling, 1×1 head.
    a.layers = {L::conv(3, 24, 5, 1, 2),  L::relu(), L::avg_pool(2, 2),
                L::conv(24, 48, 3, 1, 1), L::relu(), L::max_pool(2, 2),
                L::conv(48, 96, 3, 1, 1), L::relu(),
                L::conv(96, 96, 1, 1, 0), L::relu(),
                L::global_avg_pool(),     L::linear(96, num_classes)};
  } else if (name == "zoo-c") {
    // Deeper and narrower, three pooling stages.
    a.layers = {L::conv(3, 16, 3, 1, 1),  L::relu(), L::max_pool(2, 2),
                L::conv(16, 32, 3, 1, 1), L::relu(),
                L::conv(32, 32, 3, 1, 1), L::relu(), L::max_pool(2, 2),
                L::conv(32, 48, 3, 1, 1), L::relu(),
                L::conv(48, 48, 3, 1, 1), L::relu(), L::max_pool(2, 2),
                L::conv(48, 64, 3, 1, 1), L::relu(),
                L::global_avg_pool(),     L::linear(64, num_classes)};
  } else {
    throw ConfigError("unknown zoo architecture '" + std::string(name) + "'");
  }
  a.validate();
  return a;
}

std::vector<std::string> zoo_names() { return {"zoo-a", "zoo-b", "zoo-c"}; }

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(Architecture arch) : arch_(std::move(arch)) {
  arch_.validate();
  weights_.resize(arch_.layers.size());
  biases_.resize(arch_.layers.size());
  std::size_t pools = 0;
  std::size_t conv_index = 0;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    if (l.has_params()) {
      weights_[i] = BasicTensor<T>(l.weight_shape());
      biases_[i] = BasicTensor<T>(l.bias_shape());
    }
    if (l.is_pool()) {
      ++pools;
    }
    if (l.kind == LayerKind::Conv2d) {
      ++conv_index;
      const bool relu_next =
          i + 1 < arch_.layers.size() && arch_.layers[i + 1].kind == LayerKind::Relu;
      hooks_.push_back(HookPoint{"conv" + std::to_string(conv_index), relu_next ? i + 1 : i,
                                 pools, l.out});
    }
  }
}

template <typename T>
Model<T> Model<T>::initialized(Architecture arch, std::uint64_t seed) {
  Model m(std::move(arch));
  Rng rng(seed);
  for (std::size_t i = 0; i < m.arch_.layers.size(); ++i) {
    const auto& l = m.arch_.layers[i];
    if (!l.has_params()) {
      continue;
    }
    const auto& ws = m.weights_[i].shape();
    const std::size_t fan_in = shape_numel(ws) / ws[0];
    const bool last = i + 1 == m.arch_.layers.size();
    const double std = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    auto& w = m.weights_[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      w[j] = static_cast<T>(rng.normal() * std);
    }
  }
  return m;
}

template <typename T>
const HookPoint& Model<T>::hook(std::string_view name) const {
  for (const auto& h : hooks_) {
    if (h.name == name) {
      return h;
    }
  }
  throw ConfigError("unknown hook '" + std::string(name) + "' for model " + arch_.name);
}

template <typename T>
std::vector<std::string> Model<T>::high_level_hooks() const {
  std::vector<std::string> out;
  for (const auto& h : hooks_) {
    if (h.pools_before >= 2) {
      out.push_back(h.name);
    }
  }
  return out;
}

template <typename T>
ForwardTrace<T> Model<T>::forward(const BasicTensor<T>& batch, const ForwardOptions<T>& opts) const {
  if (batch.rank() != 4 || batch.dim(1) != arch_.input.channels) {
    throw ShapeError(arch_.name + ": expected N×" + std::to_string(arch_.input.channels) +
                     "×H×W input, got " + shape_str(batch.shape()));
  }
  for (const auto& name : opts.capture) {
    hook(name);
  }
  ForwardTrace<T> tr;
  const std::size_t n_layers = arch_.layers.size();
  tr.activations.reserve(n_layers + 1);
  tr.pool_argmax.resize(n_layers);
  tr.activations.push_back(batch);
  auto hook_it = hooks_.begin();
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = arch_.layers[i];
    const auto& x = tr.activations.back();
    BasicTensor<T> y;
    switch (l.kind) {
      case LayerKind::Conv2d:
        y = conv2d(x, weights_[i], {l.stride, l.padding}, &biases_[i]);
        break;
      case LayerKind::Relu:
        y = BasicTensor<T>::uninitialized(x.shape());
        for (std::size_t j = 0; j < x.numel(); ++j) {
          y[j] = x[j] > T{0} ? x[j] : T{0};
        }
        break;
      case LayerKind::MaxPool:
        y = max_pool2d(x, l.kernel, l.stride, &tr.pool_argmax[i]);
        break;
      case LayerKind::AvgPool:
        y = avg_pool2d(x, l.kernel, l.stride);
        break;
      case LayerKind::GlobalAvgPool: {
        if (x.rank() != 4) {
          throw ShapeError("global pooling needs a 4-d input");
        }
        const std::size_t plane = x.dim(2) * x.dim(3);
        y = BasicTensor<T>::uninitialized({x.dim(0), x.dim(1)});
        const T inv = T{1} / static_cast<T>(plane);
        for (std::size_t j = 0; j < y.numel(); ++j) {
          T s = 0;
          for (std::size_t p = 0; p < plane; ++p) {
            s += x[j * plane + p];
          }
          y[j] = s * inv;
        }
        break;
      }
      case LayerKind::Flatten:
        y = x.reshape({x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
        break;
      case LayerKind::Linear: {
        if (x.rank() != 2 || x.dim(1) != l.in) {
          throw ShapeError(arch_.name + ": linear layer expects " + std::to_string(l.in) +
                           " features, got " + shape_str(x.shape()));
        }
        y = BasicTensor<T>::uninitialized({x.dim(0), l.out});
        for (std::size_t r = 0; r < x.dim(0); ++r) {
          std::copy(biases_[i].data().begin(), biases_[i].data().end(),
                    y.data().begin() + static_cast<std::ptrdiff_t>(r * l.out));
        }
        gemm<T>(false, true, x.dim(0), l.out, l.in, T{1}, x.ptr(), weights_[i].ptr(), T{1},
                y.ptr());
        break;
      }
    }
    if (hook_it != hooks_.end() && hook_it->layer_index == i) {
      const HookPoint& hp = *hook_it;
      ++hook_it;
      if (std::find(opts.capture.begin(), opts.capture.end(), hp.name) != opts.capture.end()) {
        tr.captured[hp.name] = y;
      }
      if (opts.hook && *opts.hook) {
        if (auto edit = (*opts.hook)(hp, y)) {
          if (edit->feature.shape() != y.shape()) {
            throw ShapeError("hook " + hp.name + " returned feature " +
                             shape_str(edit->feature.shape()) + ", expected " +
                             shape_str(y.shape()));
          }
          if (edit->gate.shape() != Shape{y.dim(0), y.dim(1)}) {
            throw ShapeError("hook " + hp.name + " returned gate " +
                             shape_str(edit->gate.shape()));
          }
          y = std::move(edit->feature);
          tr.gates[i] = std::move(edit->gate);
        }
      }
    }
#ifndef NDEBUG
    if (!y.all_finite()) {
      throw ValueError(arch_.name + ": non-finite activation after layer " + std::to_string(i));
    }
#endif
    tr.activations.push_back(std::move(y));
  }
  tr.logits = tr.activations.back();
  return tr;
}

template <typename T>
BasicTensor<T> Model<T>::backward(const ForwardTrace<T>& tr, const BasicTensor<T>& grad_logits,
                                  ParamGrads<T>* grads) const {
  const std::size_t n_layers = arch_.layers.size();
  if (tr.activations.size() != n_layers + 1) {
    throw ShapeError("backward: trace does not belong to this model");
  }
  if (grad_logits.shape() != tr.logits.shape()) {
    throw ShapeError("backward: gradient shape " + shape_str(grad_logits.shape()) +
                     " != logits shape " + shape_str(tr.logits.shape()));
  }
  if (grads) {
    grads->weight.assign(n_layers, {});
    grads->bias.assign(n_layers, {});
  }
  BasicTensor<T> g = grad_logits;
  for (std::size_t i = n_layers; i-- > 0;) {
    const auto& l = arch_.layers[i];
    if (auto it = tr.gates.find(i); it != tr.gates.end()) {
      const auto& gate = it->second;
      const std::size_t plane = g.numel() / gate.numel();
      for (std::size_t j = 0; j < gate.numel(); ++j) {
        T* p = g.ptr() + j * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          p[q] *= gate[j];
        }
      }
    }
    const auto& x = tr.activations[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (grads) {
          grads->weight[i] = conv2d_backward_kernel(g, x, weights_[i].shape(),
                                                    {l.stride, l.padding}, &grads->bias[i]);
        }
        g = conv2d_backward_input(g, weights_[i], x.shape(), {l.stride, l.padding});
        break;
      case LayerKind::Relu:
        for (std::size_t j = 0; j < g.numel(); ++j) {
          if (!(x[j] > T{0})) {
            g[j] = T{0};
          }
        }
        break;
      case LayerKind::MaxPool:
        g = max_pool2d_backward(g, x.shape(), tr.pool_argmax[i]);
        break;
      case LayerKind::AvgPool:
        g = avg_pool2d_backward(g, x.shape(), l.kernel, l.stride);
        break;
      case LayerKind::GlobalAvgPool: {
        const std::size_t plane = x.dim(2) * x.dim(3);
        auto gi = BasicTensor<T>::uninitialized(x.shape());
        const T inv = T{1} / static_cast<T>(plane);
        for (std::size_t j = 0; j < g.numel(); ++j) {
          std::fill(gi.ptr() + j * plane, gi.ptr() + (j + 1) * plane, g[j] * inv);
        }
        g = std::move(gi);
        break;
      }
      case LayerKind::Flatten:
        g = g.reshape(x.shape());
        break;
      case LayerKind::Linear: {
        const std::size_t n = x.dim(0);
        if (grads) {
          auto gw = BasicTensor<T>::uninitialized({l.out, l.in});
          gemm<T>(true, false, l.out, l.in, n, T{1}, g.ptr(), x.ptr(), T{0}, gw.ptr());
          auto gb = BasicTensor<T>::uninitialized({l.out});
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < l.out; ++c) {
              gb[c] += g[r * l.out + c];
            }
          }
          grads->weight[i] = std::move(gw);
          grads->bias[i] = std::move(gb);
        }
        auto gi = BasicTensor<T>::uninitialized({n, l.in});
        gemm<T>(false, false, n, l.in, l.out, T{1}, g.ptr(), weights_[i].ptr(), T{0}, gi.ptr());
        g = std::move(gi);
        break;
      }
    }
  }
  return g;
}

template <typename T>
std::vector<T> Model<T>::classifier_weight_norms() const {
  const std::size_t last = arch_.layers.size() - 1;
  const auto& w = weights_[last];
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += static_cast<double>(w[r * cols + c]) * static_cast<double>(w[r * cols + c]);
    }
    norms[r] = static_cast<T>(std::sqrt(s));
  }
  return norms;
}

template class Model<float>;
template class Model<double>;

} // namespace tal
