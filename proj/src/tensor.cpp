#include "tal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <cblas.h>

namespace tal {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

} // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  if (!std::isfinite(static_cast<double>(fill))) {
    throw ValueError("tensor fill value is not finite");
  }
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  if (!all_finite()) {
    throw ValueError("tensor input contains NaN or Inf");
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uninitialized(Shape shape) {
  BasicTensor t;
  t.data_.assign(shape_numel(shape), T{0});
  t.shape_ = std::move(shape);
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(shape_));
  }
  return shape_[i];
}

template <typename T>
std::size_t BasicTensor<T>::flat_index(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw ShapeError("index rank mismatch for " + shape_str(shape_));
  }
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : idx) {
    if (i >= shape_[k]) {
      throw ShapeError("index out of range for " + shape_str(shape_));
    }
    flat = flat * shape_[k] + i;
    ++k;
  }
  return flat;
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> idx) const {
  return data_[flat_index(idx)];
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> idx) {
  return data_[flat_index(idx)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  BasicTensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::slice_outer(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw ShapeError("slice_outer out of range for " + shape_str(shape_));
  }
  const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = end - begin;
  BasicTensor out;
  out.shape_ = std::move(s);
  out.data_.assign(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                   data_.begin() + static_cast<std::ptrdiff_t>(end * row));
  return out;
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](T v) { return std::isfinite(static_cast<double>(v)); });
}

template <typename T>
BasicTensor<T> concat_outer(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_outer: no parts");
  }
  Shape s = parts[0].shape();
  std::size_t outer = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat_outer: trailing extents differ");
    }
    outer += p.dim(0);
  }
  s[0] = outer;
  auto out = BasicTensor<T>::uninitialized(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto out = BasicTensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = a[i] + b[i];
  }
  return out;
}

template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  auto out = BasicTensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = a[i] - b[i];
  }
  return out;
}

template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T s) {
  auto out = BasicTensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = a[i] * s;
  }
  return out;
}

template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "hadamard");
  auto out = BasicTensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = a[i] * b[i];
  }
  return out;
}

template <typename T>
void axpy_inplace(BasicTensor<T>& a, T s, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "axpy");
  for (std::size_t i = 0; i < a.numel(); ++i) {
    a[i] += s * b[i];
  }
}

template <typename T>
T max_abs(const BasicTensor<T>& t) {
  T m = 0;
  for (auto v : t.data()) {
    m = std::max(m, std::abs(v));
  }
  return m;
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

template <typename T>
double frobenius_norm(const BasicTensor<T>& t) {
  double s = 0;
  for (auto v : t.data()) {
    s += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 float alpha, const float* a, const float* b, float beta, float* c) {
  if (m == 0 || n == 0) {
    return;
  }
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, const double* b, double beta, double* c) {
  if (m == 0 || n == 0) {
    return;
  }
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " · " +
                     shape_str(b.shape()));
  }
  auto out = BasicTensor<T>::uninitialized({a.dim(0), b.dim(1)});
  if (a.dim(1) == 0) {
    return out;
  }
  gemm<T>(false, false, a.dim(0), b.dim(1), a.dim(1), T{1}, a.ptr(), b.ptr(), T{0}, out.ptr());
  return out;
}

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& a) {
  require_rank(a.shape(), 2, "transpose2d");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto out = BasicTensor<T>::uninitialized({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[j * r + i] = a[i * c + j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  if (stride == 0) {
    throw ValueError("conv: stride must be positive");
  }
  if (kernel == 0 || kernel > in + 2 * padding) {
    throw ShapeError("conv: kernel extent " + std::to_string(kernel) +
                     " exceeds padded input extent " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, k, kh, kw, oh, ow, stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry make_geometry(const Shape& in, const Shape& kernel, Conv2dParams p) {
  require_rank(in, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (in[1] != kernel[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(in[1]) +
                     " != kernel channels " + std::to_string(kernel[1]));
  }
  ConvGeometry g{};
  g.n = in[0];
  g.c = in[1];
  g.h = in[2];
  g.w = in[3];
  g.k = kernel[0];
  g.kh = kernel[2];
  g.kw = kernel[3];
  g.stride = p.stride;
  g.pad = p.padding;
  g.oh = conv_out_extent(g.h, g.kh, p.stride, p.padding);
  g.ow = conv_out_extent(g.w, g.kw, p.stride, p.padding);
  return g;
}

// cols: patch × pixels for one sample.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0}
                                                                         : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            continue;
          }
          T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) {
              dst[ix] += row[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

} // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      Conv2dParams params, const BasicTensor<T>* bias) {
  const auto g = make_geometry(input.shape(), kernel.shape(), params);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.k)) {
    throw ShapeError("conv2d: bias must have length " + std::to_string(g.k));
  }
  auto out = BasicTensor<T>::uninitialized({g.n, g.k, g.oh, g.ow});
  std::vector<T> cols(g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.ptr() + n * g.c * g.h * g.w, g, cols.data());
    T* dst = out.ptr() + n * g.k * g.pixels();
    if (bias) {
      for (std::size_t k = 0; k < g.k; ++k) {
        std::fill(dst + k * g.pixels(), dst + (k + 1) * g.pixels(), (*bias)[k]);
      }
    }
    gemm<T>(false, false, g.k, g.pixels(), g.patch(), T{1}, kernel.ptr(), cols.data(),
            bias ? T{1} : T{0}, dst);
  }
  return out;
}

template <typename T>
BasicTensor<T> conv2d_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernel,
                                     const Shape& input_shape, Conv2dParams params) {
  const auto g = make_geometry(input_shape, kernel.shape(), params);
  require_same_shape(grad_out.shape(), {g.n, g.k, g.oh, g.ow}, "conv2d_backward_input");
  auto grad_in = BasicTensor<T>::uninitialized(input_shape);
  std::vector<T> cols(g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    gemm<T>(true, false, g.patch(), g.pixels(), g.k, T{1}, kernel.ptr(),
            grad_out.ptr() + n * g.k * g.pixels(), T{0}, cols.data());
    col2im(cols.data(), g, grad_in.ptr() + n * g.c * g.h * g.w);
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> conv2d_backward_kernel(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                      const Shape& kernel_shape, Conv2dParams params,
                                      BasicTensor<T>* grad_bias) {
  const auto g = make_geometry(input.shape(), kernel_shape, params);
  require_same_shape(grad_out.shape(), {g.n, g.k, g.oh, g.ow}, "conv2d_backward_kernel");
  auto grad_k = BasicTensor<T>::uninitialized(kernel_shape);
  std::vector<T> cols(g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.ptr() + n * g.c * g.h * g.w, g, cols.data());
    gemm<T>(false, true, g.k, g.patch(), g.pixels(), T{1},
            grad_out.ptr() + n * g.k * g.pixels(), cols.data(), T{1}, grad_k.ptr());
  }
  if (grad_bias) {
    *grad_bias = BasicTensor<T>::uninitialized({g.k});
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t k = 0; k < g.k; ++k) {
        const T* src = grad_out.ptr() + (n * g.k + k) * g.pixels();
        T s = 0;
        for (std::size_t p = 0; p < g.pixels(); ++p) {
          s += src[p];
        }
        (*grad_bias)[k] += s;
      }
    }
  }
  return grad_k;
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel2d,
                                Conv2dParams params) {
  require_rank(input.shape(), 4, "depthwise_conv2d");
  require_rank(kernel2d.shape(), 2, "depthwise_conv2d kernel");
  const auto& s = input.shape();
  const auto flat = input.reshape({s[0] * s[1], 1, s[2], s[3]});
  const auto k = kernel2d.reshape({1, 1, kernel2d.dim(0), kernel2d.dim(1)});
  const auto out = conv2d(flat, k, params);
  return out.reshape({s[0], s[1], out.dim(2), out.dim(3)});
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride,
                          std::vector<std::size_t>* argmax) {
  require_rank(input.shape(), 4, "max_pool2d");
  const auto& s = input.shape();
  const std::size_t oh = conv_out_extent(s[2], kernel, stride, 0);
  const std::size_t ow = conv_out_extent(s[3], kernel, stride, 0);
  auto out = BasicTensor<T>::uninitialized({s[0], s[1], oh, ow});
  if (argmax) {
    argmax->assign(out.numel(), 0);
  }
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const std::size_t base = plane * s[2] * s[3];
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = base + (y * stride) * s[3] + x * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (y * stride + ky) * s[3] + x * stride + kx;
            if (input[idx] > input[best]) {
              best = idx;
            }
          }
        }
        out[o] = input[best];
        if (argmax) {
          (*argmax)[o] = best;
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> max_pool2d_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                   const std::vector<std::size_t>& argmax) {
  if (argmax.size() != grad_out.numel()) {
    throw ShapeError("max_pool2d_backward: argmax size mismatch");
  }
  auto grad_in = BasicTensor<T>::uninitialized(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) {
    grad_in[argmax[o]] += grad_out[o];
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride) {
  require_rank(input.shape(), 4, "avg_pool2d");
  const auto& s = input.shape();
  const std::size_t oh = conv_out_extent(s[2], kernel, stride, 0);
  const std::size_t ow = conv_out_extent(s[3], kernel, stride, 0);
  auto out = BasicTensor<T>::uninitialized({s[0], s[1], oh, ow});
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = input.ptr() + plane * s[2] * s[3];
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        T acc = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            acc += src[(y * stride + ky) * s[3] + x * stride + kx];
          }
        }
        out[o] = acc * inv;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool2d_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                   std::size_t kernel, std::size_t stride) {
  require_rank(input_shape, 4, "avg_pool2d_backward");
  const auto& s = input_shape;
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  auto grad_in = BasicTensor<T>::uninitialized(input_shape);
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    T* dst = grad_in.ptr() + plane * s[2] * s[3];
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const T g = grad_out[o] * inv;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            dst[(y * stride + ky) * s[3] + x * stride + kx] += g;
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(src);
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

} // namespace

template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input.shape(), 4, "resize_bilinear");
  const auto& s = input.shape();
  if (out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0) {
    throw ShapeError("resize_bilinear: zero extent");
  }
  if (out_h == s[2] && out_w == s[3]) {
    return input;
  }
  const auto ty = lerp_taps(s[2], out_h);
  const auto tx = lerp_taps(s[3], out_w);
  auto out = BasicTensor<T>::uninitialized({s[0], s[1], out_h, out_w});
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = input.ptr() + plane * s[2] * s[3];
    T* dst = out.ptr() + plane * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto wy = static_cast<T>(ty[y].w1);
      const T* r0 = src + ty[y].i0 * s[3];
      const T* r1 = src + ty[y].i1 * s[3];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto wx = static_cast<T>(tx[x].w1);
        const T top = r0[tx[x].i0] * (T{1} - wx) + r0[tx[x].i1] * wx;
        const T bot = r1[tx[x].i0] * (T{1} - wx) + r1[tx[x].i1] * wx;
        dst[y * out_w + x] = top * (T{1} - wy) + bot * wy;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> resize_bilinear_backward(const BasicTensor<T>& grad_out, std::size_t in_h,
                                        std::size_t in_w) {
  require_rank(grad_out.shape(), 4, "resize_bilinear_backward");
  const auto& s = grad_out.shape();
  if (s[2] == in_h && s[3] == in_w) {
    return grad_out;
  }
  const auto ty = lerp_taps(in_h, s[2]);
  const auto tx = lerp_taps(in_w, s[3]);
  auto grad_in = BasicTensor<T>::uninitialized({s[0], s[1], in_h, in_w});
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = grad_out.ptr() + plane * s[2] * s[3];
    T* dst = grad_in.ptr() + plane * in_h * in_w;
    for (std::size_t y = 0; y < s[2]; ++y) {
      const auto wy = static_cast<T>(ty[y].w1);
      T* r0 = dst + ty[y].i0 * in_w;
      T* r1 = dst + ty[y].i1 * in_w;
      for (std::size_t x = 0; x < s[3]; ++x) {
        const auto wx = static_cast<T>(tx[x].w1);
        const T g = src[y * s[3] + x];
        r0[tx[x].i0] += g * (T{1} - wy) * (T{1} - wx);
        r0[tx[x].i1] += g * (T{1} - wy) * wx;
        r1[tx[x].i0] += g * wy * (T{1} - wx);
        r1[tx[x].i1] += g * wy * wx;
      }
    }
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> pad2d(const BasicTensor<T>& input, std::size_t top, std::size_t left,
                     std::size_t out_h, std::size_t out_w) {
  require_rank(input.shape(), 4, "pad2d");
  const auto& s = input.shape();
  if (top + s[2] > out_h || left + s[3] > out_w) {
    throw ShapeError("pad2d: input does not fit in padded extent");
  }
  auto out = BasicTensor<T>::uninitialized({s[0], s[1], out_h, out_w});
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = input.ptr() + plane * s[2] * s[3];
    T* dst = out.ptr() + plane * out_h * out_w;
    for (std::size_t y = 0; y < s[2]; ++y) {
      std::copy(src + y * s[3], src + (y + 1) * s[3], dst + (top + y) * out_w + left);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> crop2d(const BasicTensor<T>& input, std::size_t top, std::size_t left,
                      std::size_t h, std::size_t w) {
  require_rank(input.shape(), 4, "crop2d");
  const auto& s = input.shape();
  if (top + h > s[2] || left + w > s[3]) {
    throw ShapeError("crop2d: window exceeds input");
  }
  auto out = BasicTensor<T>::uninitialized({s[0], s[1], h, w});
  for (std::size_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = input.ptr() + plane * s[2] * s[3];
    T* dst = out.ptr() + plane * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      std::copy(src + (top + y) * s[3] + left, src + (top + y) * s[3] + left + w, dst + y * w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection helpers

template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& t) {
  auto out = BasicTensor<T>::uninitialized(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    out[i] = static_cast<T>((T{0} < t[i]) - (t[i] < T{0}));
  }
  return out;
}

template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& t, T lo, T hi) {
  if (lo > hi) {
    throw ValueError("clamp: lo > hi");
  }
  auto out = BasicTensor<T>::uninitialized(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    out[i] = std::clamp(t[i], lo, hi);
  }
  return out;
}

template <typename T>
BasicTensor<T> linf_project(const BasicTensor<T>& t, const BasicTensor<T>& center, T eps) {
  require_same_shape(t.shape(), center.shape(), "linf_project");
  if (!(eps >= T{0})) {
    throw ValueError("linf_project: eps must be non-negative");
  }
  auto out = BasicTensor<T>::uninitialized(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const T c = center[i];
    // c ± eps can round outward; step back so |out - c| ≤ eps holds exactly.
    T lo = c - eps, hi = c + eps;
    while (c - lo > eps) lo = std::nextafter(lo, c);
    while (hi - c > eps) hi = std::nextafter(hi, c);
    out[i] = std::clamp(t[i], lo, hi);
  }
  return out;
}

// ---------------------------------------------------------------------------

#define TAL_INSTANTIATE(T)                                                                       \
  template class BasicTensor<T>;                                                                 \
  template BasicTensor<T> concat_outer(std::span<const BasicTensor<T>>);                         \
  template BasicTensor<T> operator+(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> operator-(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> operator*(const BasicTensor<T>&, T);                                   \
  template BasicTensor<T> hadamard(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template void axpy_inplace(BasicTensor<T>&, T, const BasicTensor<T>&);                         \
  template T max_abs(const BasicTensor<T>&);                                                     \
  template T max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template double frobenius_norm(const BasicTensor<T>&);                                         \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> transpose2d(const BasicTensor<T>&);                                    \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, Conv2dParams,     \
                                 const BasicTensor<T>*);                                         \
  template BasicTensor<T> conv2d_backward_input(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                                const Shape&, Conv2dParams);                     \
  template BasicTensor<T> conv2d_backward_kernel(const BasicTensor<T>&, const BasicTensor<T>&,   \
                                                 const Shape&, Conv2dParams, BasicTensor<T>*);   \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                           Conv2dParams);                                        \
  template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t, std::size_t,            \
                                     std::vector<std::size_t>*);                                 \
  template BasicTensor<T> max_pool2d_backward(const BasicTensor<T>&, const Shape&,               \
                                              const std::vector<std::size_t>&);                  \
  template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BasicTensor<T> avg_pool2d_backward(const BasicTensor<T>&, const Shape&, std::size_t,  \
                                              std::size_t);                                      \
  template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, std::size_t, std::size_t);      \
  template BasicTensor<T> resize_bilinear_backward(const BasicTensor<T>&, std::size_t,           \
                                                   std::size_t);                                 \
  template BasicTensor<T> pad2d(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t,    \
                                std::size_t);                                                    \
  template BasicTensor<T> crop2d(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t,   \
                                 std::size_t);                                                   \
  template BasicTensor<T> sign(const BasicTensor<T>&);                                           \
  template BasicTensor<T> clamp(const BasicTensor<T>&, T, T);                                    \
  template BasicTensor<T> linf_project(const BasicTensor<T>&, const BasicTensor<T>&, T);

TAL_INSTANTIATE(float)
TAL_INSTANTIATE(double)

#undef TAL_INSTANTIATE

} // namespace tal
