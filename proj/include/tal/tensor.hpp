#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tal/error.hpp"

namespace tal {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor, batch-outermost. Value type; copies are deep.
///
/// The public constructors reject non-finite input. Kernels that build their
/// outputs use `uninitialized` and write through `data()`.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);
  BasicTensor(Shape shape, std::initializer_list<T> values)
      : BasicTensor(std::move(shape), std::vector<T>(values)) {}

  /// Unchecked construction for kernel outputs; contents are zeroed.
  static BasicTensor uninitialized(Shape shape);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const T* ptr() const noexcept { return data_.data(); }
  T* ptr() noexcept { return data_.data(); }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  /// Multi-index access; index count must equal rank.
  T at(std::initializer_list<std::size_t> idx) const;
  T& at(std::initializer_list<std::size_t> idx);

  BasicTensor reshape(Shape shape) const;
  /// Rows [begin, end) along the outermost axis.
  BasicTensor slice_outer(std::size_t begin, std::size_t end) const;

  bool all_finite() const noexcept;

  template <typename U>
  BasicTensor<U> cast() const {
    auto out = BasicTensor<U>::uninitialized(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const;

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Concatenate along the outermost axis; trailing extents must agree.
template <typename T>
BasicTensor<T> concat_outer(std::span<const BasicTensor<T>> parts);

// Element-wise arithmetic. Shapes must match exactly.
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T s);
template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a += s * b
template <typename T>
void axpy_inplace(BasicTensor<T>& a, T s, const BasicTensor<T>& b);

template <typename T>
T max_abs(const BasicTensor<T>& t);
template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
double frobenius_norm(const BasicTensor<T>& t);

/// Standard matrix product of 2-d tensors.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& a);

/// Raw GEMM: C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

/// Cross-correlation with zero padding. input N×C×H×W, kernel K×C×kh×kw,
/// optional bias of length K.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      Conv2dParams params, const BasicTensor<T>* bias = nullptr);
/// Gradient w.r.t. the input of conv2d, given the output gradient.
template <typename T>
BasicTensor<T> conv2d_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernel,
                                     const Shape& input_shape, Conv2dParams params);
/// Gradient w.r.t. the kernel (and optionally bias) of conv2d.
template <typename T>
BasicTensor<T> conv2d_backward_kernel(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                      const Shape& kernel_shape, Conv2dParams params,
                                      BasicTensor<T>* grad_bias = nullptr);

/// Each channel convolved with the same single-channel kh×kw kernel.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel2d,
                                Conv2dParams params);

/// Max pooling; `argmax` (if given) receives the flat input offset per output.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride,
                          std::vector<std::size_t>* argmax = nullptr);
template <typename T>
BasicTensor<T> max_pool2d_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                   const std::vector<std::size_t>& argmax);
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride);
template <typename T>
BasicTensor<T> avg_pool2d_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                   std::size_t kernel, std::size_t stride);

/// Bilinear resize of N×C×H×W to N×C×out_h×out_w, align-corners = false.
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w);
/// Adjoint of resize_bilinear (gradient w.r.t. its input).
template <typename T>
BasicTensor<T> resize_bilinear_backward(const BasicTensor<T>& grad_out, std::size_t in_h,
                                        std::size_t in_w);

/// Zero-pad the spatial extents of N×C×H×W.
template <typename T>
BasicTensor<T> pad2d(const BasicTensor<T>& input, std::size_t top, std::size_t left,
                     std::size_t out_h, std::size_t out_w);
/// Adjoint of pad2d: crop the H×W window at (top, left).
template <typename T>
BasicTensor<T> crop2d(const BasicTensor<T>& input, std::size_t top, std::size_t left,
                      std::size_t h, std::size_t w);

/// Element-wise sign with sign(0) = 0.
template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& t);
template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& t, T lo, T hi);
/// Element-wise clamp into [center - eps, center + eps].
template <typename T>
BasicTensor<T> linf_project(const BasicTensor<T>& t, const BasicTensor<T>& center, T eps);

} // namespace tal
