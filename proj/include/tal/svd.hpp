#pragma once

#include <cstddef>
#include <vector>

#include "tal/tensor.hpp"

namespace tal {

/// One singular triplet (s_k, u_k, v_k) of a 2-d tensor.
template <typename T>
struct SvdTriplet {
  T singular_value = 0;
  std::vector<T> left;   // length rows, unit norm
  std::vector<T> right;  // length cols, unit norm
};

struct SvdOptions {
  double tol = 1e-6;
  std::size_t max_iters = 1000;
};

/// Leading k singular triplets of a rows×cols matrix, ordered by descending
/// singular value.
///
/// Runs power iteration on the smaller Gram matrix (X·Xᵀ or Xᵀ·X) with
/// deflation. Each returned triplet satisfies ‖X v − s u‖₂ ≤ tol·s₁.
/// Fewer than k triplets come back when the numerical rank is lower
/// (singular values below s₁·1e-7 count as zero). Accumulation is in
/// double precision regardless of T.
///
/// Throws ConvergenceError (carrying the achieved residual) if a triplet
/// does not reach tolerance within max_iters.
template <typename T>
std::vector<SvdTriplet<T>> topk_svd(const BasicTensor<T>& x, std::size_t k, SvdOptions opts = {});

/// s·u·vᵀ as a rows×cols tensor.
template <typename T>
BasicTensor<T> rank1_component(const SvdTriplet<T>& triplet);

} // namespace tal
