#include "tal/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tal/rng.hpp"

namespace tal {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

void scale(std::vector<double>& a, double s) {
  for (auto& v : a) {
    v *= s;
  }
}

// Removes the components of `v` along each (orthonormal) basis vector.
void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    const double p = dot(v, b);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] -= p * b[i];
    }
  }
}

} // namespace

template <typename T>
std::vector<SvdTriplet<T>> topk_svd(const BasicTensor<T>& x, std::size_t k, SvdOptions opts) {
  if (x.rank() != 2) {
    throw ShapeError("topk_svd: expected a 2-d tensor, got " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (k > std::min(rows, cols)) {
    throw ValueError("topk_svd: k=" + std::to_string(k) + " exceeds min(rows, cols)");
  }
  if (!(opts.tol > 0)) {
    throw ValueError("topk_svd: tol must be positive");
  }
  std::vector<SvdTriplet<T>> out;
  if (k == 0 || rows == 0 || cols == 0) {
    return out;
  }

  // Iterate on the smaller side's Gram matrix.
  const bool left_side = rows <= cols;
  const std::size_t m = left_side ? rows : cols;
  const std::size_t other = left_side ? cols : rows;
  std::vector<double> a(rows * cols);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<double>(x[i]);
  }
  auto elem = [&](std::size_t i, std::size_t j) {
    // i indexes the Gram side, j the other side
    return left_side ? a[i * cols + j] : a[j * cols + i];
  };
  std::vector<double> gram(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < other; ++t) {
        s += elem(i, t) * elem(j, t);
      }
      gram[i * m + j] = s;
      gram[j * m + i] = s;
    }
  }

  // `deflated` is P·G·P with P projecting out the vectors found so far.
  // `op` is the operator the power step applies; when progress stalls it is
  // replaced by its normalized square, which keeps the same dominant
  // eigenvector and squares the eigenvalue ratios.
  std::vector<double> deflated = gram;
  std::vector<double> op;
  std::vector<double> sq(m * m);
  auto apply = [m](const std::vector<double>& mat, const std::vector<double>& v,
                   std::vector<double>& res) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = mat.data() + i * m;
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) {
        s += row[j] * v[j];
      }
      res[i] = s;
    }
  };
  auto square_normalized = [&](std::vector<double>& mat) {
    double fro = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < m; ++t) {
          s += mat[i * m + t] * mat[t * m + j];
        }
        sq[i * m + j] = s;
        fro += s * s;
      }
    }
    fro = std::sqrt(fro);
    for (std::size_t i = 0; i < m * m; ++i) {
      mat[i] = fro > 0 ? sq[i] / fro : 0.0;
    }
  };
  constexpr std::size_t kStallWindow = 48;
  constexpr double kInnerFactor = 0.05;
  constexpr int kMaxSquarings = 24;
  // The Gram matrix resolves singular values only down to about sqrt(eps)·s₁.
  constexpr double kRankCutoff = 1e-7;

  Rng rng(0x5eedULL + m);
  std::vector<std::vector<double>> found;
  double s1 = 0;
  std::vector<double> y(m), z(m);
  for (std::size_t idx = 0; idx < k; ++idx) {
    std::vector<double> u(m);
    for (auto& v : u) {
      v = rng.normal();
    }
    orthogonalize(u, found);
    double un = norm(u);
    if (un == 0) {
      break;
    }
    scale(u, 1.0 / un);
    op = deflated;
    int squarings = 0;

    double lambda = 0;
    double residual = 0;
    bool converged = false;
    bool vanished = false;
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
      apply(deflated, u, y);
      lambda = dot(u, y);
      const double s = std::sqrt(std::max(lambda, 0.0));
      if ((idx > 0 && s <= s1 * kRankCutoff) || s == 0) {
        vanished = true;
        break;
      }
      // Errors in earlier triplets leak into later ones through the
      // deflation, so each triplet is driven well below the tolerance on the
      // deflated operator and accepted on its residual against the full Gram.
      double r2 = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = y[i] - lambda * u[i];
        r2 += d * d;
      }
      const double deflated_residual = std::sqrt(r2) / s;
      apply(gram, u, z);
      r2 = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = z[i] - lambda * u[i];
        r2 += d * d;
      }
      residual = std::sqrt(r2) / s;
      const double bound = opts.tol * (idx == 0 ? s : s1);
      if (residual <= kInnerFactor * bound ||
          (deflated_residual <= kInnerFactor * bound && residual <= bound)) {
        converged = true;
        break;
      }
      if (it > 0 && it % kStallWindow == 0 && squarings < kMaxSquarings) {
        square_normalized(op);
        ++squarings;
      }
      apply(op, u, z);
      orthogonalize(z, found);
      const double zn = norm(z);
      if (zn == 0) {
        vanished = true;
        break;
      }
      for (std::size_t i = 0; i < m; ++i) {
        u[i] = z[i] / zn;
      }
    }
    if (vanished) {
      break;
    }
    if (!converged) {
      throw ConvergenceError("topk_svd: triplet " + std::to_string(idx + 1) +
                                 " did not converge in " + std::to_string(opts.max_iters) +
                                 " iterations (residual " + std::to_string(residual) + ")",
                             residual);
    }
    const double s = std::sqrt(lambda);
    if (idx == 0) {
      s1 = s;
    }
    // Partner vector from the rectangular matrix.
    std::vector<double> w(other, 0.0);
    for (std::size_t t = 0; t < other; ++t) {
      double acc = 0;
      for (std::size_t i = 0; i < m; ++i) {
        acc += elem(i, t) * u[i];
      }
      w[t] = acc / s;
    }
    const double wn = norm(w);
    if (wn > 0) {
      scale(w, 1.0 / wn);
    }
    SvdTriplet<T> trip;
    trip.singular_value = static_cast<T>(s);
    auto to_t = [](const std::vector<double>& v) {
      return std::vector<T>(v.begin(), v.end());
    };
    trip.left = left_side ? to_t(u) : to_t(w);
    trip.right = left_side ? to_t(w) : to_t(u);
    out.push_back(std::move(trip));
    // deflated <- (I - u uᵀ) deflated (I - u uᵀ)
    apply(deflated, u, y);
    const double uay = dot(u, y);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        deflated[i * m + j] += -u[i] * y[j] - y[i] * u[j] + uay * u[i] * u[j];
      }
    }
    found.push_back(std::move(u));
  }
  return out;
}

template <typename T>
BasicTensor<T> rank1_component(const SvdTriplet<T>& t) {
  const std::size_t rows = t.left.size(), cols = t.right.size();
  auto out = BasicTensor<T>::uninitialized({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    const T a = t.singular_value * t.left[i];
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = a * t.right[j];
    }
  }
  return out;
}

template std::vector<SvdTriplet<float>> topk_svd(const BasicTensor<float>&, std::size_t, SvdOptions);
template std::vector<SvdTriplet<double>> topk_svd(const BasicTensor<double>&, std::size_t,
                                                  SvdOptions);
template BasicTensor<float> rank1_component(const SvdTriplet<float>&);
template BasicTensor<double> rank1_component(const SvdTriplet<double>&);

} // namespace tal
