// Independent reference implementations used only by tests. Nothing here
// calls into the library's kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace tal::oracle {

/// Row-major dense matrix in double precision.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        s += a(i, k) * b(k, j);
      }
      c(i, j) = s;
    }
  }
  return c;
}

/// Six-loop direct cross-correlation. in: N×C×H×W, ker: K×C×kh×kw.
inline std::vector<double> direct_conv(const std::vector<double>& in, std::size_t n, std::size_t c,
                                       std::size_t h, std::size_t w, const std::vector<double>& ker,
                                       std::size_t k, std::size_t kh, std::size_t kw,
                                       std::size_t stride, std::size_t pad, std::size_t& oh,
                                       std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * k * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < k; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double s = 0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y * stride + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(x * stride + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                  continue;
                s += in[((b * c + ci) * h + static_cast<std::size_t>(iy)) * w +
                        static_cast<std::size_t>(ix)] *
                     ker[((o * c + ci) * kh + dy) * kw + dx];
              }
          out[((b * k + o) * oh + y) * ow + x] = s;
        }
  return out;
}

/// One-sided Jacobi SVD (Hestenes). Returns singular values in descending
/// order; optionally the left/right singular vectors as columns of U (rows×r)
/// and V (cols×r), r = min(rows, cols).
struct JacobiSvd {
  std::vector<double> s;
  Mat u, v;
};

inline JacobiSvd jacobi_svd(const Mat& x) {
  const bool tall = x.rows >= x.cols;
  // Work on A with at least as many rows as columns.
  Mat a = tall ? x : Mat(x.cols, x.rows);
  if (!tall) {
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j) a(j, i) = x(i, j);
  }
  const std::size_t m = a.rows, n = a.cols;
  Mat v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (alpha == 0 || beta == 0) continue;
        const double c0 = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, c0);
        if (c0 < 1e-15) continue;
        const double zeta = (beta - alpha) / (2 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
        const double cs = 1 / std::sqrt(1 + t * t), sn = cs * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = cs * ap - sn * aq;
          a(i, q) = sn * ap + cs * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = cs * vp - sn * vq;
          v(i, q) = sn * vp + cs * vq;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> s(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += a(i, j) * a(i, j);
    s[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto l, auto r) { return s[l] > s[r]; });
  JacobiSvd out;
  out.u = Mat(m, n);
  out.v = Mat(n, n);
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t j = order[jj];
    out.s.push_back(s[j]);
    for (std::size_t i = 0; i < m; ++i) out.u(i, jj) = s[j] > 0 ? a(i, j) / s[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) out.v(i, jj) = v(i, j);
  }
  if (!tall) std::swap(out.u, out.v);
  return out;
}

/// Central finite difference of a scalar function along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double fp = f(x);
  x[i] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2 * h);
}

/// Numerically stable -log softmax_t(z) evaluated in long double.
inline double cross_entropy(const std::vector<double>& z, std::size_t t) {
  long double mx = z[0];
  for (double v : z) mx = std::max<long double>(mx, v);
  long double s = 0;
  for (double v : z) s += std::exp(static_cast<long double>(v) - mx);
  return static_cast<double>(std::log(s) + mx - z[t]);
}

} // namespace tal::oracle
