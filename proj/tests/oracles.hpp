#pragma once

// Independent reference implementations used only by tests. Everything here
// is deliberately brute-force and kept separate from the library code paths
// it checks.

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <vector>

#include "deskmri/tensor.hpp"

namespace oracles {

// Direct O(N^2) centered orthonormal DFT with explicit shifts. The center
// index is floor(n/2) in both domains. sign = -1 forward, +1 inverse.
inline deskmri::CTensor dft2c_direct(const deskmri::CTensor& in, int sign) {
  const std::size_t h = in.shape[0], w = in.shape[1];
  const double ch = std::floor(static_cast<double>(h) / 2.0);
  const double cw = std::floor(static_cast<double>(w) / 2.0);
  deskmri::CTensor out(in.shape);
  const double pi = 3.14159265358979323846;
  for (std::size_t ky = 0; ky < h; ++ky) {
    for (std::size_t kx = 0; kx < w; ++kx) {
      std::complex<double> acc{0.0, 0.0};
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double phase =
              sign * 2.0 * pi *
              (((ky - ch) * (y - ch)) / static_cast<double>(h) +
               ((kx - cw) * (x - cw)) / static_cast<double>(w));
          acc += std::complex<double>(in.at(y, x)) *
                 std::complex<double>(std::cos(phase), std::sin(phase));
        }
      }
      acc /= std::sqrt(static_cast<double>(h * w));
      out.at(ky, kx) = deskmri::cx(static_cast<float>(acc.real()),
                                   static_cast<float>(acc.imag()));
    }
  }
  return out;
}

// Dense symmetric positive definite solve via Gaussian elimination with
// partial pivoting, double precision.
inline std::vector<double> dense_solve(std::vector<double> a, std::size_t n,
                                       std::vector<double> b) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c)
        std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    const double d = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / d;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t ri = n; ri-- > 0;) {
    double s = b[ri];
    for (std::size_t c = ri + 1; c < n; ++c) s -= a[ri * n + c] * x[c];
    x[ri] = s / a[ri * n + ri];
  }
  return x;
}

// Dense complex solve via Gaussian elimination with partial pivoting.
inline std::vector<std::complex<double>> dense_solve_cplx(
    std::vector<std::complex<double>> a, std::size_t n,
    std::vector<std::complex<double>> b) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c)
        std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    const std::complex<double> d = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const std::complex<double> f = a[r * n + col] / d;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<std::complex<double>> x(n);
  for (std::size_t ri = n; ri-- > 0;) {
    std::complex<double> s = b[ri];
    for (std::size_t c = ri + 1; c < n; ++c) s -= a[ri * n + c] * x[c];
    x[ri] = s / a[ri * n + ri];
  }
  return x;
}

// Central finite difference of a scalar function along direction v.
inline double directional_derivative(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x0, const std::vector<double>& v, double h) {
  std::vector<double> xp = x0, xm = x0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    xp[i] += h * v[i];
    xm[i] -= h * v[i];
  }
  return (f(xp) - f(xm)) / (2.0 * h);
}

// Exact two-sided Wilcoxon signed-rank p-value by brute-force enumeration of
// all 2^n sign assignments over the observed |d| ranks. Usable for n <= ~16.
inline double wilcoxon_enumerated_p(const std::vector<double>& diffs) {
  std::vector<double> mags;
  for (double d : diffs)
    if (d != 0.0) mags.push_back(std::abs(d));
  const std::size_t n = mags.size();
  // Average ranks with ties.
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mags[j] < mags[i]) ++less;
      if (mags[j] == mags[i]) ++equal;
    }
    ranks[i] = less + (equal + 1) / 2.0;
  }
  double w_obs = 0.0;
  {
    std::size_t k = 0;
    for (double d : diffs)
      if (d != 0.0) {
        if (d > 0.0) w_obs += ranks[k];
        ++k;
      }
  }
  std::size_t le = 0, ge = 0;
  const std::size_t total = std::size_t{1} << n;
  const double eps = 1e-9;
  for (std::size_t m = 0; m < total; ++m) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (m & (std::size_t{1} << i)) w += ranks[i];
    if (w <= w_obs + eps) ++le;
    if (w >= w_obs - eps) ++ge;
  }
  const double p = 2.0 * std::min(static_cast<double>(le), static_cast<double>(ge)) /
                   static_cast<double>(total);
  return std::min(p, 1.0);
}

}  // namespace oracles
