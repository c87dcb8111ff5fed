#pragma once

#include <complex>
#include <cstddef>
#include <functional>
#include <vector>

#include "deskmri/errors.hpp"

namespace deskmri {

/* Conjugate gradients on a Hermitian positive semidefinite operator over
 * complex vectors. Starts from x = 0, so the iterates stay in the Krylov
 * space of rhs and a singular but consistent system converges to the
 * minimum-norm solution. */
template <class T>
struct CgResult {
  std::vector<std::complex<T>> x;
  double rel_residual = 0.0;
  int iters = 0;
  bool converged = false;
};

template <class T>
CgResult<T> cg_solve_cplx(
    const std::function<void(const std::complex<T>*, std::complex<T>*)>& op,
    const std::complex<T>* rhs, std::size_t n, int max_iters, double tol) {
  CgResult<T> res;
  res.x.assign(n, std::complex<T>(0, 0));
  std::vector<std::complex<T>> r(rhs, rhs + n), p(r), q(n);
  double rhs_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) rhs_norm += std::norm(r[i]);
  rhs_norm = std::sqrt(rhs_norm);
  if (rhs_norm == 0.0) {
    res.converged = true;
    return res;
  }
  double rs_old = rhs_norm * rhs_norm;
  for (int it = 0; it < max_iters; ++it) {
    op(p.data(), q.data());
    double pq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      pq += std::real(std::conj(std::complex<double>(p[i])) *
                      std::complex<double>(q[i]));
    if (!(pq > 0.0)) {
      if (!std::isfinite(pq))
        throw NumericError("cg_solve: non-finite curvature at iteration " +
                           std::to_string(it));
      break;  // numerically singular direction; current x is the best iterate
    }
    const double alpha = rs_old / pq;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += static_cast<T>(alpha) * p[i];
      r[i] -= static_cast<T>(alpha) * q[i];
    }
    double rs_new = 0.0;
    for (std::size_t i = 0; i < n; ++i) rs_new += std::norm(r[i]);
    res.iters = it + 1;
    res.rel_residual = std::sqrt(rs_new) / rhs_norm;
    if (!std::isfinite(rs_new))
      throw NumericError("cg_solve: non-finite residual at iteration " +
                         std::to_string(it));
    if (res.rel_residual <= tol) {
      res.converged = true;
      return res;
    }
    const double beta = rs_new / rs_old;
    for (std::size_t i = 0; i < n; ++i)
      p[i] = r[i] + static_cast<T>(beta) * p[i];
    rs_old = rs_new;
  }
  res.converged = res.rel_residual <= tol;
  return res;
}

}  // namespace deskmri
