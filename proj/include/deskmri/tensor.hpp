#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "deskmri/errors.hpp"

namespace deskmri {

using cx = std::complex<float>;

/* Dense complex tensor, row-major, complex64 storage. The workhorse container
 * for images ([H,W]), coil stacks ([Nc,H,W]) and k-space sets. */
struct CTensor {
  std::vector<std::size_t> shape;
  std::vector<cx> data;

  CTensor() = default;
  explicit CTensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel(shape), cx{0.0f, 0.0f});
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  // Convenience accessors for rank-2 / rank-3 tensors.
  cx& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const cx& at(std::size_t r, std::size_t c) const {
    return data[r * shape[1] + c];
  }
  cx& at(std::size_t k, std::size_t r, std::size_t c) {
    return data[(k * shape[1] + r) * shape[2] + c];
  }
  const cx& at(std::size_t k, std::size_t r, std::size_t c) const {
    return data[(k * shape[1] + r) * shape[2] + c];
  }

  bool same_shape(const CTensor& o) const { return shape == o.shape; }
};

double norm2(const CTensor& t);                       // l2 over real components
std::complex<double> vdot(const CTensor& a, const CTensor& b);  // sum conj(a)*b
void check_finite(const CTensor& t, const char* where);

/* Centered orthonormal 2D Fourier transforms.
 *
 * Convention: the DC sample sits at index (floor(H/2), floor(W/2)) in both
 * domains; both directions carry a 1/sqrt(H*W) factor, so the transform pair
 * is unitary and ifft2c is both the inverse and the adjoint of fft2c.
 */
CTensor fft2c(const CTensor& img);
CTensor ifft2c(const CTensor& ksp);

// Precision-generic core used by the autodiff tape. `data` holds H*W
// interleaved complex values, row-major; transformed in place.
template <class T>
void fft2c_raw(std::complex<T>* data, std::size_t h, std::size_t w,
               bool inverse);

/* Hermitian positive-definite coil covariance, Nc x Nc. */
struct CovarianceMatrix {
  std::size_t dim = 0;
  std::vector<std::complex<double>> entries;  // row-major dim x dim

  static CovarianceMatrix identity(std::size_t n);
  static CovarianceMatrix diagonal(const std::vector<double>& d);
  std::complex<double>& at(std::size_t i, std::size_t j) {
    return entries[i * dim + j];
  }
  const std::complex<double>& at(std::size_t i, std::size_t j) const {
    return entries[i * dim + j];
  }
};

// Lower-triangular L with C = L * L^H. Throws FactorizationError naming the
// failing pivot when C is not positive definite.
std::vector<std::complex<double>> cholesky(const CovarianceMatrix& c);

// Forward substitution: solves L x = y for lower-triangular L (dim x dim).
std::vector<std::complex<double>> forward_subst(
    const std::vector<std::complex<double>>& lower, std::size_t dim,
    const std::vector<std::complex<double>>& rhs);

/* CXT on-disk tensor format.
 *   bytes 0-7   magic "CXTENS01"
 *   byte  8     dtype code (1 = complex64, interleaved re/im LE float32)
 *   byte  9     rank r
 *   then        r little-endian uint64 dims
 *   then        payload, row-major; no padding, no compression
 */
void save_tensor(const std::string& path, const CTensor& t);
CTensor load_tensor(const std::string& path);

// Stream variants for container formats that embed CXT blobs (checkpoints).
void write_cxt(std::FILE* f, const CTensor& t);
CTensor read_cxt(std::FILE* f, const std::string& context);

}  // namespace deskmri
