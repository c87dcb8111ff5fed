#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "deskmri/nn.hpp"
#include "deskmri/rng.hpp"
#include "deskmri/tensor.hpp"

namespace deskmri::mri {

/* Per-column Cartesian undersampling in the phase-encode (width) direction.
 * The centered ACS block is always fully sampled; the remaining budget of
 * ceil(W/R) - acs_width columns is drawn uniformly without replacement. */
struct SamplingMask {
  std::size_t width = 0;
  int accel = 1;
  int acs_width = 0;
  std::vector<std::uint8_t> cols;  // 1 = sampled

  std::size_t sampled_count() const {
    std::size_t n = 0;
    for (auto c : cols) n += c;
    return n;
  }
};

SamplingMask make_mask(std::size_t w, int accel, int acs_width,
                       std::uint64_t seed);

// Smooth complex coil profiles, SOS-normalized so that sum_c |s_c|^2 == 1 at
// every pixel. Shape [Nc,H,W].
CTensor make_sensitivities(int nc, std::size_t h, std::size_t w,
                           std::uint64_t seed);

struct ForwardModel {
  CTensor maps;       // [Nc,H,W]
  SamplingMask mask;  // over W
  double noise_sigma_sq = 0.0;  // post-whitening, normalized units

  std::size_t coils() const { return maps.shape[0]; }
  std::size_t height() const { return maps.shape[1]; }
  std::size_t width() const { return maps.shape[2]; }
};

struct NoiseSpec {
  CovarianceMatrix coil_cov;
  double sigma_sq_white = 0.0;
  double snr_db = 0.0;
};

// y_c = mask . fft2c(s_c . x); unsampled columns are exactly zero.
CTensor apply_A(const ForwardModel& fm, const CTensor& x);
// x = sum_c conj(s_c) . ifft2c(mask . y_c)
CTensor apply_Ah(const ForwardModel& fm, const CTensor& y);
// Minimum-norm least squares via CG on (A^H A) x = A^H y.
CTensor apply_pinv(const ForwardModel& fm, const CTensor& y, int cg_iters,
                   double tol);

CTensor apply_mask(const SamplingMask& mask, const CTensor& y);

// Adds eta = L w with w iid complex standard normal per k-space location and
// L the Cholesky factor of C. Complex variance convention: a unit-variance
// complex sample has variance 1/2 per real component.
CTensor add_noise(const CTensor& y_full, const CovarianceMatrix& c,
                  std::uint64_t seed);

// Coil decorrelation: y~ = L^-1 y per k-space location.
CTensor prewhiten(const CTensor& y, const CovarianceMatrix& c);

/* ACS normalization: crop the centered acs x acs k-space block, zero-pad,
 * per-coil ifft2c, root-sum-of-squares combine, q = 99th percentile of the
 * RSS magnitudes (nearest-rank), return y / q and q. */
std::pair<CTensor, double> normalize_kspace(const CTensor& y,
                                            std::size_t acs_size);

double snr_db_from_sigma_sq(double sigma_sq);
double sigma_sq_for_snr_db(double snr_db);

/* Precision-generic forward model for autodiff tape ops: apply_A/apply_Ah as
 * an exact adjoint pair over the two-plane real representation. */
template <class T>
struct ForwardModelT {
  std::vector<std::complex<T>> maps;  // Nc*H*W
  std::vector<std::uint8_t> cols;
  std::size_t nc = 0, h = 0, w = 0;

  nn::RTensor<T> apply_A(const nn::RTensor<T>& x) const;   // [2,H,W]->[Nc,2,H,W]
  nn::RTensor<T> apply_Ah(const nn::RTensor<T>& y) const;  // adjoint
};

template <class T>
ForwardModelT<T> to_precision(const ForwardModel& fm) {
  ForwardModelT<T> out;
  out.nc = fm.coils();
  out.h = fm.height();
  out.w = fm.width();
  out.cols = fm.mask.cols;
  out.maps.resize(fm.maps.size());
  for (std::size_t i = 0; i < fm.maps.size(); ++i)
    out.maps[i] = std::complex<T>(static_cast<T>(fm.maps.data[i].real()),
                                  static_cast<T>(fm.maps.data[i].imag()));
  return out;
}

template <class T>
nn::RTensor<T> ForwardModelT<T>::apply_A(const nn::RTensor<T>& x) const {
  if (x.shape != std::vector<std::size_t>{2, h, w})
    throw ShapeError("apply_A: expected [2,H,W] image");
  const std::size_t plane = h * w;
  nn::RTensor<T> out({nc, 2, h, w});
  std::vector<std::complex<T>> buf(plane);
  for (std::size_t c = 0; c < nc; ++c) {
    const std::complex<T>* s = maps.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i)
      buf[i] = s[i] * std::complex<T>(x.data[i], x.data[plane + i]);
    fft2c_raw<T>(buf.data(), h, w, false);
    T* re = out.data.data() + c * 2 * plane;
    T* im = re + plane;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t i = y * w + xx;
        if (cols[xx]) {
          re[i] = buf[i].real();
          im[i] = buf[i].imag();
        }
      }
  }
  return out;
}

template <class T>
nn::RTensor<T> ForwardModelT<T>::apply_Ah(const nn::RTensor<T>& y) const {
  if (y.shape != std::vector<std::size_t>{nc, 2, h, w})
    throw ShapeError("apply_Ah: expected [Nc,2,H,W] k-space");
  const std::size_t plane = h * w;
  nn::RTensor<T> out({2, h, w});
  std::vector<std::complex<T>> buf(plane);
  for (std::size_t c = 0; c < nc; ++c) {
    const T* re = y.data.data() + c * 2 * plane;
    const T* im = re + plane;
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t i = yy * w + xx;
        buf[i] = cols[xx] ? std::complex<T>(re[i], im[i])
                          : std::complex<T>(0, 0);
      }
    fft2c_raw<T>(buf.data(), h, w, true);
    const std::complex<T>* s = maps.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::complex<T> v = std::conj(s[i]) * buf[i];
      out.data[i] += v.real();
      out.data[plane + i] += v.imag();
    }
  }
  return out;
}

}  // namespace deskmri::mri
