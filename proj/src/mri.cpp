#include "deskmri/mri.hpp"

#include <algorithm>
#include <cmath>

#include "deskmri/cg.hpp"

namespace deskmri::mri {

SamplingMask make_mask(std::size_t w, int accel, int acs_width,
                       std::uint64_t seed) {
  if (w == 0 || accel < 1)
    throw ConfigError("make_mask: need W >= 1 and R >= 1");
  if (acs_width < 0 || static_cast<std::size_t>(acs_width) > w)
    throw ConfigError("make_mask: ACS width out of range");
  const std::size_t budget =
      (w + static_cast<std::size_t>(accel) - 1) / static_cast<std::size_t>(accel);
  if (static_cast<std::size_t>(acs_width) > budget)
    throw ConfigError("make_mask: ACS width " + std::to_string(acs_width) +
                      " exceeds sampling budget " + std::to_string(budget));
  SamplingMask m;
  m.width = w;
  m.accel = accel;
  m.acs_width = acs_width;
  m.cols.assign(w, 0);
  const std::size_t acs0 = (w - static_cast<std::size_t>(acs_width)) / 2;
  for (std::size_t i = 0; i < static_cast<std::size_t>(acs_width); ++i)
    m.cols[acs0 + i] = 1;
  std::vector<std::size_t> rest;
  rest.reserve(w);
  for (std::size_t i = 0; i < w; ++i)
    if (!m.cols[i]) rest.push_back(i);
  // Partial Fisher-Yates: draw (budget - acs) columns without replacement.
  Rng rng(seed);
  const std::size_t extra = budget - static_cast<std::size_t>(acs_width);
  for (std::size_t i = 0; i < extra; ++i) {
    const std::size_t j = i + rng.below(rest.size() - i);
    std::swap(rest[i], rest[j]);
    m.cols[rest[i]] = 1;
  }
  return m;
}

CTensor make_sensitivities(int nc, std::size_t h, std::size_t w,
                           std::uint64_t seed) {
  if (nc < 1) throw ConfigError("make_sensitivities: need Nc >= 1");
  Rng rng(seed);
  CTensor maps({static_cast<std::size_t>(nc), h, w});
  const double pi = 3.14159265358979323846;
  const double r0 = 0.38 * static_cast<double>(std::min(h, w));
  for (int c = 0; c < nc; ++c) {
    const double ang = 2.0 * pi * c / nc + rng.uniform(-0.2, 0.2);
    const double center_y = h / 2.0 + r0 * std::sin(ang);
    const double center_x = w / 2.0 + r0 * std::cos(ang);
    const double width = 0.55 * std::min(h, w) * rng.uniform(0.9, 1.1);
    const double phase0 = rng.uniform(0.0, 2.0 * pi);
    const double ramp_y = rng.uniform(-1.0, 1.0) * pi / h;
    const double ramp_x = rng.uniform(-1.0, 1.0) * pi / w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - center_y;
        const double dx = static_cast<double>(x) - center_x;
        const double mag =
            std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
        const double ph = phase0 + ramp_y * dy + ramp_x * dx;
        maps.at(c, y, x) = cx(static_cast<float>(mag * std::cos(ph)),
                              static_cast<float>(mag * std::sin(ph)));
      }
  }
  // SOS normalization; the Gaussian profiles are strictly positive, so the
  // denominator never vanishes.
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sos = 0.0;
      for (int c = 0; c < nc; ++c) sos += std::norm(maps.at(c, y, x));
      const float inv = static_cast<float>(1.0 / std::sqrt(sos));
      for (int c = 0; c < nc; ++c) maps.at(c, y, x) *= inv;
    }
  return maps;
}

namespace {

cx to_cx(std::complex<double> v) {
  return cx(static_cast<float>(v.real()), static_cast<float>(v.imag()));
}

void check_kspace_shape(const ForwardModel& fm, const CTensor& y,
                        const char* op) {
  if (y.rank() != 3 || y.shape[0] != fm.coils() || y.shape[1] != fm.height() ||
      y.shape[2] != fm.width())
    throw ShapeError(std::string(op) + ": k-space shape mismatch");
}

}  // namespace

CTensor apply_A(const ForwardModel& fm, const CTensor& x) {
  if (x.rank() != 2 || x.shape[0] != fm.height() || x.shape[1] != fm.width())
    throw ShapeError("apply_A: image shape mismatch");
  const std::size_t h = fm.height(), w = fm.width();
  CTensor y({fm.coils(), h, w});
  CTensor tmp({h, w});
  for (std::size_t c = 0; c < fm.coils(); ++c) {
    for (std::size_t i = 0; i < h * w; ++i)
      tmp.data[i] = fm.maps.data[c * h * w + i] * x.data[i];
    tmp = fft2c(tmp);
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx)
        y.at(c, yy, xx) = fm.mask.cols[xx] ? tmp.at(yy, xx) : cx(0.0f, 0.0f);
  }
  return y;
}

CTensor apply_Ah(const ForwardModel& fm, const CTensor& y) {
  check_kspace_shape(fm, y, "apply_Ah");
  const std::size_t h = fm.height(), w = fm.width();
  CTensor x({h, w});
  CTensor tmp({h, w});
  for (std::size_t c = 0; c < fm.coils(); ++c) {
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx)
        tmp.at(yy, xx) = fm.mask.cols[xx] ? y.at(c, yy, xx) : cx(0.0f, 0.0f);
    tmp = ifft2c(tmp);
    for (std::size_t i = 0; i < h * w; ++i)
      x.data[i] += std::conj(fm.maps.data[c * h * w + i]) * tmp.data[i];
  }
  return x;
}

CTensor apply_pinv(const ForwardModel& fm, const CTensor& y, int cg_iters,
                   double tol) {
  check_kspace_shape(fm, y, "apply_pinv");
  const std::size_t h = fm.height(), w = fm.width(), n = h * w;
  auto fmd = to_precision<double>(fm);
  CTensor rhs_f = apply_Ah(fm, y);
  std::vector<std::complex<double>> rhs(n);
  for (std::size_t i = 0; i < n; ++i)
    rhs[i] = std::complex<double>(rhs_f.data[i]);
  auto op = [&](const std::complex<double>* in, std::complex<double>* out) {
    nn::RTensor<double> img({2, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      img.data[i] = in[i].real();
      img.data[n + i] = in[i].imag();
    }
    auto back = fmd.apply_Ah(fmd.apply_A(img));
    for (std::size_t i = 0; i < n; ++i)
      out[i] = std::complex<double>(back.data[i], back.data[n + i]);
  };
  auto res = cg_solve_cplx<double>(op, rhs.data(), n, cg_iters, tol);
  if (!res.converged)
    throw NumericError("apply_pinv: CG did not reach tol " +
                       std::to_string(tol) + " in " +
                       std::to_string(cg_iters) + " iterations (residual " +
                       std::to_string(res.rel_residual) + ")");
  CTensor x({h, w});
  for (std::size_t i = 0; i < n; ++i) x.data[i] = to_cx(res.x[i]);
  return x;
}

CTensor apply_mask(const SamplingMask& mask, const CTensor& y) {
  if (y.rank() != 3 || y.shape[2] != mask.width)
    throw ShapeError("apply_mask: k-space shape mismatch");
  CTensor out = y;
  for (std::size_t c = 0; c < y.shape[0]; ++c)
    for (std::size_t yy = 0; yy < y.shape[1]; ++yy)
      for (std::size_t xx = 0; xx < y.shape[2]; ++xx)
        if (!mask.cols[xx]) out.at(c, yy, xx) = cx(0.0f, 0.0f);
  return out;
}

CTensor add_noise(const CTensor& y_full, const CovarianceMatrix& c,
                  std::uint64_t seed) {
  if (y_full.rank() != 3 || y_full.shape[0] != c.dim)
    throw ShapeError("add_noise: coil count mismatch");
  const auto lower = cholesky(c);
  const std::size_t nc = c.dim;
  const std::size_t plane = y_full.shape[1] * y_full.shape[2];
  Rng rng(seed);
  CTensor out = y_full;
  const double inv_sqrt2 = 0.7071067811865475244;
  std::vector<std::complex<double>> wv(nc);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t d = 0; d < nc; ++d)
      wv[d] = std::complex<double>(rng.normal() * inv_sqrt2,
                                   rng.normal() * inv_sqrt2);
    for (std::size_t ci = 0; ci < nc; ++ci) {
      std::complex<double> eta{0.0, 0.0};
      for (std::size_t d = 0; d <= ci; ++d) eta += lower[ci * nc + d] * wv[d];
      out.data[ci * plane + i] += to_cx(eta);
    }
  }
  return out;
}

CTensor prewhiten(const CTensor& y, const CovarianceMatrix& c) {
  if (y.rank() != 3 || y.shape[0] != c.dim)
    throw ShapeError("prewhiten: coil count mismatch");
  const auto lower = cholesky(c);
  const std::size_t nc = c.dim;
  const std::size_t plane = y.shape[1] * y.shape[2];
  CTensor out = y;
  std::vector<std::complex<double>> rhs(nc);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t ci = 0; ci < nc; ++ci)
      rhs[ci] = std::complex<double>(y.data[ci * plane + i]);
    auto solved = forward_subst(lower, nc, rhs);
    for (std::size_t ci = 0; ci < nc; ++ci)
      out.data[ci * plane + i] = to_cx(solved[ci]);
  }
  return out;
}

std::pair<CTensor, double> normalize_kspace(const CTensor& y,
                                            std::size_t acs_size) {
  if (y.rank() != 3) throw ShapeError("normalize_kspace: expected [Nc,H,W]");
  const std::size_t nc = y.shape[0], h = y.shape[1], w = y.shape[2];
  if (acs_size > std::min(h, w))
    throw ConfigError("normalize_kspace: ACS block larger than k-space");
  const std::size_t y0 = (h - acs_size) / 2, x0 = (w - acs_size) / 2;
  std::vector<double> rss(h * w, 0.0);
  CTensor cropped({h, w});
  for (std::size_t c = 0; c < nc; ++c) {
    std::fill(cropped.data.begin(), cropped.data.end(), cx(0.0f, 0.0f));
    for (std::size_t yy = 0; yy < acs_size; ++yy)
      for (std::size_t xx = 0; xx < acs_size; ++xx)
        cropped.at(y0 + yy, x0 + xx) = y.at(c, y0 + yy, x0 + xx);
    CTensor img = ifft2c(cropped);
    for (std::size_t i = 0; i < h * w; ++i) rss[i] += std::norm(img.data[i]);
  }
  for (auto& v : rss) v = std::sqrt(v);
  std::vector<double> sorted = rss;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.99 * static_cast<double>(sorted.size())));
  const double q = sorted[rank - 1];  // nearest-rank percentile
  if (q <= 0.0)
    throw DegenerateInputError("normalize_kspace: ACS reconstruction is zero");
  CTensor out = y;
  const float inv = static_cast<float>(1.0 / q);
  for (auto& v : out.data) v *= inv;
  return {std::move(out), q};
}

double snr_db_from_sigma_sq(double sigma_sq) {
  if (!(sigma_sq > 0.0))
    throw DomainError("snr_db_from_sigma_sq: sigma^2 must be positive");
  return 10.0 * std::log10(1.0 / sigma_sq);
}

double sigma_sq_for_snr_db(double snr_db) {
  return std::pow(10.0, -snr_db / 10.0);
}

}  // namespace deskmri::mri
