#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "deskmri/mri.hpp"
#include "deskmri/rng.hpp"
#include "oracles.hpp"

using namespace deskmri;

namespace {

CTensor random_ct(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed);
  CTensor t(std::move(shape));
  for (auto& v : t.data)
    v = cx(static_cast<float>(rng.normal()), static_cast<float>(rng.normal()));
  return t;
}

double rel_err(const CTensor& a, const CTensor& b) {
  CTensor d = a;
  for (std::size_t i = 0; i < d.size(); ++i) d.data[i] -= b.data[i];
  return norm2(d) / std::max(norm2(b), 1e-30);
}

mri::ForwardModel make_fm(int nc, std::size_t h, std::size_t w, int r,
                          int acs, std::uint64_t seed) {
  mri::ForwardModel fm;
  fm.maps = mri::make_sensitivities(nc, h, w, seed);
  fm.mask = mri::make_mask(w, r, acs, seed + 1);
  return fm;
}

}  // namespace

TEST_CASE("single-coil sensitivities have unit magnitude") {
  auto maps = mri::make_sensitivities(1, 12, 12, 3);
  for (const auto& v : maps.data)
    CHECK(std::abs(v) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("sensitivities are SOS-normalized and deterministic") {
  auto maps = mri::make_sensitivities(4, 16, 16, 9);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      double sos = 0.0;
      for (std::size_t c = 0; c < 4; ++c) sos += std::norm(maps.at(c, y, x));
      CHECK(sos == doctest::Approx(1.0).epsilon(1e-6));
    }
  auto maps2 = mri::make_sensitivities(4, 16, 16, 9);
  CHECK(std::memcmp(maps.data.data(), maps2.data.data(),
                    maps.size() * sizeof(cx)) == 0);
  CHECK_THROWS_AS(mri::make_sensitivities(0, 8, 8, 1), ConfigError);
}

TEST_CASE("mask includes ACS and meets the budget") {
  auto m = mri::make_mask(8, 2, 2, 5);
  CHECK(m.sampled_count() == 4);
  CHECK(m.cols[3] == 1);
  CHECK(m.cols[4] == 1);

  auto full = mri::make_mask(10, 1, 0, 5);
  CHECK(full.sampled_count() == 10);

  auto m64 = mri::make_mask(64, 4, 8, 123);
  CHECK(m64.sampled_count() == 16);
  auto m64b = mri::make_mask(64, 4, 8, 123);
  CHECK(m64.cols == m64b.cols);
  for (int i = 0; i < 8; ++i) CHECK(m64.cols[28 + i] == 1);

  CHECK_THROWS_AS(mri::make_mask(8, 8, 2, 1), ConfigError);
}

TEST_CASE("mask budget is ceil(W/R) across configurations") {
  for (std::size_t w : {15u, 16u, 33u, 64u})
    for (int r : {1, 2, 3, 4, 8}) {
      const std::size_t budget = (w + r - 1) / r;
      const int acs = budget >= 2 ? 2 : 0;
      auto m = mri::make_mask(w, r, acs, 7 * w + r);
      CHECK(m.sampled_count() == budget);
    }
}

TEST_CASE("apply_A of zero image is zero and masks exactly") {
  auto fm = make_fm(3, 16, 16, 4, 4, 11);
  CTensor zero({16, 16});
  auto y = mri::apply_A(fm, zero);
  CHECK(norm2(y) == 0.0);
  auto x = random_ct({16, 16}, 12);
  y = mri::apply_A(fm, x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t yy = 0; yy < 16; ++yy)
      for (std::size_t xx = 0; xx < 16; ++xx)
        if (!fm.mask.cols[xx]) CHECK(std::abs(y.at(c, yy, xx)) == 0.0f);
}

TEST_CASE("apply_A reduces to fft2c for trivial single-coil model") {
  mri::ForwardModel fm;
  fm.maps = CTensor({1, 8, 8});
  for (auto& v : fm.maps.data) v = cx(1.0f, 0.0f);
  fm.mask = mri::make_mask(8, 1, 0, 0);
  auto x = random_ct({8, 8}, 21);
  auto y = mri::apply_A(fm, x);
  CTensor ky({8, 8});
  std::copy(y.data.begin(), y.data.begin() + 64, ky.data.begin());
  CHECK(rel_err(ky, fft2c(x)) < 1e-6);

  // And the adjoint reduces to ifft2c.
  auto back = mri::apply_Ah(fm, y);
  CHECK(rel_err(back, ifft2c(ky)) < 1e-6);
}

TEST_CASE("adjoint identity across coil counts and accelerations") {
  int cfg = 0;
  for (int nc : {1, 2, 4, 8})
    for (int r : {1, 2, 4, 8}) {
      auto fm = make_fm(nc, 16, 16, r, 2, 100 + cfg++);
      auto x = random_ct({16, 16}, 200 + cfg);
      auto y = random_ct({static_cast<std::size_t>(nc), 16, 16}, 300 + cfg);
      const auto lhs = vdot(mri::apply_A(fm, x), y);
      const auto rhs = vdot(x, mri::apply_Ah(fm, y));
      CHECK(std::abs(lhs - rhs) / std::abs(lhs) < 1e-5);
    }
}

TEST_CASE("fully sampled SOS model has A^H A == identity") {
  auto fm = make_fm(4, 16, 16, 1, 4, 31);
  auto x = random_ct({16, 16}, 32);
  auto back = mri::apply_Ah(fm, mri::apply_A(fm, x));
  CHECK(rel_err(back, x) < 1e-5);
}

TEST_CASE("apply_Ah of zero is zero") {
  auto fm = make_fm(2, 8, 8, 2, 2, 41);
  CTensor zero({2, 8, 8});
  CHECK(norm2(mri::apply_Ah(fm, zero)) == 0.0);
}

TEST_CASE("apply_pinv equals the adjoint when fully sampled") {
  auto fm = make_fm(4, 16, 16, 1, 4, 51);
  auto x = random_ct({16, 16}, 52);
  auto y = mri::apply_A(fm, x);
  auto pinv = mri::apply_pinv(fm, y, 10, 1e-8);
  CHECK(rel_err(pinv, mri::apply_Ah(fm, y)) < 1e-6);
}

TEST_CASE("apply_pinv drives the normal-equation residual below tol") {
  auto fm = make_fm(4, 16, 16, 4, 4, 61);
  auto y = mri::apply_mask(fm.mask, random_ct({4, 16, 16}, 62));
  // The undersampled normal operator is nearly singular, so the reachable
  // residual is modest; the contract is tol-or-error.
  const double tol = 1e-2;
  auto xhat = mri::apply_pinv(fm, y, 250, tol);
  auto rhs = mri::apply_Ah(fm, y);
  auto lhs = mri::apply_Ah(fm, mri::apply_A(fm, xhat));
  CTensor resid = lhs;
  for (std::size_t i = 0; i < resid.size(); ++i) resid.data[i] -= rhs.data[i];
  CHECK(norm2(resid) / norm2(rhs) < tol);

  CHECK_THROWS_AS(mri::apply_pinv(fm, y, 20, 1e-10), NumericError);

  CTensor zero({4, 16, 16});
  CHECK(norm2(mri::apply_pinv(fm, zero, 10, 1e-8)) == 0.0);
}

TEST_CASE("add_noise matches the requested covariance") {
  CTensor zero({2, 100, 100});
  auto noisy = mri::add_noise(zero, CovarianceMatrix::identity(2), 77);
  double v0 = 0.0, v1 = 0.0;
  const std::size_t n = 100 * 100;
  for (std::size_t i = 0; i < n; ++i) {
    v0 += std::norm(noisy.data[i]);
    v1 += std::norm(noisy.data[n + i]);
  }
  v0 /= n;
  v1 /= n;
  CHECK(v0 == doctest::Approx(1.0).epsilon(0.05));
  CHECK(v1 == doctest::Approx(1.0).epsilon(0.05));

  auto noisy2 =
      mri::add_noise(zero, CovarianceMatrix::diagonal({4.0, 1.0}), 78);
  double w0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) w0 += std::norm(noisy2.data[i]);
  CHECK(w0 / n == doctest::Approx(4.0).epsilon(0.05));

  // Vanishing covariance leaves the input unchanged.
  auto x = random_ct({2, 8, 8}, 79);
  auto tiny = mri::add_noise(x, CovarianceMatrix::diagonal({1e-30, 1e-30}), 80);
  CHECK(rel_err(tiny, x) < 1e-6);

  CHECK_THROWS_AS(
      mri::add_noise(zero, CovarianceMatrix::diagonal({1.0, -1.0}), 1),
      FactorizationError);
}

TEST_CASE("prewhiten is identity for C = I and halves a 4x-variance coil") {
  auto y = random_ct({2, 8, 8}, 91);
  auto same = mri::prewhiten(y, CovarianceMatrix::identity(2));
  CHECK(rel_err(same, y) < 1e-7);
  auto scaled = mri::prewhiten(y, CovarianceMatrix::diagonal({4.0, 1.0}));
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(scaled.data[i].real() == doctest::Approx(y.data[i].real() * 0.5));
    CHECK(scaled.data[64 + i] == y.data[64 + i]);
  }
}

TEST_CASE("prewhitened correlated noise has identity covariance") {
  CovarianceMatrix c;
  c.dim = 2;
  c.entries = {{2.0, 0.0}, {0.8, 0.3}, {0.8, -0.3}, {1.5, 0.0}};
  CTensor zero({2, 100, 100});
  auto white = mri::prewhiten(mri::add_noise(zero, c, 93), c);
  const std::size_t n = 100 * 100;
  std::complex<double> c00{0, 0}, c01{0, 0}, c11{0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const std::complex<double> a(white.data[i]), b(white.data[n + i]);
    c00 += a * std::conj(a);
    c01 += a * std::conj(b);
    c11 += b * std::conj(b);
  }
  CHECK(std::abs(c00) / n == doctest::Approx(1.0).epsilon(0.05));
  CHECK(std::abs(c11) / n == doctest::Approx(1.0).epsilon(0.05));
  CHECK(std::abs(c01) / n < 0.05);
}

TEST_CASE("normalize_kspace sets the ACS percentile to one") {
  auto fm = make_fm(3, 32, 32, 1, 8, 95);
  CTensor img({32, 32});
  Rng rng(96);
  for (auto& v : img.data)
    v = cx(static_cast<float>(std::abs(rng.normal())), 0.0f);
  auto y = mri::apply_A(fm, img);
  auto [norm_y, q] = mri::normalize_kspace(y, 8);
  CHECK(q > 0.0);
  auto [renorm, q2] = mri::normalize_kspace(norm_y, 8);
  CHECK(q2 == doctest::Approx(1.0).epsilon(1e-5));

  // Homogeneity: scaling the input by 7 scales q and leaves the output.
  CTensor y7 = y;
  for (auto& v : y7.data) v *= 7.0f;
  auto [norm_y7, q7] = mri::normalize_kspace(y7, 8);
  CHECK(q7 == doctest::Approx(7.0 * q).epsilon(1e-5));
  CHECK(rel_err(norm_y7, norm_y) < 1e-5);

  CTensor zeros({2, 16, 16});
  CHECK_THROWS_AS(mri::normalize_kspace(zeros, 4), DegenerateInputError);
}

TEST_CASE("SNR conversions") {
  CHECK(mri::snr_db_from_sigma_sq(1.0) == doctest::Approx(0.0));
  CHECK(mri::snr_db_from_sigma_sq(0.01) == doctest::Approx(20.0));
  CHECK(mri::sigma_sq_for_snr_db(32.0) ==
        doctest::Approx(std::pow(10.0, -3.2)).epsilon(1e-12));
  CHECK(mri::snr_db_from_sigma_sq(std::pow(10.0, -3.2)) ==
        doctest::Approx(32.0));
  CHECK_THROWS_AS(mri::snr_db_from_sigma_sq(0.0), DomainError);
  CHECK_THROWS_AS(mri::snr_db_from_sigma_sq(-1.0), DomainError);
}

TEST_CASE("precision-generic forward model matches the CTensor path") {
  auto fm = make_fm(3, 16, 16, 2, 4, 97);
  auto x = random_ct({16, 16}, 98);
  auto fmf = mri::to_precision<float>(fm);
  auto xf = nn::planes_from_ctensor<float>(x);
  auto yf = nn::ctensor_from_planes(fmf.apply_A(xf));
  CHECK(rel_err(yf, mri::apply_A(fm, x)) < 1e-6);
  auto y = random_ct({3, 16, 16}, 99);
  auto backf = nn::ctensor_from_planes(
      fmf.apply_Ah(nn::planes_from_ctensor<float>(y)));
  CHECK(rel_err(backf, mri::apply_Ah(fm, y)) < 1e-6);
}
