#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "deskmri/datagen.hpp"
#include "deskmri/diffusion.hpp"
#include "deskmri/rng.hpp"

using namespace deskmri;
namespace dif = deskmri::diffusion;

namespace {

CTensor random_ct(std::vector<std::size_t> shape, std::uint64_t seed,
                  double scale = 1.0) {
  Rng rng(seed);
  CTensor t(std::move(shape));
  for (auto& v : t.data)
    v = cx(static_cast<float>(scale * rng.normal()),
           static_cast<float>(scale * rng.normal()));
  return t;
}

/* Closed-form denoiser for the Gaussian prior N(mu, tau^2 I) over the real
 * representation: E[x0 | x, sigma] = (tau^2 x + sigma^2 mu) / (tau^2 +
 * sigma^2), with constant Jacobian tau^2/(tau^2 + sigma^2) * I. */
struct GaussianDenoiser : dif::Denoiser {
  CTensor mu;
  double tau;
  GaussianDenoiser(CTensor m, double t) : mu(std::move(m)), tau(t) {}

  CTensor denoise(const CTensor& x, double sigma) const override {
    const double t2 = tau * tau, s2 = sigma * sigma;
    CTensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::complex<double> v =
          (t2 * std::complex<double>(x.data[i]) +
           s2 * std::complex<double>(mu.data[i])) /
          (t2 + s2);
      out.data[i] = cx(static_cast<float>(v.real()),
                       static_cast<float>(v.imag()));
    }
    return out;
  }

  std::pair<CTensor, std::function<CTensor(const CTensor&)>> denoise_with_vjp(
      const CTensor& x, double sigma) const override {
    const double j = tau * tau / (tau * tau + sigma * sigma);
    auto value = denoise(x, sigma);
    return {std::move(value), [j](const CTensor& cot) {
              CTensor g = cot;
              for (auto& v : g.data) v *= static_cast<float>(j);
              return g;
            }};
  }
};

struct ZeroDenoiser : dif::Denoiser {
  CTensor denoise(const CTensor& x, double) const override {
    return CTensor(x.shape);
  }
  std::pair<CTensor, std::function<CTensor(const CTensor&)>> denoise_with_vjp(
      const CTensor& x, double) const override {
    return {CTensor(x.shape),
            [shape = x.shape](const CTensor&) { return CTensor(shape); }};
  }
};

}  // namespace

TEST_CASE("schedules are strictly decreasing with pinned endpoints") {
  for (auto sp : {dif::NoiseSchedule::Spacing::linear,
                  dif::NoiseSchedule::Spacing::edm_power}) {
    auto s = dif::NoiseSchedule::make(0.004, 10.0, 50, sp);
    REQUIRE(s.sigmas.size() == 51);
    CHECK(s.sigmas[0] == 10.0);
    CHECK(s.sigmas[49] == 0.004);
    CHECK(s.sigmas[50] == 0.0);
    for (std::size_t i = 0; i + 1 < s.sigmas.size(); ++i)
      CHECK(s.sigmas[i] > s.sigmas[i + 1]);
  }
  CHECK_THROWS_AS(dif::NoiseSchedule::make(0.0, 10.0, 50,
                                           dif::NoiseSchedule::Spacing::linear),
                  ConfigError);
  CHECK_THROWS_AS(dif::NoiseSchedule::make(1.0, 0.5, 50,
                                           dif::NoiseSchedule::Spacing::linear),
                  ConfigError);
  CHECK_THROWS_AS(dif::NoiseSchedule::make(0.1, 10.0, 0,
                                           dif::NoiseSchedule::Spacing::linear),
                  ConfigError);
}

TEST_CASE("preconditioner identities") {
  auto p0 = dif::edm_precond(0.0, 0.5);
  CHECK(p0.c_skip == 1.0);
  CHECK(p0.c_out == 0.0);
  auto p = dif::edm_precond(0.5, 0.5);
  CHECK(p.c_skip == doctest::Approx(0.5));
  for (double sigma : {0.01, 0.3, 2.0, 40.0}) {
    auto pc = dif::edm_precond(sigma, 0.5);
    CHECK(dif::edm_loss_weight(sigma, 0.5) * pc.c_out * pc.c_out ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pc.c_noise == doctest::Approx(std::log(sigma) / 4.0));
  }
  CHECK_THROWS_AS(dif::edm_precond(-1.0, 0.5), DomainError);
}

TEST_CASE("edm_denoise limits") {
  nn::NetConfig cfg;
  cfg.in_ch = 3;
  cfg.level_channels = {4};
  cfg.seed = 3;
  auto net = nn::Network<float>::initialized(cfg);
  auto x = random_ct({8, 8}, 4);

  // sigma = 0 collapses to the identity.
  auto same = dif::edm_denoise(net, x, 0.0, 0.5);
  CHECK(std::memcmp(same.data.data(), x.data.data(), x.size() * sizeof(cx)) ==
        0);

  // Zero raw network leaves only the skip path.
  auto zero_net = net;
  std::fill(zero_net.theta.begin(), zero_net.theta.end(), 0.0f);
  const double sigma = 0.7;
  auto d = dif::edm_denoise(zero_net, x, sigma, 0.5);
  const auto pc = dif::edm_precond(sigma, 0.5);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(d.data[i].real() ==
          doctest::Approx(pc.c_skip * x.data[i].real()).epsilon(1e-5));
    CHECK(d.data[i].imag() ==
          doctest::Approx(pc.c_skip * x.data[i].imag()).epsilon(1e-5));
  }
}

TEST_CASE("edm_loss hand case and positivity") {
  nn::NetConfig cfg;
  cfg.in_ch = 3;
  cfg.level_channels = {4};
  cfg.seed = 5;
  auto net = nn::Network<float>::initialized(cfg);
  std::fill(net.theta.begin(), net.theta.end(), 0.0f);

  // Zero image and zero noise give exactly zero loss.
  CTensor zero({8, 8});
  CHECK(dif::edm_loss_given(net, 0.5, zero, 0.3, zero) == 0.0);

  // Fixed draw, zero network: loss = weight * ||c_skip (x0+n) - x0||^2.
  auto x0 = random_ct({8, 8}, 6);
  auto noise = random_ct({8, 8}, 7, 0.3);
  const double sigma = 0.9;
  const auto pc = dif::edm_precond(sigma, 0.5);
  double expected = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const std::complex<double> d =
        pc.c_skip * (std::complex<double>(x0.data[i]) +
                     std::complex<double>(noise.data[i])) -
        std::complex<double>(x0.data[i]);
    expected += std::norm(d);
  }
  expected *= dif::edm_loss_weight(sigma, 0.5);
  CHECK(dif::edm_loss_given(net, 0.5, x0, sigma, noise) ==
        doctest::Approx(expected).epsilon(1e-4));

  // Random-draw losses are nonnegative.
  auto net2 = nn::Network<float>::initialized(cfg);
  dif::EdmConfig ecfg;
  ecfg.net = cfg;
  for (int i = 0; i < 5; ++i)
    CHECK(dif::edm_loss(net2, ecfg, x0, 100 + i) >= 0.0);
}

TEST_CASE("train_edm reduces the loss, overfits one image, deterministic") {
  std::vector<CTensor> images;
  for (int i = 0; i < 4; ++i) {
    auto ph = datagen::gen_phantom(16, 16, 50 + i);
    images.push_back(ph.image);
  }
  dif::EdmConfig cfg;
  cfg.net.level_channels = {4, 8};
  cfg.iters = 150;
  cfg.batch = 2;
  cfg.lr = 2e-3;
  cfg.seed = 51;
  auto ckpt = dif::train_edm(images, cfg);
  REQUIRE(ckpt.loss_trace.size() == 150);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 50; ++i) {
    head += ckpt.loss_trace[i];
    tail += ckpt.loss_trace[100 + i];
  }
  CHECK(tail < head);

  auto ckpt2 = dif::train_edm(images, cfg);
  CHECK(ckpt.net.theta == ckpt2.net.theta);

  CHECK_THROWS_AS(dif::train_edm({}, cfg), ContractError);

  // Single-image overfit: denoising MSE at a fixed noise level halves.
  // Narrow sigma range so the tiny network concentrates on it.
  std::vector<CTensor> one{images[0]};
  dif::EdmConfig ocfg = cfg;
  ocfg.sigma_min = 0.1;
  ocfg.sigma_max = 2.0;
  ocfg.iters = 300;
  ocfg.lr = 3e-3;
  ocfg.seed = 52;
  auto init_net = nn::Network<float>::initialized([&] {
    auto nc = ocfg.net;
    nc.in_ch = 3;
    nc.seed = ocfg.seed;
    return nc;
  }());
  auto trained = dif::train_edm(one, ocfg);
  const double sigma = 0.5;
  auto noise = random_ct({16, 16}, 53, sigma);
  const double before =
      dif::edm_loss_given(init_net, ocfg.sigma_data, one[0], sigma, noise);
  const double after =
      dif::edm_loss_given(trained.net, ocfg.sigma_data, one[0], sigma, noise);
  CHECK(after < 0.5 * before);
}

TEST_CASE("edm checkpoint round trip") {
  nn::NetConfig cfg;
  cfg.in_ch = 3;
  cfg.level_channels = {3};
  cfg.seed = 61;
  dif::EdmCheckpoint ckpt{nn::Network<float>::initialized(cfg), {}, {1.0, 0.5}};
  ckpt.cfg.sigma_data = 0.4;
  const std::string path = "test_edm.ckpt";
  dif::save_edm(path, ckpt);
  auto loaded = dif::load_edm(path);
  CHECK(loaded.net.theta == ckpt.net.theta);
  CHECK(loaded.cfg.sigma_data == 0.4);
  CHECK(loaded.loss_trace.size() == 2);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".trace.csv");
}

TEST_CASE("one-step Euler with a zero denoiser lands on zero") {
  auto sched = dif::NoiseSchedule::make(0.01, 2.0, 1,
                                        dif::NoiseSchedule::Spacing::linear);
  // x1 = x0 + (0 - smax) * (x0 - 0) / smax = 0 exactly.
  ZeroDenoiser den;
  auto out = dif::sample_uncond(den, sched, 4, 4, 7);
  for (const auto& v : out.data) {
    CHECK(v.real() == 0.0f);
    CHECK(v.imag() == 0.0f);
  }
}

TEST_CASE("unconditional sampling reproduces Gaussian prior moments") {
  const std::size_t hw = 8;
  CTensor mu = random_ct({hw, hw}, 71);
  const double tau = 1.0;
  GaussianDenoiser den(mu, tau);
  auto sched = dif::NoiseSchedule::make(0.002, 80.0, 200,
                                        dif::NoiseSchedule::Spacing::edm_power);
  const int n = 500;
  std::vector<double> mean_re(hw * hw, 0.0), mean_im(hw * hw, 0.0);
  std::vector<double> sq(2 * hw * hw, 0.0);
  for (int s = 0; s < n; ++s) {
    auto x = dif::sample_uncond(den, sched, hw, hw, 1000 + s);
    for (std::size_t i = 0; i < x.size(); ++i) {
      mean_re[i] += x.data[i].real();
      mean_im[i] += x.data[i].imag();
      sq[2 * i] += x.data[i].real() * x.data[i].real();
      sq[2 * i + 1] += x.data[i].imag() * x.data[i].imag();
    }
  }
  // Pooled over pixels: mean error relative to tau and variance per real
  // component within 5%.
  double mean_err = 0.0, var_acc = 0.0;
  for (std::size_t i = 0; i < hw * hw; ++i) {
    const double mr = mean_re[i] / n, mi = mean_im[i] / n;
    mean_err += std::abs(mr - mu.data[i].real()) + std::abs(mi - mu.data[i].imag());
    var_acc += sq[2 * i] / n - mr * mr;
    var_acc += sq[2 * i + 1] / n - mi * mi;
  }
  mean_err /= (2.0 * hw * hw);
  const double var = var_acc / (2.0 * hw * hw);
  CHECK(mean_err < 0.05 * tau * 3.0);  // mean absolute deviation ~ tau/sqrt(n)
  CHECK(var == doctest::Approx(tau * tau).epsilon(0.05));
}

TEST_CASE("sampling is deterministic per seed in ODE mode") {
  CTensor mu = random_ct({4, 4}, 81);
  GaussianDenoiser den(mu, 0.7);
  auto sched = dif::NoiseSchedule::make(0.01, 10.0, 30,
                                        dif::NoiseSchedule::Spacing::linear);
  auto a = dif::sample_uncond(den, sched, 4, 4, 5);
  auto b = dif::sample_uncond(den, sched, 4, 4, 5);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(cx)) == 0);
  auto c = dif::sample_uncond(den, sched, 4, 4, 6);
  CHECK(std::memcmp(a.data.data(), c.data.data(), a.size() * sizeof(cx)) != 0);
}

TEST_CASE("DPS with gamma0 = 0 is bit-identical to unconditional sampling") {
  CTensor mu = random_ct({8, 8}, 91);
  GaussianDenoiser den(mu, 1.0);
  mri::ForwardModel fm;
  fm.maps = mri::make_sensitivities(2, 8, 8, 92);
  fm.mask = mri::make_mask(8, 2, 2, 93);
  auto y = random_ct({2, 8, 8}, 94);
  dif::DpsConfig cfg;
  cfg.schedule = dif::NoiseSchedule::make(0.01, 10.0, 40,
                                          dif::NoiseSchedule::Spacing::linear);
  cfg.gamma0 = 0.0;
  auto a = dif::dps_reconstruct(den, y, fm, cfg, 11);
  auto b = dif::sample_uncond(den, cfg.schedule, 8, 8, 11);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(cx)) == 0);

  cfg.gamma0 = -1.0;
  CHECK_THROWS_AS(dif::dps_reconstruct(den, y, fm, cfg, 11), ConfigError);
}

TEST_CASE("DPS recovers the conjugate posterior mean for a Gaussian prior") {
  // Fully sampled noiseless measurements: the posterior collapses onto the
  // true image, which is the closed-form posterior mean.
  const std::size_t hw = 8;
  CTensor mu = random_ct({hw, hw}, 101);
  const double tau = 1.0;
  GaussianDenoiser den(mu, tau);

  mri::ForwardModel fm;
  fm.maps = mri::make_sensitivities(1, hw, hw, 102);
  fm.mask = mri::make_mask(hw, 1, 0, 0);
  CTensor x_true = mu;
  {
    Rng rng(103);
    for (auto& v : x_true.data)
      v += cx(static_cast<float>(tau * rng.normal() * 0.70710678),
              static_cast<float>(tau * rng.normal() * 0.70710678));
  }
  auto y = mri::apply_A(fm, x_true);

  dif::DpsConfig cfg;
  cfg.schedule = dif::NoiseSchedule::make(0.004, 10.0, 300,
                                          dif::NoiseSchedule::Spacing::linear);
  cfg.gamma0 = 1.0;
  std::vector<CTensor> samples;
  for (int s = 0; s < 5; ++s)
    samples.push_back(dif::dps_reconstruct(den, y, fm, cfg, 200 + s));
  auto avg = dif::posterior_average(samples);
  CTensor diff = avg;
  for (std::size_t i = 0; i < diff.size(); ++i)
    diff.data[i] -= x_true.data[i];
  CHECK(norm2(diff) / norm2(x_true) < 0.05);
}

TEST_CASE("guidance reduces the data residual versus unconditional draws") {
  const std::size_t hw = 16;
  CTensor mu = random_ct({hw, hw}, 111);
  GaussianDenoiser den(mu, 1.0);
  mri::ForwardModel fm;
  fm.maps = mri::make_sensitivities(4, hw, hw, 112);
  fm.mask = mri::make_mask(hw, 4, 4, 113);
  CTensor x_true = random_ct({hw, hw}, 114);
  auto y = mri::apply_A(fm, x_true);

  dif::DpsConfig cfg;
  cfg.schedule = dif::NoiseSchedule::make(0.004, 10.0, 100,
                                          dif::NoiseSchedule::Spacing::linear);
  cfg.gamma0 = 1.0;
  auto residual = [&](const CTensor& x) {
    auto ax = mri::apply_A(fm, x);
    CTensor r = y;
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= ax.data[i];
    return norm2(r);
  };
  const double guided = residual(dif::dps_reconstruct(den, y, fm, cfg, 7));
  const double uncond =
      residual(dif::sample_uncond(den, cfg.schedule, hw, hw, 7));
  CHECK(guided < uncond);
}

TEST_CASE("posterior averaging basics") {
  auto x = random_ct({4, 4}, 121);
  auto same = dif::posterior_average({x});
  CHECK(std::memcmp(same.data.data(), x.data.data(), x.size() * sizeof(cx)) ==
        0);
  CTensor neg = x;
  for (auto& v : neg.data) v = -v;
  auto zero = dif::posterior_average({x, neg});
  for (const auto& v : zero.data) {
    CHECK(v.real() == 0.0f);
    CHECK(v.imag() == 0.0f);
  }
  CHECK_THROWS_AS(dif::posterior_average({}), ContractError);
}
