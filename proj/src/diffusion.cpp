#include "deskmri/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "deskmri/rng.hpp"

namespace deskmri::diffusion {

NoiseSchedule NoiseSchedule::make(double sigma_min, double sigma_max,
                                  int steps, Spacing spacing) {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
    throw ConfigError("noise schedule: need 0 < sigma_min < sigma_max");
  if (steps < 1) throw ConfigError("noise schedule: need steps >= 1");
  NoiseSchedule s;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.steps = steps;
  s.spacing = spacing;
  s.sigmas.resize(static_cast<std::size_t>(steps) + 1);
  const double rho = 7.0;
  for (int i = 0; i < steps; ++i) {
    const double t = steps == 1 ? 0.0
                                : static_cast<double>(i) /
                                      static_cast<double>(steps - 1);
    if (spacing == Spacing::linear) {
      s.sigmas[i] = sigma_max + t * (sigma_min - sigma_max);
    } else {
      const double a = std::pow(sigma_max, 1.0 / rho);
      const double b = std::pow(sigma_min, 1.0 / rho);
      s.sigmas[i] = std::pow(a + t * (b - a), rho);
    }
  }
  s.sigmas[0] = sigma_max;                // exact endpoints
  if (steps > 1) s.sigmas[steps - 1] = sigma_min;
  s.sigmas[steps] = 0.0;
  return s;
}

Preconditioner edm_precond(double sigma, double sigma_data) {
  if (sigma < 0.0) throw DomainError("edm_precond: sigma must be >= 0");
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  Preconditioner p;
  p.c_skip = d2 / (s2 + d2);
  p.c_out = sigma * sigma_data / std::sqrt(s2 + d2);
  p.c_in = 1.0 / std::sqrt(s2 + d2);
  p.c_noise = sigma > 0.0 ? std::log(sigma) / 4.0 : 0.0;
  return p;
}

double edm_loss_weight(double sigma, double sigma_data) {
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  return (s2 + d2) / (s2 * d2);
}

namespace {

// Network input: [c_in * re, c_in * im, c_noise] channels.
int precond_forward(nn::Tape<float>& tape, const nn::Network<float>& net,
                    const std::vector<int>& params, int x_var,
                    const Preconditioner& pc, std::size_t h, std::size_t w) {
  nn::RTensor<float> cond({1, h, w});
  std::fill(cond.data.begin(), cond.data.end(),
            static_cast<float>(pc.c_noise));
  int in = tape.concat_ch(tape.scale(x_var, static_cast<float>(pc.c_in)),
                          tape.constant(std::move(cond)));
  int raw = net.forward(tape, in, params);
  return tape.add(tape.scale(x_var, static_cast<float>(pc.c_skip)),
                  tape.scale(raw, static_cast<float>(pc.c_out)));
}

}  // namespace

NetDenoiser::NetDenoiser(nn::Network<float> net, double sigma_data)
    : net_(std::move(net)), sigma_data_(sigma_data) {
  if (net_.cfg.in_ch != 3)
    throw ConfigError("NetDenoiser: network must take 3 input channels");
  if (!(sigma_data > 0.0))
    throw ConfigError("NetDenoiser: sigma_data must be positive");
}

CTensor NetDenoiser::denoise(const CTensor& x, double sigma) const {
  if (sigma == 0.0) return x;  // c_skip -> 1, c_out -> 0
  const auto pc = edm_precond(sigma, sigma_data_);
  nn::Tape<float> tape;
  int x_var = tape.constant(nn::planes_from_ctensor<float>(x));
  auto params = net_.bind(tape, false);
  int d = precond_forward(tape, net_, params, x_var, pc, x.shape[0],
                          x.shape[1]);
  return nn::ctensor_from_planes(tape.val(d));
}

std::pair<CTensor, std::function<CTensor(const CTensor&)>>
NetDenoiser::denoise_with_vjp(const CTensor& x, double sigma) const {
  if (sigma == 0.0) {
    return {x, [](const CTensor& cot) { return cot; }};
  }
  const auto pc = edm_precond(sigma, sigma_data_);
  auto tape = std::make_shared<nn::Tape<float>>();
  int x_var = tape->leaf(nn::planes_from_ctensor<float>(x), true);
  auto params = net_.bind(*tape, false);
  int d = precond_forward(*tape, net_, params, x_var, pc, x.shape[0],
                          x.shape[1]);
  CTensor value = nn::ctensor_from_planes(tape->val(d));
  auto vjp = [tape, x_var, d](const CTensor& cot) {
    tape->backward_seed(d, nn::planes_from_ctensor<float>(cot));
    return nn::ctensor_from_planes(tape->grad(x_var));
  };
  return {std::move(value), std::move(vjp)};
}

CTensor edm_denoise(const nn::Network<float>& net, const CTensor& x_noisy,
                    double sigma, double sigma_data) {
  if (sigma < 0.0) throw DomainError("edm_denoise: sigma must be >= 0");
  return NetDenoiser(net, sigma_data).denoise(x_noisy, sigma);
}

double edm_loss_given(const nn::Network<float>& net, double sigma_data,
                      const CTensor& x0, double sigma, const CTensor& noise) {
  if (!x0.same_shape(noise)) throw ShapeError("edm_loss: noise shape mismatch");
  CTensor noisy = x0;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy.data[i] += noise.data[i];
  NetDenoiser den(net, sigma_data);
  CTensor d = den.denoise(noisy, sigma);
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    acc += std::norm(std::complex<double>(d.data[i]) -
                     std::complex<double>(x0.data[i]));
  const double loss = edm_loss_weight(sigma, sigma_data) * acc;
  if (!std::isfinite(loss)) throw NumericError("edm_loss: non-finite value");
  return loss;
}

namespace {

double draw_sigma(const EdmConfig& cfg, Rng& rng) {
  if (cfg.law == EdmConfig::SigmaLaw::log_uniform)
    return std::exp(rng.uniform(std::log(cfg.sigma_min),
                                std::log(cfg.sigma_max)));
  const double ln_sigma = cfg.p_mean + cfg.p_std * rng.normal();
  return std::clamp(std::exp(ln_sigma), cfg.sigma_min, cfg.sigma_max);
}

CTensor draw_noise(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  CTensor n(std::move(shape));
  for (auto& v : n.data)
    v = cx(static_cast<float>(sigma * rng.normal()),
           static_cast<float>(sigma * rng.normal()));
  return n;
}

int edm_loss_tape(nn::Tape<float>& tape, const nn::Network<float>& net,
                  const std::vector<int>& params, double sigma_data,
                  const CTensor& x0, double sigma, const CTensor& noise) {
  const auto pc = edm_precond(sigma, sigma_data);
  CTensor noisy = x0;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy.data[i] += noise.data[i];
  int x_var = tape.constant(nn::planes_from_ctensor<float>(noisy));
  int d = precond_forward(tape, net, params, x_var, pc, x0.shape[0],
                          x0.shape[1]);
  int diff = tape.sub(d, tape.constant(nn::planes_from_ctensor<float>(x0)));
  return tape.scale(tape.dot(diff, diff),
                    static_cast<float>(edm_loss_weight(sigma, sigma_data)));
}

}  // namespace

double edm_loss(const nn::Network<float>& net, const EdmConfig& cfg,
                const CTensor& x0, std::uint64_t seed) {
  Rng rng(seed);
  const double sigma = draw_sigma(cfg, rng);
  CTensor noise = draw_noise(x0.shape, sigma, rng);
  return edm_loss_given(net, cfg.sigma_data, x0, sigma, noise);
}

EdmCheckpoint train_edm(const std::vector<CTensor>& images,
                        const EdmConfig& cfg) {
  if (images.empty()) throw ContractError("train_edm: empty image set");
  if (cfg.iters < 1 || cfg.batch < 1)
    throw ConfigError("train_edm: iters and batch must be >= 1");
  nn::NetConfig net_cfg = cfg.net;
  net_cfg.in_ch = 3;
  net_cfg.seed = cfg.seed;
  EdmCheckpoint ckpt{nn::Network<float>::initialized(net_cfg), cfg, {}};
  ckpt.cfg.net = net_cfg;

  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  nn::AdamState<float> state(ckpt.net.theta.size());

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(cfg.seed + 1);
  for (std::size_t i = 0; i + 1 < order.size(); ++i)
    std::swap(order[i], order[i + shuffle_rng.below(order.size() - i)]);
  Rng draw_rng(cfg.seed + 2);

  for (int iter = 0; iter < cfg.iters; ++iter) {
    nn::Tape<float> tape;
    auto params = ckpt.net.bind(tape, true);
    int loss = -1;
    for (int j = 0; j < cfg.batch; ++j) {
      const auto& x0 =
          images[order[(static_cast<std::size_t>(iter) * cfg.batch + j) %
                       order.size()]];
      const double sigma = draw_sigma(cfg, draw_rng);
      CTensor noise = draw_noise(x0.shape, sigma, draw_rng);
      int item = edm_loss_tape(tape, ckpt.net, params, cfg.sigma_data, x0,
                               sigma, noise);
      loss = loss < 0 ? item : tape.add(loss, item);
    }
    loss = tape.scale(loss, 1.0f / static_cast<float>(cfg.batch));
    const double loss_val = tape.scalar_val(loss);
    if (!std::isfinite(loss_val))
      throw TrainingError("train_edm: non-finite loss at iteration " +
                          std::to_string(iter));
    ckpt.loss_trace.push_back(loss_val);
    tape.backward(loss);
    auto grad = ckpt.net.grad_flat(tape, params);
    adam_step(state, ckpt.net.theta, grad, adam,
              [&](std::size_t i) { return ckpt.net.block_of_index(i); });
  }
  return ckpt;
}

void save_edm(const std::string& path, const EdmCheckpoint& ckpt) {
  nn::CheckpointExtras ex;
  ex.steps = static_cast<long>(ckpt.loss_trace.size());
  ex.scalars["sigma_data"] = ckpt.cfg.sigma_data;
  ex.scalars["sigma_min"] = ckpt.cfg.sigma_min;
  ex.scalars["sigma_max"] = ckpt.cfg.sigma_max;
  ex.scalars["lr"] = ckpt.cfg.lr;
  ex.scalars["train_seed"] = static_cast<double>(ckpt.cfg.seed);
  nn::save_checkpoint(path, ckpt.net, ex);
  std::ofstream trace(path + ".trace.csv");
  trace << "iter,edm_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < ckpt.loss_trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9e\n", i, ckpt.loss_trace[i]);
    trace << buf;
  }
}

EdmCheckpoint load_edm(const std::string& path) {
  EdmCheckpoint ckpt;
  nn::CheckpointExtras ex;
  ckpt.net = nn::load_checkpoint(path, &ex);
  ckpt.cfg.net = ckpt.net.cfg;
  if (ex.scalars.count("sigma_data"))
    ckpt.cfg.sigma_data = ex.scalars["sigma_data"];
  if (ex.scalars.count("sigma_min")) ckpt.cfg.sigma_min = ex.scalars["sigma_min"];
  if (ex.scalars.count("sigma_max")) ckpt.cfg.sigma_max = ex.scalars["sigma_max"];
  if (ex.scalars.count("lr")) ckpt.cfg.lr = ex.scalars["lr"];
  if (ex.scalars.count("train_seed"))
    ckpt.cfg.seed = static_cast<std::uint64_t>(ex.scalars["train_seed"]);
  ckpt.cfg.iters = static_cast<int>(ex.steps);
  std::ifstream trace(path + ".trace.csv");
  if (trace) {
    std::string line;
    std::getline(trace, line);
    while (std::getline(trace, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos)
        ckpt.loss_trace.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  return ckpt;
}

namespace {

// Shared Euler walk; `guide` (when set) applies the likelihood correction
// after the Euler update given the current state and x0 estimate.
CTensor euler_walk(
    const Denoiser& den, const NoiseSchedule& schedule, std::size_t h,
    std::size_t w, std::uint64_t seed, bool stochastic, double churn,
    const std::function<void(int step, double sigma, const CTensor& x_before,
                             CTensor& x_after)>& guide) {
  Rng rng(seed);
  CTensor x({h, w});
  for (auto& v : x.data)
    v = cx(static_cast<float>(schedule.sigma_max * rng.normal()),
           static_cast<float>(schedule.sigma_max * rng.normal()));
  for (int i = 0; i < schedule.steps; ++i) {
    double sigma = schedule.sigmas[i];
    const double sigma_next = schedule.sigmas[i + 1];
    if (stochastic && churn > 0.0) {
      const double gamma =
          std::min(churn / schedule.steps, std::sqrt(2.0) - 1.0);
      const double sigma_hat = sigma * (1.0 + gamma);
      const double extra =
          std::sqrt(sigma_hat * sigma_hat - sigma * sigma);
      for (auto& v : x.data)
        v += cx(static_cast<float>(extra * rng.normal()),
                static_cast<float>(extra * rng.normal()));
      sigma = sigma_hat;
    }
    if (guide) {
      const CTensor x_before = x;
      guide(i, sigma, x_before, x);
    } else {
      const CTensor x0 = den.denoise(x, sigma);
      const double f = (sigma_next - sigma) / sigma;
      for (std::size_t k = 0; k < x.size(); ++k)
        x.data[k] += static_cast<float>(f) * (x.data[k] - x0.data[k]);
    }
    for (const auto& v : x.data)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw NumericError("sampler: non-finite state at step " +
                           std::to_string(i));
  }
  return x;
}

}  // namespace

CTensor sample_uncond(const Denoiser& den, const NoiseSchedule& schedule,
                      std::size_t h, std::size_t w, std::uint64_t seed,
                      bool stochastic, double churn) {
  return euler_walk(den, schedule, h, w, seed, stochastic, churn, {});
}

CTensor dps_reconstruct(const Denoiser& den, const CTensor& y,
                        const mri::ForwardModel& fm, const DpsConfig& cfg,
                        std::uint64_t seed) {
  if (cfg.gamma0 < 0.0)
    throw ConfigError("dps_reconstruct: gamma0 must be >= 0");
  const std::size_t h = fm.height(), w = fm.width();
  if (cfg.gamma0 == 0.0)
    return sample_uncond(den, cfg.schedule, h, w, seed, cfg.stochastic,
                         cfg.churn);
  auto guide = [&](int step, double sigma, const CTensor& x_before,
                   CTensor& x) {
    auto [x0, vjp] = den.denoise_with_vjp(x_before, sigma);
    const double sigma_next = cfg.schedule.sigmas[step + 1];
    const double f = (sigma_next - sigma) / sigma;
    for (std::size_t k = 0; k < x.size(); ++k)
      x.data[k] += static_cast<float>(f) * (x.data[k] - x0.data[k]);
    // Likelihood term: grad ||y - A x0||^2 = -2 A^H (y - A x0), pulled
    // through the denoiser; step normalized by the residual norm.
    CTensor ax0 = mri::apply_A(fm, x0);
    CTensor r = y;
    for (std::size_t k = 0; k < r.size(); ++k) r.data[k] -= ax0.data[k];
    const double rn = norm2(r);
    if (rn == 0.0) return;
    CTensor cot = mri::apply_Ah(fm, r);
    for (auto& v : cot.data) v *= -2.0f;
    CTensor grad = vjp(cot);
    const double scale = cfg.gamma0 / rn;
    for (std::size_t k = 0; k < x.size(); ++k)
      x.data[k] -= static_cast<float>(scale) * grad.data[k];
  };
  return euler_walk(den, cfg.schedule, h, w, seed, cfg.stochastic, cfg.churn,
                    guide);
}

CTensor posterior_average(const std::vector<CTensor>& samples) {
  if (samples.empty())
    throw ContractError("posterior_average: no samples");
  CTensor avg = samples[0];
  for (std::size_t s = 1; s < samples.size(); ++s) {
    if (!samples[s].same_shape(avg))
      throw ShapeError("posterior_average: shape mismatch");
    for (std::size_t i = 0; i < avg.size(); ++i)
      avg.data[i] += samples[s].data[i];
  }
  const float inv = 1.0f / static_cast<float>(samples.size());
  for (auto& v : avg.data) v *= inv;
  return avg;
}

}  // namespace deskmri::diffusion
