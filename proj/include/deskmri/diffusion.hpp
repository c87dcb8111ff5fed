#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "deskmri/mri.hpp"
#include "deskmri/network.hpp"
#include "deskmri/tensor.hpp"

namespace deskmri::diffusion {

/* Decreasing noise levels sigma_0 = sigma_max .. sigma_{N-1} = sigma_min with
 * a trailing exact zero, linear or power-rule (rho = 7) spacing. */
struct NoiseSchedule {
  enum class Spacing { linear, edm_power };
  double sigma_min = 0.004;
  double sigma_max = 10.0;
  int steps = 500;
  Spacing spacing = Spacing::linear;
  std::vector<double> sigmas;  // steps + 1 entries, sigmas[steps] == 0

  static NoiseSchedule make(double sigma_min, double sigma_max, int steps,
                            Spacing spacing);
};

struct Preconditioner {
  double c_skip, c_out, c_in, c_noise;
};

// c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
// c_in = 1/sqrt(s^2+sd^2), c_noise = ln(s)/4.
Preconditioner edm_precond(double sigma, double sigma_data);

// Loss weight (s^2 + sd^2) / (s * sd)^2; satisfies weight * c_out^2 == 1.
double edm_loss_weight(double sigma, double sigma_data);

/* A denoiser is the estimate of the clean image given a noisy image and its
 * noise level, with a vector-Jacobian product for likelihood gradients. The
 * returned closure applies J^T to a cotangent in the real representation. */
struct Denoiser {
  virtual ~Denoiser() = default;
  virtual CTensor denoise(const CTensor& x, double sigma) const = 0;
  virtual std::pair<CTensor, std::function<CTensor(const CTensor&)>>
  denoise_with_vjp(const CTensor& x, double sigma) const = 0;
};

/* EDM-preconditioned network denoiser. The network takes the two image
 * channels scaled by c_in plus one conditioning channel filled with c_noise;
 * D(x, s) = c_skip * x + c_out * net(...). At sigma == 0 the preconditioner
 * collapses to the identity and the network is not evaluated. */
class NetDenoiser : public Denoiser {
 public:
  NetDenoiser(nn::Network<float> net, double sigma_data);
  CTensor denoise(const CTensor& x, double sigma) const override;
  std::pair<CTensor, std::function<CTensor(const CTensor&)>> denoise_with_vjp(
      const CTensor& x, double sigma) const override;
  const nn::Network<float>& net() const { return net_; }
  double sigma_data() const { return sigma_data_; }

 private:
  nn::Network<float> net_;
  double sigma_data_;
};

CTensor edm_denoise(const nn::Network<float>& net, const CTensor& x_noisy,
                    double sigma, double sigma_data);

struct EdmConfig {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  enum class SigmaLaw { log_uniform, log_normal } law = SigmaLaw::log_uniform;
  double p_mean = -1.2, p_std = 1.2;  // log_normal parameters
  int iters = 3000;
  int batch = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  nn::NetConfig net;  // in_ch must be 3 (two image planes + noise channel)

  EdmConfig() { net.in_ch = 3; }
};

// Single-draw loss weight(s) * ||D(x0 + n, s) - x0||^2 for a fixed draw;
// exposed for tests and reused by training.
double edm_loss_given(const nn::Network<float>& net, double sigma_data,
                      const CTensor& x0, double sigma, const CTensor& noise);

// Draws sigma from the configured law and n ~ N(0, s^2) iid per real
// component, then evaluates edm_loss_given.
double edm_loss(const nn::Network<float>& net, const EdmConfig& cfg,
                const CTensor& x0, std::uint64_t seed);

struct EdmCheckpoint {
  nn::Network<float> net;
  EdmConfig cfg;
  std::vector<double> loss_trace;
};

EdmCheckpoint train_edm(const std::vector<CTensor>& images,
                        const EdmConfig& cfg);
void save_edm(const std::string& path, const EdmCheckpoint& ckpt);
EdmCheckpoint load_edm(const std::string& path);

struct DpsConfig {
  NoiseSchedule schedule = NoiseSchedule::make(
      0.004, 10.0, 500, NoiseSchedule::Spacing::linear);
  double gamma0 = 1.0;      // guidance strength; step is gamma0 / ||y - A x0||
  bool stochastic = false;  // Euler ODE by default; churn when set
  double churn = 10.0;      // S_churn-style amount used when stochastic
  int posterior_samples = 5;
};

/* Euler sampler: x_{i+1} = x_i + (s_{i+1} - s_i) (x_i - D(x_i, s_i)) / s_i
 * from x_0 ~ N(0, s_max^2) iid per real component. */
CTensor sample_uncond(const Denoiser& den, const NoiseSchedule& schedule,
                      std::size_t h, std::size_t w, std::uint64_t seed,
                      bool stochastic = false, double churn = 10.0);

/* Same Euler walk plus the likelihood correction
 * x_{i+1} -= (gamma0 / ||y - A x0||) * grad_{x_i} ||y - A x0||^2 with
 * x0 = D(x_i, s_i) and the gradient pulled through the denoiser. With
 * gamma0 == 0 this is bit-identical to sample_uncond at the same seed. */
CTensor dps_reconstruct(const Denoiser& den, const CTensor& y,
                        const mri::ForwardModel& fm, const DpsConfig& cfg,
                        std::uint64_t seed);

CTensor posterior_average(const std::vector<CTensor>& samples);

}  // namespace deskmri::diffusion
