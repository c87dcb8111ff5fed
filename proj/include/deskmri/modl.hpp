#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deskmri/cg.hpp"
#include "deskmri/datagen.hpp"
#include "deskmri/mri.hpp"
#include "deskmri/network.hpp"

namespace deskmri::modl {

using NormalOp = std::function<CTensor(const CTensor&)>;

/* CG on a Hermitian positive (semi)definite operator over complex images.
 * Residual tol is relative to ||rhs||; exceeding max iterations without
 * reaching it is a numeric error carrying the final residual. */
CTensor cg_solve(const NormalOp& op, const CTensor& rhs, int iters,
                 double tol);

struct ModlConfig {
  int unrolls = 6;
  int cg_iters = 8;        // fixed count, unrolled on the autodiff tape
  double lambda_init = 0.05;
  int epochs = 10;
  double lr = 3e-4;
  int accel = 4;
  int acs_width = 8;
  std::uint64_t mask_seed = 9000;  // per-sample mask = mask_seed + index
  std::uint64_t seed = 0;
  nn::NetConfig net;
};

struct ModlCheckpoint {
  nn::Network<float> net;
  float log_lambda = 0.0f;
  ModlConfig cfg;
  std::vector<double> epoch_nrmse;
};

/* Unrolled reconstruction graph:
 *   x_0 = A^H y;  repeat: z = D_theta(x);  x = cg(A^H A + l I, A^H y + l z)
 * Built on a tape so end-to-end gradients flow through the CG iterations.
 * The CG loop stops early only on an exactly zero rhs or a vanishing
 * curvature value. */
template <class T>
int modl_forward_tape(nn::Tape<T>& tape, const nn::Network<T>& net,
                      const std::vector<int>& params, int log_lambda,
                      const mri::ForwardModelT<T>& fm, int y_var, int unrolls,
                      int cg_iters) {
  auto apply_a = [&fm](const nn::RTensor<T>& v) { return fm.apply_A(v); };
  auto apply_ah = [&fm](const nn::RTensor<T>& v) { return fm.apply_Ah(v); };
  int ahy = tape.linear_custom(y_var, apply_ah, apply_a);
  int lambda = tape.exp_op(log_lambda);
  auto normal_op = [&](int v) {
    int av = tape.linear_custom(v, apply_a, apply_ah);
    int ahav = tape.linear_custom(av, apply_ah, apply_a);
    return tape.add(ahav, tape.mul_scalar(v, lambda));
  };
  auto cg = [&](int rhs) {
    nn::RTensor<T> zero(tape.val(rhs).shape);
    int x = tape.constant(std::move(zero));
    double rhs_norm = 0.0;
    for (T v : tape.val(rhs).data)
      rhs_norm += static_cast<double>(v) * static_cast<double>(v);
    if (rhs_norm == 0.0) return x;
    int r = rhs;
    int p = rhs;
    int rs = tape.dot(r, r);
    for (int it = 0; it < cg_iters; ++it) {
      if (!(tape.scalar_val(rs) > 0)) break;  // converged exactly
      int q = normal_op(p);
      int pq = tape.dot(p, q);
      if (!(tape.scalar_val(pq) > 0)) break;
      int alpha = tape.div(rs, pq);
      x = tape.add(x, tape.mul_scalar(p, alpha));
      r = tape.sub(r, tape.mul_scalar(q, alpha));
      int rs_new = tape.dot(r, r);
      int beta = tape.div(rs_new, rs);
      p = tape.add(r, tape.mul_scalar(p, beta));
      rs = rs_new;
    }
    return x;
  };
  int x = ahy;
  for (int u = 0; u < unrolls; ++u) {
    int z = net.forward(tape, x, params);
    int rhs = tape.add(ahy, tape.mul_scalar(z, lambda));
    x = cg(rhs);
  }
  return x;
}

// NRMSE loss node: ||target - x|| / ||target||.
template <class T>
int nrmse_tape(nn::Tape<T>& tape, int x, const nn::RTensor<T>& target) {
  double tn = 0.0;
  for (T v : target.data) tn += static_cast<double>(v) * static_cast<double>(v);
  if (tn == 0.0)
    throw DegenerateInputError("modl_loss: zero-norm target");
  int d = tape.sub(tape.constant(target), x);
  return tape.div(tape.sqrt_op(tape.dot(d, d)),
                  tape.scalar_const(static_cast<T>(std::sqrt(tn))));
}

// Plain (no-gradient) forward pass with the checkpoint's unroll settings.
CTensor modl_forward(const ModlCheckpoint& ckpt, const CTensor& y,
                     const mri::ForwardModel& fm);

double modl_loss(const ModlCheckpoint& ckpt, const CTensor& y,
                 const mri::ForwardModel& fm, const CTensor& target);

enum class TargetMode { clean, gsure_denoised, noisy_native };

/* End-to-end training: per sample, undersample the stored k-space with the
 * per-sample mask, reconstruct, and minimize NRMSE against the chosen
 * target. theta and log(lambda) update jointly. gsure_denoised mode needs
 * the stage-1 denoiser network. */
ModlCheckpoint train_modl(const datagen::DatasetManifest& manifest,
                          TargetMode mode, const ModlConfig& cfg,
                          const nn::Network<float>* denoiser = nullptr);

void save_modl(const std::string& path, const ModlCheckpoint& ckpt);
ModlCheckpoint load_modl(const std::string& path);

}  // namespace deskmri::modl
