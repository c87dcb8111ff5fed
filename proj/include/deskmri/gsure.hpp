#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deskmri/datagen.hpp"
#include "deskmri/mri.hpp"
#include "deskmri/network.hpp"
#include "deskmri/tensor.hpp"

namespace deskmri::gsure {

/* One self-supervised training example: the scaled adjoint u = A^H y / s^2
 * that the denoiser consumes, the raw adjoint, and the pseudo-inverse image.
 * For fully sampled SOS-normalized data the pseudo-inverse equals the
 * adjoint. */
struct GsureBatch {
  CTensor u;
  CTensor adjoint;
  CTensor pinv;
  double sigma_sq = 0.0;
  std::string id;
};

GsureBatch make_batch(const CTensor& kspace, const mri::ForwardModel& fm,
                      const std::string& id);

/* The divergence probe can perturb either the adjoint (the loss's
 * differentiation variable; the network input then moves by eps*b/s^2) or
 * the network input directly. The two differ by a 1/s^2 factor. */
enum class DivergenceBase { adjoint, input };

using DenoiseFn = std::function<CTensor(const CTensor&)>;

/* Monte-Carlo divergence of fn at u: b^T (fn(u + eps b) - fn(u)) / eps with
 * b iid standard normal over the real representation, averaged over
 * `probes` draws from Rng(seed). */
double mc_divergence(const DenoiseFn& fn, const CTensor& u, double epsilon,
                     std::uint64_t seed, int probes = 1);

/* ||g(u)||^2 + 2 (div - Re<g(u), pinv>), with the divergence taken w.r.t.
 * the variable selected by `base`. */
double gsure_loss_value(const DenoiseFn& fn, const GsureBatch& batch,
                        double epsilon, std::uint64_t seed,
                        DivergenceBase base = DivergenceBase::adjoint,
                        int probes = 1);

// Oracle-only path: 0.5 || g(u) - clean ||^2.
double supervised_loss_value(const DenoiseFn& fn, const GsureBatch& batch,
                             const CTensor& clean);

struct DenoiserTrainConfig {
  nn::NetConfig net;  // input_gain is set to sigma^2 at training time
  int iters = 200;
  int batch = 4;
  double lr = 1e-3;
  double epsilon = 1e-3;  // divergence probe step
  DivergenceBase base = DivergenceBase::adjoint;
  std::uint64_t seed = 0;
};

struct DenoiserCheckpoint {
  nn::Network<float> net;
  DenoiserTrainConfig cfg;
  std::vector<double> loss_trace;  // one entry per iteration
};

/* Adam on the single-probe GSURE loss over minibatches drawn round-robin
 * from a seeded permutation of the manifest. Deterministic per seed. */
DenoiserCheckpoint train_denoiser(const datagen::DatasetManifest& manifest,
                                  const DenoiserTrainConfig& cfg);

void save_denoiser(const std::string& path, const DenoiserCheckpoint& ckpt);
DenoiserCheckpoint load_denoiser(const std::string& path);

// MMSE estimate g(A^H y / s^2) as a coil-combined complex image.
CTensor denoise(const nn::Network<float>& net, const CTensor& kspace,
                const mri::ForwardModel& fm);

// Tape builder used by training; exposed for tests. `b` is the probe over
// the real representation of the adjoint.
int gsure_loss_tape(nn::Tape<float>& tape, const nn::Network<float>& net,
                    const std::vector<int>& params, const GsureBatch& batch,
                    double epsilon, const nn::RTensor<float>& probe,
                    DivergenceBase base);

}  // namespace deskmri::gsure
