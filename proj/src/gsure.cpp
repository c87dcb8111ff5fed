#include "deskmri/gsure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "deskmri/rng.hpp"

namespace deskmri::gsure {

namespace {

nn::RTensor<float> normal_probe(const std::vector<std::size_t>& shape,
                                Rng& rng) {
  nn::RTensor<float> b(shape);
  for (auto& v : b.data) v = static_cast<float>(rng.normal());
  return b;
}

double real_dot(const nn::RTensor<float>& a, const nn::RTensor<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  return acc;
}

CTensor add_scaled(const CTensor& u, const nn::RTensor<float>& b,
                   double factor) {
  CTensor out = u;
  const std::size_t n = u.size();
  for (std::size_t i = 0; i < n; ++i)
    out.data[i] += cx(static_cast<float>(factor * b.data[i]),
                      static_cast<float>(factor * b.data[n + i]));
  return out;
}

}  // namespace

GsureBatch make_batch(const CTensor& kspace, const mri::ForwardModel& fm,
                      const std::string& id) {
  if (!(fm.noise_sigma_sq > 0.0))
    throw DomainError("make_batch: sigma^2 must be positive");
  GsureBatch b;
  b.id = id;
  b.sigma_sq = fm.noise_sigma_sq;
  b.adjoint = mri::apply_Ah(fm, kspace);
  b.pinv = mri::apply_pinv(fm, kspace, 8, 1e-6);
  b.u = b.adjoint;
  const float inv = static_cast<float>(1.0 / fm.noise_sigma_sq);
  for (auto& v : b.u.data) v *= inv;
  return b;
}

double mc_divergence(const DenoiseFn& fn, const CTensor& u, double epsilon,
                     std::uint64_t seed, int probes) {
  if (!(epsilon > 0.0)) throw DomainError("mc_divergence: epsilon must be > 0");
  if (probes < 1) throw DomainError("mc_divergence: need at least one probe");
  Rng rng(seed);
  const CTensor g0 = fn(u);
  auto g0r = nn::planes_from_ctensor<float>(g0);
  double acc = 0.0;
  for (int p = 0; p < probes; ++p) {
    auto b = normal_probe({2, u.shape[0], u.shape[1]}, rng);
    CTensor up = add_scaled(u, b, epsilon);
    auto gpr = nn::planes_from_ctensor<float>(fn(up));
    acc += (real_dot(b, gpr) - real_dot(b, g0r)) / epsilon;
  }
  const double div = acc / probes;
  if (!std::isfinite(div))
    throw NumericError("mc_divergence: non-finite estimate");
  return div;
}

/* The divergence term is the complex (Wirtinger real-part) divergence of g
 * with respect to the scaled input u, which is half the divergence over the
 * real representation. With complex noise of total variance sigma^2 (so
 * sigma^2/2 per real component) this is exactly the term whose expectation
 * cancels the noise part of Re<g, A^dagger y>. With the adjoint probe base
 * the raw estimate is the real-representation divergence w.r.t. A^H y and
 * picks up the matching sigma^2/2 factor. */
double gsure_loss_value(const DenoiseFn& fn, const GsureBatch& batch,
                        double epsilon, std::uint64_t seed,
                        DivergenceBase base, int probes) {
  if (!(batch.sigma_sq > 0.0))
    throw DomainError("gsure_loss: sigma^2 must be positive");
  if (!(epsilon > 0.0)) throw DomainError("gsure_loss: epsilon must be > 0");
  Rng rng(seed);
  const CTensor g = fn(batch.u);
  if (!g.same_shape(batch.pinv))
    throw ShapeError("gsure_loss: denoiser output shape mismatch");
  auto gr = nn::planes_from_ctensor<float>(g);
  auto pr = nn::planes_from_ctensor<float>(batch.pinv);
  const double norm_term = real_dot(gr, gr);
  const double cross = real_dot(gr, pr);
  const bool adjoint_base = base == DivergenceBase::adjoint;
  const double input_step =
      adjoint_base ? epsilon / batch.sigma_sq : epsilon;
  const double div_scale = adjoint_base ? batch.sigma_sq / 2.0 : 0.5;
  double div = 0.0;
  for (int p = 0; p < probes; ++p) {
    auto b = normal_probe({2, batch.u.shape[0], batch.u.shape[1]}, rng);
    CTensor up = add_scaled(batch.u, b, input_step);
    auto gpr = nn::planes_from_ctensor<float>(fn(up));
    div += (real_dot(b, gpr) - real_dot(b, gr)) / epsilon;
  }
  div = div_scale * div / probes;
  const double loss = norm_term + 2.0 * (div - cross);
  if (!std::isfinite(loss)) throw NumericError("gsure_loss: non-finite value");
  return loss;
}

double supervised_loss_value(const DenoiseFn& fn, const GsureBatch& batch,
                             const CTensor& clean) {
  if (clean.size() == 0)
    throw ContractError("supervised_loss: clean reference required");
  const CTensor g = fn(batch.u);
  if (!g.same_shape(clean))
    throw ShapeError("supervised_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    acc += std::norm(std::complex<double>(g.data[i]) -
                     std::complex<double>(clean.data[i]));
  return 0.5 * acc;
}

int gsure_loss_tape(nn::Tape<float>& tape, const nn::Network<float>& net,
                    const std::vector<int>& params, const GsureBatch& batch,
                    double epsilon, const nn::RTensor<float>& probe,
                    DivergenceBase base) {
  const bool adjoint_base = base == DivergenceBase::adjoint;
  const double input_step =
      adjoint_base ? epsilon / batch.sigma_sq : epsilon;
  const double div_scale = adjoint_base ? batch.sigma_sq / 2.0 : 0.5;
  auto u = nn::planes_from_ctensor<float>(batch.u);
  nn::RTensor<float> up = u;
  for (std::size_t i = 0; i < up.size(); ++i)
    up.data[i] += static_cast<float>(input_step) * probe.data[i];
  int u_var = tape.constant(std::move(u));
  int up_var = tape.constant(std::move(up));
  int b_var = tape.constant(probe);
  int pinv_var = tape.constant(nn::planes_from_ctensor<float>(batch.pinv));
  int g = net.forward(tape, u_var, params);
  int gp = net.forward(tape, up_var, params);
  int div = tape.scale(tape.sub(tape.dot(b_var, gp), tape.dot(b_var, g)),
                       static_cast<float>(div_scale / epsilon));
  int loss = tape.add(tape.dot(g, g),
                      tape.scale(tape.sub(div, tape.dot(g, pinv_var)), 2.0f));
  return loss;
}

DenoiserCheckpoint train_denoiser(const datagen::DatasetManifest& manifest,
                                  const DenoiserTrainConfig& cfg) {
  if (manifest.samples.empty())
    throw ContractError("train_denoiser: empty manifest");
  if (cfg.iters < 1 || cfg.batch < 1)
    throw ConfigError("train_denoiser: iters and batch must be >= 1");

  // Preload every sample; stage-1 data are fully sampled.
  std::vector<GsureBatch> batches;
  batches.reserve(manifest.samples.size());
  for (const auto& s : manifest.samples) {
    mri::ForwardModel fm;
    fm.maps = load_tensor(s.maps_path);
    fm.mask = mri::make_mask(fm.maps.shape[2], 1, 0, 0);
    fm.noise_sigma_sq = s.sigma_sq;
    batches.push_back(make_batch(load_tensor(s.kspace_path), fm, s.id));
  }

  nn::NetConfig net_cfg = cfg.net;
  net_cfg.input_gain = batches.front().sigma_sq;
  net_cfg.seed = cfg.seed;
  DenoiserCheckpoint ckpt{nn::Network<float>::initialized(net_cfg), cfg, {}};
  ckpt.cfg.net = net_cfg;

  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  nn::AdamState<float> state(ckpt.net.theta.size());

  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(cfg.seed + 1);
  for (std::size_t i = 0; i + 1 < order.size(); ++i)
    std::swap(order[i], order[i + shuffle_rng.below(order.size() - i)]);

  for (int iter = 0; iter < cfg.iters; ++iter) {
    nn::Tape<float> tape;
    auto params = ckpt.net.bind(tape, true);
    int loss = -1;
    for (int j = 0; j < cfg.batch; ++j) {
      const std::size_t pick =
          order[(static_cast<std::size_t>(iter) * cfg.batch + j) %
                order.size()];
      const std::uint64_t probe_seed =
          cfg.seed + 1000003ULL * (static_cast<std::uint64_t>(iter) *
                                       static_cast<std::uint64_t>(cfg.batch) +
                                   static_cast<std::uint64_t>(j) + 1);
      Rng prng(probe_seed);
      nn::RTensor<float> probe({2, batches[pick].u.shape[0],
                                batches[pick].u.shape[1]});
      for (auto& v : probe.data) v = static_cast<float>(prng.normal());
      int item = gsure_loss_tape(tape, ckpt.net, params, batches[pick],
                                 cfg.epsilon, probe, cfg.base);
      loss = loss < 0 ? item : tape.add(loss, item);
    }
    loss = tape.scale(loss, 1.0f / static_cast<float>(cfg.batch));
    const double loss_val = tape.scalar_val(loss);
    if (!std::isfinite(loss_val))
      throw TrainingError("train_denoiser: non-finite loss at iteration " +
                          std::to_string(iter));
    ckpt.loss_trace.push_back(loss_val);
    tape.backward(loss);
    auto grad = ckpt.net.grad_flat(tape, params);
    adam_step(state, ckpt.net.theta, grad, adam, [&](std::size_t i) {
      return ckpt.net.block_of_index(i);
    });
  }
  return ckpt;
}

void save_denoiser(const std::string& path, const DenoiserCheckpoint& ckpt) {
  nn::CheckpointExtras ex;
  ex.steps = static_cast<long>(ckpt.loss_trace.size());
  ex.scalars["epsilon"] = ckpt.cfg.epsilon;
  ex.scalars["lr"] = ckpt.cfg.lr;
  ex.scalars["train_seed"] = static_cast<double>(ckpt.cfg.seed);
  ex.scalars["div_base"] =
      ckpt.cfg.base == DivergenceBase::adjoint ? 0.0 : 1.0;
  nn::save_checkpoint(path, ckpt.net, ex);
  std::ofstream trace(path + ".trace.csv");
  trace << "iter,gsure_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < ckpt.loss_trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9e\n", i, ckpt.loss_trace[i]);
    trace << buf;
  }
}

DenoiserCheckpoint load_denoiser(const std::string& path) {
  DenoiserCheckpoint ckpt;
  nn::CheckpointExtras ex;
  ckpt.net = nn::load_checkpoint(path, &ex);
  ckpt.cfg.net = ckpt.net.cfg;
  ckpt.cfg.iters = static_cast<int>(ex.steps);
  if (ex.scalars.count("epsilon")) ckpt.cfg.epsilon = ex.scalars["epsilon"];
  if (ex.scalars.count("lr")) ckpt.cfg.lr = ex.scalars["lr"];
  if (ex.scalars.count("train_seed"))
    ckpt.cfg.seed = static_cast<std::uint64_t>(ex.scalars["train_seed"]);
  if (ex.scalars.count("div_base"))
    ckpt.cfg.base = ex.scalars["div_base"] == 0.0 ? DivergenceBase::adjoint
                                                  : DivergenceBase::input;
  std::ifstream trace(path + ".trace.csv");
  if (trace) {
    std::string line;
    std::getline(trace, line);  // header
    while (std::getline(trace, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos)
        ckpt.loss_trace.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  return ckpt;
}

CTensor denoise(const nn::Network<float>& net, const CTensor& kspace,
                const mri::ForwardModel& fm) {
  if (!(fm.noise_sigma_sq > 0.0))
    throw ContractError("denoise: forward model has no noise level");
  CTensor adjoint = mri::apply_Ah(fm, kspace);
  const float inv = static_cast<float>(1.0 / fm.noise_sigma_sq);
  for (auto& v : adjoint.data) v *= inv;
  auto out = net.infer(nn::planes_from_ctensor<float>(adjoint));
  return nn::ctensor_from_planes(out);
}

}  // namespace deskmri::gsure
