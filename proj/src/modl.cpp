#include "deskmri/modl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "deskmri/gsure.hpp"
#include "deskmri/rng.hpp"

namespace deskmri::modl {

CTensor cg_solve(const NormalOp& op, const CTensor& rhs, int iters,
                 double tol) {
  const std::size_t n = rhs.size();
  std::vector<std::complex<float>> rhs_v(rhs.data.begin(), rhs.data.end());
  auto op_v = [&](const std::complex<float>* in, std::complex<float>* out) {
    CTensor t(rhs.shape);
    std::copy(in, in + n, t.data.begin());
    CTensor r = op(t);
    if (!r.same_shape(rhs)) throw ShapeError("cg_solve: operator shape drift");
    std::copy(r.data.begin(), r.data.end(), out);
  };
  auto res = cg_solve_cplx<float>(op_v, rhs_v.data(), n, iters, tol);
  if (!res.converged)
    throw NumericError("cg_solve: residual " +
                       std::to_string(res.rel_residual) + " after " +
                       std::to_string(res.iters) + " iterations (tol " +
                       std::to_string(tol) + ")");
  CTensor x(rhs.shape);
  std::copy(res.x.begin(), res.x.end(), x.data.begin());
  return x;
}

namespace {

int forward_on_tape(nn::Tape<float>& tape, const ModlCheckpoint& ckpt,
                    const std::vector<int>& params, int log_lambda,
                    const mri::ForwardModelT<float>& fmt, const CTensor& y) {
  int y_var = tape.constant(nn::planes_from_ctensor<float>(y));
  return modl_forward_tape(tape, ckpt.net, params, log_lambda, fmt, y_var,
                           ckpt.cfg.unrolls, ckpt.cfg.cg_iters);
}

}  // namespace

CTensor modl_forward(const ModlCheckpoint& ckpt, const CTensor& y,
                     const mri::ForwardModel& fm) {
  nn::Tape<float> tape;
  auto params = ckpt.net.bind(tape, false);
  int ll = tape.scalar_const(ckpt.log_lambda);
  auto fmt = mri::to_precision<float>(fm);
  int x = forward_on_tape(tape, ckpt, params, ll, fmt, y);
  return nn::ctensor_from_planes(tape.val(x));
}

double modl_loss(const ModlCheckpoint& ckpt, const CTensor& y,
                 const mri::ForwardModel& fm, const CTensor& target) {
  nn::Tape<float> tape;
  auto params = ckpt.net.bind(tape, false);
  int ll = tape.scalar_const(ckpt.log_lambda);
  auto fmt = mri::to_precision<float>(fm);
  int x = forward_on_tape(tape, ckpt, params, ll, fmt, y);
  return tape.scalar_val(
      nrmse_tape(tape, x, nn::planes_from_ctensor<float>(target)));
}

ModlCheckpoint train_modl(const datagen::DatasetManifest& manifest,
                          TargetMode mode, const ModlConfig& cfg,
                          const nn::Network<float>* denoiser) {
  if (manifest.samples.empty())
    throw ContractError("train_modl: empty manifest");
  if (mode == TargetMode::gsure_denoised && denoiser == nullptr)
    throw ContractError(
        "train_modl: gsure_denoised mode requires the stage-1 denoiser");

  struct Sample {
    CTensor y;
    mri::ForwardModel fm;
    nn::RTensor<float> target;
  };
  std::vector<Sample> samples;
  samples.reserve(manifest.samples.size());
  std::uint64_t index = 0;
  for (const auto& rec : manifest.samples) {
    Sample s;
    CTensor full = load_tensor(rec.kspace_path);
    s.fm.maps = load_tensor(rec.maps_path);
    s.fm.noise_sigma_sq = rec.sigma_sq;
    s.fm.mask = mri::make_mask(s.fm.width(), cfg.accel, cfg.acs_width,
                               cfg.mask_seed + index);
    s.y = mri::apply_mask(s.fm.mask, full);

    CTensor target;
    switch (mode) {
      case TargetMode::clean: {
        if (rec.clean_path == "-")
          throw ContractError("train_modl: sample " + rec.id +
                              " has no clean reference");
        target = load_tensor(rec.clean_path);
        break;
      }
      case TargetMode::noisy_native: {
        mri::ForwardModel full_fm;
        full_fm.maps = s.fm.maps;
        full_fm.mask = mri::make_mask(s.fm.width(), 1, 0, 0);
        target = mri::apply_Ah(full_fm, full);
        break;
      }
      case TargetMode::gsure_denoised: {
        mri::ForwardModel full_fm;
        full_fm.maps = s.fm.maps;
        full_fm.mask = mri::make_mask(s.fm.width(), 1, 0, 0);
        full_fm.noise_sigma_sq = rec.sigma_sq;
        target = gsure::denoise(*denoiser, full, full_fm);
        break;
      }
    }
    s.target = nn::planes_from_ctensor<float>(target);
    samples.push_back(std::move(s));
    ++index;
  }

  nn::NetConfig net_cfg = cfg.net;
  net_cfg.seed = cfg.seed;
  ModlCheckpoint ckpt{nn::Network<float>::initialized(net_cfg),
                      static_cast<float>(std::log(cfg.lambda_init)), cfg, {}};
  ckpt.cfg.net = net_cfg;
  if (!(cfg.lambda_init > 0.0))
    throw ConfigError("train_modl: lambda_init must be positive");

  const std::size_t n_theta = ckpt.net.theta.size();
  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  nn::AdamState<float> state(n_theta + 1);

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(cfg.seed + 1);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + shuffle_rng.below(order.size() - i)]);
    double epoch_loss = 0.0;
    for (std::size_t pick : order) {
      const auto& s = samples[pick];
      nn::Tape<float> tape;
      auto params = ckpt.net.bind(tape, true);
      int ll = tape.leaf(nn::RTensor<float>::scalar(ckpt.log_lambda), true);
      auto fmt = mri::to_precision<float>(s.fm);
      int y_var = tape.constant(nn::planes_from_ctensor<float>(s.y));
      int x = modl_forward_tape(tape, ckpt.net, params, ll, fmt, y_var,
                                cfg.unrolls, cfg.cg_iters);
      int loss = nrmse_tape(tape, x, s.target);
      const double loss_val = tape.scalar_val(loss);
      if (!std::isfinite(loss_val))
        throw TrainingError("train_modl: non-finite loss at epoch " +
                            std::to_string(epoch));
      epoch_loss += loss_val;
      tape.backward(loss);
      auto grad = ckpt.net.grad_flat(tape, params);
      grad.push_back(tape.grad(ll).size() ? tape.grad(ll).data[0] : 0.0f);
      std::vector<float> theta = ckpt.net.theta;
      theta.push_back(ckpt.log_lambda);
      adam_step(state, theta, grad, adam, [&](std::size_t k) {
        return k == n_theta ? std::string("log_lambda")
                            : ckpt.net.block_of_index(k);
      });
      ckpt.log_lambda = theta.back();
      theta.pop_back();
      ckpt.net.theta = std::move(theta);
    }
    ckpt.epoch_nrmse.push_back(epoch_loss /
                               static_cast<double>(samples.size()));
  }
  return ckpt;
}

void save_modl(const std::string& path, const ModlCheckpoint& ckpt) {
  nn::CheckpointExtras ex;
  ex.steps = static_cast<long>(ckpt.epoch_nrmse.size());
  ex.scalars["log_lambda"] = ckpt.log_lambda;
  ex.scalars["unrolls"] = ckpt.cfg.unrolls;
  ex.scalars["cg_iters"] = ckpt.cfg.cg_iters;
  ex.scalars["accel"] = ckpt.cfg.accel;
  ex.scalars["acs_width"] = ckpt.cfg.acs_width;
  ex.scalars["mask_seed"] = static_cast<double>(ckpt.cfg.mask_seed);
  ex.scalars["lr"] = ckpt.cfg.lr;
  ex.scalars["train_seed"] = static_cast<double>(ckpt.cfg.seed);
  nn::save_checkpoint(path, ckpt.net, ex);
  std::ofstream trace(path + ".trace.csv");
  trace << "epoch,mean_nrmse\n";
  char buf[64];
  for (std::size_t i = 0; i < ckpt.epoch_nrmse.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9e\n", i, ckpt.epoch_nrmse[i]);
    trace << buf;
  }
}

ModlCheckpoint load_modl(const std::string& path) {
  ModlCheckpoint ckpt;
  nn::CheckpointExtras ex;
  ckpt.net = nn::load_checkpoint(path, &ex);
  ckpt.cfg.net = ckpt.net.cfg;
  auto get = [&](const char* k, double d) {
    auto it = ex.scalars.find(k);
    return it == ex.scalars.end() ? d : it->second;
  };
  ckpt.log_lambda = static_cast<float>(get("log_lambda", 0.0));
  ckpt.cfg.unrolls = static_cast<int>(get("unrolls", 6));
  ckpt.cfg.cg_iters = static_cast<int>(get("cg_iters", 8));
  ckpt.cfg.accel = static_cast<int>(get("accel", 4));
  ckpt.cfg.acs_width = static_cast<int>(get("acs_width", 8));
  ckpt.cfg.mask_seed = static_cast<std::uint64_t>(get("mask_seed", 9000));
  ckpt.cfg.lr = get("lr", 3e-4);
  ckpt.cfg.seed = static_cast<std::uint64_t>(get("train_seed", 0));
  ckpt.cfg.epochs = static_cast<int>(ex.steps);
  std::ifstream trace(path + ".trace.csv");
  if (trace) {
    std::string line;
    std::getline(trace, line);
    while (std::getline(trace, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos)
        ckpt.epoch_nrmse.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  return ckpt;
}

}  // namespace deskmri::modl
