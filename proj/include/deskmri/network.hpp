#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "deskmri/nn.hpp"
#include "deskmri/rng.hpp"

namespace deskmri::nn {

/* Small U-shaped convolutional network. Per level: two same-padded convs with
 * SiLU; levels are joined by 2x average-pool down and nearest-neighbour up
 * with channel-concat skips; a final 1x1 conv maps to out_ch. input_gain is a
 * fixed (non-learnable) multiplier applied to the input, part of the
 * architecture and stored in checkpoints. */
struct NetConfig {
  int in_ch = 2;
  int out_ch = 2;
  std::vector<int> level_channels = {12, 24, 48};
  int kernel = 3;
  double input_gain = 1.0;
  std::uint64_t seed = 0;
};

void validate(const NetConfig& cfg);  // throws ConfigError

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;
  std::size_t size() const { return RTensor<float>::numel(shape); }
};

// Blocks in order: enc0..enc{L-1} (conv0.w/b, conv1.w/b each), then
// dec{L-2}..dec0, then head.w/head.b.
std::vector<ParamBlock> parameter_blocks(const NetConfig& cfg);
std::size_t parameter_count(const NetConfig& cfg);

template <class T>
struct Network {
  NetConfig cfg;
  std::vector<ParamBlock> blocks;
  std::vector<T> theta;

  /* He fan-in initialization: weights ~ N(0, 2/fan_in) drawn from Rng(seed)
   * in block order (double precision, then cast); biases zero. */
  static Network initialized(const NetConfig& cfg) {
    validate(cfg);
    Network net;
    net.cfg = cfg;
    net.blocks = parameter_blocks(cfg);
    net.theta.assign(parameter_count(cfg), T(0));
    Rng rng(cfg.seed);
    for (const auto& b : net.blocks) {
      if (b.name.back() != 'w') continue;  // biases stay zero
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < b.shape.size(); ++i) fan_in *= b.shape[i];
      const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < b.size(); ++i)
        net.theta[b.offset + i] = static_cast<T>(rng.normal() * std_dev);
    }
    return net;
  }

  template <class U>
  Network<U> cast() const {
    Network<U> out;
    out.cfg = cfg;
    out.blocks = blocks;
    out.theta.assign(theta.begin(), theta.end());
    return out;
  }

  std::size_t param_count() const { return theta.size(); }

  std::string block_of_index(std::size_t i) const {
    for (const auto& b : blocks)
      if (i >= b.offset && i < b.offset + b.size()) return b.name;
    return "theta[" + std::to_string(i) + "]";
  }

  // One tape leaf per parameter block; reuse the returned ids across several
  // forward() calls on the same tape so gradients accumulate.
  std::vector<int> bind(Tape<T>& tape, bool requires_grad = true) const {
    std::vector<int> ids;
    ids.reserve(blocks.size());
    for (const auto& b : blocks) {
      RTensor<T> v(b.shape);
      std::copy(theta.begin() + static_cast<std::ptrdiff_t>(b.offset),
                theta.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()),
                v.data.begin());
      ids.push_back(tape.leaf(std::move(v), requires_grad));
    }
    return ids;
  }

  int forward(Tape<T>& tape, int input, const std::vector<int>& params) const {
    const auto& xv = tape.val(input);
    if (xv.shape.size() != 3 ||
        xv.shape[0] != static_cast<std::size_t>(cfg.in_ch))
      throw ShapeError("network forward: expected [in_ch,H,W] input");
    const int levels = static_cast<int>(cfg.level_channels.size());
    const std::size_t div = std::size_t{1} << (levels - 1);
    if (xv.shape[1] % div || xv.shape[2] % div)
      throw ShapeError("network forward: H and W must be divisible by " +
                       std::to_string(div));
    int h = input;
    if (cfg.input_gain != 1.0) h = tape.scale(h, static_cast<T>(cfg.input_gain));
    std::size_t pi = 0;
    auto conv_pair = [&](int x) {
      int c0 = tape.conv2d(x, params[pi], params[pi + 1]);
      pi += 2;
      int s0 = tape.silu(c0);
      int c1 = tape.conv2d(s0, params[pi], params[pi + 1]);
      pi += 2;
      return tape.silu(c1);
    };
    std::vector<int> skips;
    for (int l = 0; l < levels; ++l) {
      if (l > 0) h = tape.avgpool2(h);
      h = conv_pair(h);
      if (l < levels - 1) skips.push_back(h);
    }
    for (int l = levels - 2; l >= 0; --l) {
      h = tape.upsample2(h);
      h = tape.concat_ch(h, skips[l]);
      h = conv_pair(h);
    }
    int out = tape.conv2d(h, params[pi], params[pi + 1]);
    pi += 2;
    return out;
  }

  // Flat gradient aligned with theta; zero for blocks the loss never touched.
  std::vector<T> grad_flat(const Tape<T>& tape,
                           const std::vector<int>& params) const {
    std::vector<T> g(theta.size(), T(0));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& gb = tape.grad(params[i]);
      if (gb.size() == 0) continue;
      std::copy(gb.data.begin(), gb.data.end(),
                g.begin() + static_cast<std::ptrdiff_t>(blocks[i].offset));
    }
    return g;
  }

  RTensor<T> infer(const RTensor<T>& in) const {
    Tape<T> tape;
    int x = tape.constant(in);
    auto params = bind(tape, false);
    return tape.val(forward(tape, x, params));
  }
};

/* Adam with bias correction; update = lr * m_hat / (sqrt(v_hat) + eps). */
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<T> m, v;
  long step = 0;
  explicit AdamState(std::size_t n) : m(n, T(0)), v(n, T(0)) {}
};

template <class T>
void adam_step(AdamState<T>& st, std::vector<T>& theta,
               const std::vector<T>& grad, const AdamConfig& cfg,
               const std::function<std::string(std::size_t)>& name_of = {}) {
  if (theta.size() != grad.size() || st.m.size() != theta.size())
    throw ShapeError("adam_step: size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(static_cast<double>(grad[i])))
      throw TrainingError("adam_step: non-finite gradient in block " +
                          (name_of ? name_of(i) : std::to_string(i)));
  st.step += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = b1 * static_cast<double>(st.m[i]) + (1.0 - b1) * g;
    const double v = b2 * static_cast<double>(st.v[i]) + (1.0 - b2) * g * g;
    st.m[i] = static_cast<T>(m);
    st.v[i] = static_cast<T>(v);
    const double mh = m / c1, vh = v / c2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                              cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
  }
}

/* Checkpoint container: plain-text header (topology, seed, step count, named
 * extra scalars, block table) followed by one CXT blob per parameter block.
 * Real parameters are stored as complex64 with zero imaginary parts. */
struct CheckpointExtras {
  long steps = 0;
  std::map<std::string, double> scalars;
};

void save_checkpoint(const std::string& path, const Network<float>& net,
                     const CheckpointExtras& extras);
Network<float> load_checkpoint(const std::string& path,
                               CheckpointExtras* extras = nullptr);

}  // namespace deskmri::nn
